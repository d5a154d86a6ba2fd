//! The trainable model and its batch forward/backward.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use super::features::{FrozenStack, SampleFeatures};
use super::loss::{bce_batch, bce_logit_grad};
use crate::adapters::{init_projection, InitScheme, ProjectionName, ProjectionParams};
use crate::backbone::{BackboneMeta, TokenEmbeddingSequence};
use crate::config::{AblationFlags, PhiPlacement, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{CombinerCache, CombinerParams, HeadCache, HeadParams, InteractionCache, InteractionHeadParams};
use crate::nn::{derive_seed, dropout_mask, join, seeded_rng, sigmoid, Params, Tensor, TensorMut};

/// A model that the generic training loop can optimize.
pub trait Trainee: Clone + Send + Sync {
    type Sample: Sync;
    type Context: Sync + ?Sized;

    fn zeros_like(&self) -> Self;

    fn label(sample: &Self::Sample) -> u8;

    /// Inference-mode logit (no dropout).
    fn logit(&self, ctx: &Self::Context, sample: &Self::Sample) -> Result<f64>;

    /// Mean BCE over `batch`; the gradient is accumulated into `grad`.
    /// `dropout_seed` fixes every dropout mask of the step.
    fn loss_and_grad(
        &self,
        ctx: &Self::Context,
        batch: &[&Self::Sample],
        dropout_seed: u64,
        grad: &mut Self,
    ) -> Result<f64>;

    fn trainable(&self) -> Vec<Tensor<'_>>;

    fn trainable_mut(&mut self) -> Vec<TensorMut<'_>>;
}

pub const VISUAL_PROJ: &str = "visual_proj";
pub const TEXTUAL_PROJ: &str = "textual_proj";
pub const PHI_PROJ: &str = "phi_proj";
pub const COMBINER: &str = "combiner";
pub const HEAD: &str = "head";
pub const INTERACTION_HEAD: &str = "interaction_head";

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Combiner {
        combiner: CombinerParams,
        head: HeadParams,
    },
    Interaction(InteractionHeadParams),
}

/// Dimensions and switches needed to build a [`MemeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d: usize,
    pub w: usize,
    pub p: usize,
    pub h: usize,
    pub interaction_hidden: usize,
    pub dropout: f64,
    pub placement: PhiPlacement,
    pub phi_init: InitScheme,
    pub flags: AblationFlags,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig, meta: &BackboneMeta) -> Self {
        let eff = cfg.effective();
        Self {
            d: meta.d,
            w: meta.w,
            p: cfg.p(),
            h: cfg.h(),
            interaction_hidden: eff.model.interaction_hidden,
            dropout: eff.model.head_dropout,
            placement: eff.model.phi_proj_placement,
            phi_init: eff.model.phi_proj_init,
            flags: eff.ablation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemeModel {
    pub visual_proj: ProjectionParams,
    pub textual_proj: ProjectionParams,
    /// Present exactly when textual inversion is enabled.
    pub phi_proj: Option<ProjectionParams>,
    pub fusion: Fusion,
    pub fusion_frozen: bool,
    pub placement: PhiPlacement,
}

impl MemeModel {
    /// Stage-1 model: projections under the interaction head, no inversion.
    pub fn stage1(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "stage1-interaction");
        Ok(Self {
            visual_proj: init_projection(ProjectionName::VisualProj, spec.d, spec.p, InitScheme::SeededUniform, derive_seed(seed, "visual_proj"))?,
            textual_proj: init_projection(ProjectionName::TextualProj, spec.d, spec.p, InitScheme::SeededUniform, derive_seed(seed, "stage1-textual_proj"))?,
            phi_proj: None,
            fusion: Fusion::Interaction(InteractionHeadParams::new(spec.p, spec.interaction_hidden, spec.dropout, &mut rng)),
            fusion_frozen: false,
            placement: spec.placement,
        })
    }

    /// A freshly initialized model with the components selected by the flags.
    pub fn fresh(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let visual_proj = init_projection(ProjectionName::VisualProj, spec.d, spec.p, InitScheme::SeededUniform, derive_seed(seed, "visual_proj"))?;
        let textual_proj = init_projection(ProjectionName::TextualProj, spec.d, spec.p, InitScheme::SeededUniform, derive_seed(seed, "textual_proj"))?;
        let phi_proj = if spec.flags.use_textual_inversion {
            let dim = match spec.placement {
                PhiPlacement::Input => spec.d,
                PhiPlacement::Output => spec.w,
            };
            Some(init_projection(ProjectionName::PhiProj, dim, dim, spec.phi_init, derive_seed(seed, "phi_proj"))?)
        } else {
            None
        };
        let fusion = if spec.flags.use_combiner {
            let mut rng = seeded_rng(seed, "combiner");
            let combiner = CombinerParams::new(spec.p, spec.h, &mut rng);
            let head = HeadParams::new(spec.p, spec.dropout, &mut rng);
            Fusion::Combiner { combiner, head }
        } else {
            let mut rng = seeded_rng(seed, "interaction");
            Fusion::Interaction(InteractionHeadParams::new(spec.p, spec.interaction_hidden, spec.dropout, &mut rng))
        };
        Ok(Self {
            visual_proj,
            textual_proj,
            phi_proj,
            fusion,
            fusion_frozen: false,
            placement: spec.placement,
        })
    }

    pub fn uses_inversion(&self) -> bool {
        self.phi_proj.is_some()
    }

    pub fn uses_combiner(&self) -> bool {
        matches!(self.fusion, Fusion::Combiner { .. })
    }

    /// `(name, frozen, params)` for every component, in serialization order.
    pub fn components(&self) -> Vec<(&'static str, bool, &dyn Params)> {
        let mut out: Vec<(&'static str, bool, &dyn Params)> = vec![
            (VISUAL_PROJ, self.visual_proj.frozen, &self.visual_proj),
            (TEXTUAL_PROJ, self.textual_proj.frozen, &self.textual_proj),
        ];
        if let Some(pp) = &self.phi_proj {
            out.push((PHI_PROJ, pp.frozen, pp));
        }
        match &self.fusion {
            Fusion::Combiner { combiner, head } => {
                out.push((COMBINER, self.fusion_frozen, combiner));
                out.push((HEAD, self.fusion_frozen, head));
            }
            Fusion::Interaction(ih) => out.push((INTERACTION_HEAD, self.fusion_frozen, ih)),
        }
        out
    }

    fn components_mut(&mut self) -> Vec<(&'static str, bool, &mut dyn Params)> {
        let mut out: Vec<(&'static str, bool, &mut dyn Params)> = vec![
            (VISUAL_PROJ, self.visual_proj.frozen, &mut self.visual_proj),
            (TEXTUAL_PROJ, self.textual_proj.frozen, &mut self.textual_proj),
        ];
        if let Some(pp) = &mut self.phi_proj {
            out.push((PHI_PROJ, pp.frozen, pp));
        }
        match &mut self.fusion {
            Fusion::Combiner { combiner, head } => {
                out.push((COMBINER, self.fusion_frozen, combiner));
                out.push((HEAD, self.fusion_frozen, head));
            }
            Fusion::Interaction(ih) => out.push((INTERACTION_HEAD, self.fusion_frozen, ih)),
        }
        out
    }

    /// Hash of one component's parameters, if present.
    pub fn component_hash(&self, name: &str) -> Option<String> {
        self.components()
            .into_iter()
            .find(|(n, _, _)| *n == name)
            .map(|(_, _, p)| p.param_hash())
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.visual_proj.frozen = frozen;
        self.textual_proj.frozen = frozen;
        if let Some(pp) = &mut self.phi_proj {
            pp.frozen = frozen;
        }
        self.fusion_frozen = frozen;
    }

    /// Text features fed to the textual projection: the inversion prompt's
    /// encoding when inversion is on, the raw text encoding otherwise.
    fn text_features(&self, stack: &FrozenStack, s: &SampleFeatures) -> Result<(Array1<f64>, Option<InversionCache>)> {
        let Some(pp) = &self.phi_proj else {
            return Ok((s.text.clone(), None));
        };
        let skeleton = s
            .prompt
            .as_ref()
            .ok_or_else(|| Error::arg(format!("record {} has no inversion prompt", s.id)))?;
        let (phi_in, pseudo) = match self.placement {
            PhiPlacement::Input => {
                let a = pp.project(s.visual.view())?;
                let pseudo = stack.phi.forward(a.view());
                (a, pseudo)
            }
            PhiPlacement::Output => {
                let b = stack.phi.forward(s.visual.view());
                let pseudo = pp.project(b.view())?;
                (b, pseudo)
            }
        };
        let seq = skeleton.fill(pseudo.view())?;
        let t = stack.backbone.encode_token_embeddings(&seq)?.values;
        Ok((
            t,
            Some(InversionCache {
                seq,
                slot: skeleton.slot,
                phi_in,
            }),
        ))
    }

    fn forward(&self, stack: &FrozenStack, s: &SampleFeatures, dropout_seed: Option<u64>) -> Result<(f64, SampleCache)> {
        let (text, inversion) = self.text_features(stack, s)?;
        let v = self.visual_proj.project(s.visual.view())?;
        let t = self.textual_proj.project(text.view())?;
        let mask = |n: usize, rate: f64| {
            dropout_seed.map(|seed| dropout_mask(n, rate, &mut seeded_rng(seed, &s.id)))
        };
        let (logit, fusion) = match &self.fusion {
            Fusion::Combiner { combiner, head } => {
                let (fused, cc) = combiner.forward(t.view(), v.view());
                let m = mask(head.hidden_dim(), head.dropout);
                let (logit, hc) = head.forward(fused.view(), m);
                (logit, FusionCache::Combiner(cc, hc))
            }
            Fusion::Interaction(ih) => {
                let m = mask(ih.mlp.hidden_dim(), ih.mlp.dropout);
                let (logit, ic) = ih.forward(t.view(), v.view(), m);
                (logit, FusionCache::Interaction(ic))
            }
        };
        Ok((
            logit,
            SampleCache {
                visual: s.visual.clone(),
                text,
                inversion,
                fusion,
            },
        ))
    }

    /// Backward through the heads and both projections; returns the
    /// gradient with respect to the (pre-projection) text features.
    fn backward_heads(&self, cache: &SampleCache, d_logit: f64, grad: &mut MemeModel) -> Array1<f64> {
        let (d_t, d_v) = match (&self.fusion, &cache.fusion, &mut grad.fusion) {
            (Fusion::Combiner { combiner, head }, FusionCache::Combiner(cc, hc), Fusion::Combiner { combiner: gc, head: gh }) => {
                let d_fused = head.backward(hc, d_logit, gh);
                combiner.backward(cc, d_fused.view(), gc)
            }
            (Fusion::Interaction(ih), FusionCache::Interaction(ic), Fusion::Interaction(gi)) => ih.backward(ic, d_logit, gi),
            _ => unreachable!("gradient model mirrors the parameter model"),
        };
        if !self.visual_proj.frozen {
            self.visual_proj
                .linear
                .backward(cache.visual.view(), d_v.view(), &mut grad.visual_proj.linear);
        }
        self.textual_proj
            .linear
            .backward(cache.text.view(), d_t.view(), &mut grad.textual_proj.linear)
    }

    /// Gradient at the φ projection's output, through the frozen text
    /// encoder and (for input placement) the frozen φ.
    fn inversion_grad(&self, stack: &FrozenStack, inv: &InversionCache, d_text: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let rows = stack.backbone.text_vjp(&inv.seq, d_text)?;
        let d_pseudo = rows.row(inv.slot).to_owned();
        Ok(match self.placement {
            PhiPlacement::Input => stack.phi.input_grad(inv.phi_in.view(), d_pseudo.view()),
            PhiPlacement::Output => d_pseudo,
        })
    }

    pub fn probability(&self, stack: &FrozenStack, s: &SampleFeatures) -> Result<f64> {
        Ok(sigmoid(self.logit(stack, s)?))
    }
}

#[derive(Debug, Clone)]
struct InversionCache {
    seq: TokenEmbeddingSequence,
    slot: usize,
    /// Input of the φ projection.
    phi_in: Array1<f64>,
}

#[derive(Debug, Clone)]
enum FusionCache {
    Combiner(CombinerCache, HeadCache),
    Interaction(InteractionCache),
}

#[derive(Debug, Clone)]
struct SampleCache {
    visual: Array1<f64>,
    text: Array1<f64>,
    inversion: Option<InversionCache>,
    fusion: FusionCache,
}

impl Params for MemeModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        for (name, _, p) in self.components() {
            p.collect(&join(prefix, name), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let prefix = prefix.to_string();
        for (name, _, p) in self.components_mut() {
            p.collect_mut(&join(&prefix, name), out);
        }
    }
}

impl Trainee for MemeModel {
    type Sample = SampleFeatures;
    type Context = FrozenStack;

    fn zeros_like(&self) -> Self {
        Self {
            visual_proj: self.visual_proj.zeros_like(),
            textual_proj: self.textual_proj.zeros_like(),
            phi_proj: self.phi_proj.as_ref().map(ProjectionParams::zeros_like),
            fusion: match &self.fusion {
                Fusion::Combiner { combiner, head } => Fusion::Combiner {
                    combiner: combiner.zeros_like(),
                    head: head.zeros_like(),
                },
                Fusion::Interaction(ih) => Fusion::Interaction(ih.zeros_like()),
            },
            fusion_frozen: self.fusion_frozen,
            placement: self.placement,
        }
    }

    fn label(sample: &SampleFeatures) -> u8 {
        sample.label()
    }

    fn logit(&self, stack: &FrozenStack, s: &SampleFeatures) -> Result<f64> {
        Ok(self.forward(stack, s, None)?.0)
    }

    fn loss_and_grad(&self, stack: &FrozenStack, batch: &[&SampleFeatures], dropout_seed: u64, grad: &mut Self) -> Result<f64> {
        let forward: Vec<(f64, SampleCache)> = batch
            .par_iter()
            .map(|s| self.forward(stack, s, Some(dropout_seed)))
            .collect::<Result<_>>()?;
        let probs: Vec<f64> = forward.iter().map(|(l, _)| sigmoid(*l)).collect();
        let labels: Vec<u8> = batch.iter().map(|s| s.label()).collect();
        let loss = bce_batch(&probs, &labels);
        let n = batch.len() as f64;
        let d_texts: Vec<Array1<f64>> = forward
            .iter()
            .zip(probs.iter().zip(&labels))
            .map(|((_, cache), (&p, &y))| self.backward_heads(cache, bce_logit_grad(p, y) / n, grad))
            .collect();
        if let Some(pp) = self.phi_proj.as_ref().filter(|pp| !pp.frozen) {
            let d_phi: Vec<Array1<f64>> = forward
                .par_iter()
                .zip(d_texts.par_iter())
                .map(|((_, cache), dt)| {
                    let inv = cache.inversion.as_ref().expect("inversion cache present");
                    self.inversion_grad(stack, inv, dt.view())
                })
                .collect::<Result<_>>()?;
            let g = grad.phi_proj.as_mut().expect("gradient mirrors model");
            for ((_, cache), d) in forward.iter().zip(&d_phi) {
                let inv = cache.inversion.as_ref().expect("inversion cache present");
                pp.linear.backward(inv.phi_in.view(), d.view(), &mut g.linear);
            }
        }
        Ok(loss)
    }

    fn trainable(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (name, frozen, p) in self.components() {
            if !frozen {
                p.collect(name, &mut out);
            }
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (name, frozen, p) in self.components_mut() {
            if !frozen {
                p.collect_mut(name, &mut out);
            }
        }
        out
    }
}

/// A classification head over a fixed feature vector, used by the
/// baseline rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorHead {
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector {
    pub id: String,
    pub x: Array1<f64>,
    pub label: u8,
}

impl Trainee for VectorHead {
    type Sample = LabeledVector;
    type Context = ();

    fn zeros_like(&self) -> Self {
        Self {
            head: self.head.zeros_like(),
        }
    }

    fn label(sample: &LabeledVector) -> u8 {
        sample.label
    }

    fn logit(&self, _: &(), s: &LabeledVector) -> Result<f64> {
        self.head.logit(s.x.view())
    }

    fn loss_and_grad(&self, _: &(), batch: &[&LabeledVector], dropout_seed: u64, grad: &mut Self) -> Result<f64> {
        let n = batch.len() as f64;
        let mut probs = Vec::with_capacity(batch.len());
        for s in batch {
            let mask = dropout_mask(self.head.hidden_dim(), self.head.dropout, &mut seeded_rng(dropout_seed, &s.id));
            let (logit, cache) = self.head.forward(s.x.view(), Some(mask));
            let p = sigmoid(logit);
            self.head.backward(&cache, bce_logit_grad(p, s.label) / n, &mut grad.head);
            probs.push(p);
        }
        let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
        Ok(bce_batch(&probs, &labels))
    }

    fn trainable(&self) -> Vec<Tensor<'_>> {
        self.head.tensors(HEAD)
    }

    fn trainable_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.head.tensors_mut(HEAD)
    }
}
