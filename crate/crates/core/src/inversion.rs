//! Textual inversion: a frozen network φ maps visual features to a
//! pseudo-word vector in the token-embedding space, and the prompt
//! "a photo of S*, {meme text}" is assembled at the embedding level with
//! that vector occupying the S* position.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{NamedTensor, TensorData, WeightArchive};
use crate::backbone::{Backbone, FeatureVector, Modality, TokenEmbeddingSequence};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, seeded_rng, Linear, Params, Tensor, TensorMut};

/// An image expressed as a vector in the token-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoToken {
    pub values: Array1<f64>,
}

/// The frozen inversion network: linear layers with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiNetwork {
    pub layers: Vec<Linear>,
}

impl PhiNetwork {
    /// Desk-scale stand-in: identity when `d == w`, otherwise a seeded
    /// Gaussian map scaled by 1/sqrt(d).
    pub fn stub(d: usize, w: usize, seed: u64) -> Self {
        let layer = if d == w {
            Linear::identity(d)
        } else {
            let mut rng = seeded_rng(seed, "phi-stub");
            let scale = 1.0 / (d as f64).sqrt();
            Linear {
                weight: Array2::from_shape_fn((w, d), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                }),
                bias: Array1::zeros(w),
            }
        };
        Self {
            layers: vec![layer],
        }
    }

    pub fn zero(d: usize, w: usize) -> Self {
        Self {
            layers: vec![Linear::zeros(d, w)],
        }
    }

    /// Loads `layers.{k}.weight` / `layers.{k}.bias` from a `phi` archive.
    pub fn load(dir: &Path) -> Result<Self> {
        let archive = WeightArchive::load(dir, "phi")?;
        let mut layers = Vec::new();
        let mut expected = Vec::new();
        for k in 0.. {
            let wname = format!("layers.{k}.weight");
            let Some(shape) = archive.shape_of(&wname).map(<[usize]>::to_vec) else {
                break;
            };
            if shape.len() != 2 {
                return Err(Error::WeightLoad {
                    path: dir.to_path_buf(),
                    detail: format!("{wname} has shape {shape:?}, expected a matrix"),
                });
            }
            let bname = format!("layers.{k}.bias");
            expected.push((wname.clone(), shape.clone()));
            expected.push((bname.clone(), vec![shape[0]]));
            let weight = Array2::from_shape_vec((shape[0], shape[1]), archive.f64(&wname)?)
                .map_err(|e| Error::shape(e.to_string()))?;
            let bias = Array1::from_vec(archive.f64(&bname)?);
            layers.push(Linear { weight, bias });
        }
        archive.check_expected(&expected)?;
        if layers.is_empty() {
            return Err(Error::WeightLoad {
                path: dir.to_path_buf(),
                detail: "manifest diff:\n- layers.0.weight (missing)".into(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::WeightLoad {
                    path: dir.to_path_buf(),
                    detail: "consecutive layer dimensions do not chain".into(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<NamedTensor> = self
            .tensors("")
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: TensorData::F32(t.data.iter().map(|&v| v as f32).collect()),
            })
            .collect();
        WeightArchive::write(dir, "phi", serde_json::json!({"activation": "gelu"}), &tensors)?;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last {
                h.mapv_inplace(gelu);
            }
        }
        h
    }

    /// Gradient with respect to the input only; φ itself never trains.
    pub fn input_grad(&self, x: ArrayView1<'_, f64>, grad_out: ArrayView1<'_, f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            h = if i < last { z.mapv(gelu) } else { z.clone() };
            pre.push(z);
        }
        let mut g = grad_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i < last {
                g.zip_mut_with(&pre[i], |g, &z| *g *= gelu_grad(z));
            }
            g = layer.weight.t().dot(&g);
        }
        g
    }
}

impl Params for PhiNetwork {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        for (k, l) in self.layers.iter().enumerate() {
            l.collect(&crate::nn::join(prefix, &format!("layers.{k}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&crate::nn::join(prefix, &format!("layers.{k}")), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default = "default_prefix")]
    pub prefix: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_prefix() -> String {
    "a photo of".into()
}

fn default_separator() -> String {
    ", ".into()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: default_prefix(),
            separator: default_separator(),
        }
    }
}

pub fn invert(visual: &FeatureVector, phi: &PhiNetwork) -> Result<PseudoToken> {
    if visual.len() != phi.input_dim() {
        return Err(Error::shape(format!(
            "visual features have length {}, inversion network expects {}",
            visual.len(),
            phi.input_dim()
        )));
    }
    Ok(PseudoToken {
        values: phi.forward(visual.values.view()),
    })
}

/// A prompt with its pseudo-word row still empty. Built once per record so
/// the pseudo vector can be swapped in cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSkeleton {
    pub sequence: TokenEmbeddingSequence,
    pub slot: usize,
    /// Meme text was cut to fit the context window.
    pub truncated: bool,
}

impl PromptSkeleton {
    pub fn new(backbone: &dyn Backbone, meme_text: &str, template: &PromptTemplate) -> Result<Self> {
        let prefix = backbone.encode_words(&template.prefix);
        if prefix.is_empty() {
            return Err(Error::arg(format!(
                "prompt prefix {:?} produces no tokens",
                template.prefix
            )));
        }
        let context_len = backbone.meta().context_len;
        let fixed = prefix.len() + 3; // SOT, slot, EOT
        if fixed > context_len {
            return Err(Error::shape(format!(
                "prompt prefix needs {fixed} positions, context holds {context_len}"
            )));
        }
        let mut tail = if meme_text.is_empty() {
            Vec::new()
        } else {
            backbone.encode_words(&format!("{}{meme_text}", template.separator))
        };
        let budget = context_len - fixed;
        let truncated = tail.len() > budget;
        tail.truncate(budget);

        let slot = 1 + prefix.len();
        let mut ids = Vec::with_capacity(fixed + tail.len());
        ids.push(backbone.sot());
        ids.extend(&prefix);
        // Placeholder row, overwritten by the pseudo vector.
        ids.push(backbone.sot());
        ids.extend(&tail);
        ids.push(backbone.eot());
        let mut sequence = backbone.embed_tokens(&ids)?;
        sequence.embeddings.row_mut(slot).fill(0.0);
        sequence.pseudo_slot = Some(slot);
        Ok(Self {
            sequence,
            slot,
            truncated,
        })
    }

    pub fn fill(&self, pseudo: ArrayView1<'_, f64>) -> Result<TokenEmbeddingSequence> {
        let w = self.sequence.embeddings.ncols();
        if pseudo.len() != w {
            return Err(Error::shape(format!(
                "pseudo token has length {}, token embeddings have width {w}",
                pseudo.len()
            )));
        }
        let mut seq = self.sequence.clone();
        seq.embeddings.row_mut(self.slot).assign(&pseudo);
        Ok(seq)
    }
}

/// `[SOT, prefix.., S*, separator + meme text.., EOT]` at the embedding
/// level. Only the meme text is ever truncated; empty text drops the
/// separator.
pub fn build_prompt(
    backbone: &dyn Backbone,
    pseudo: &PseudoToken,
    meme_text: &str,
    template: &PromptTemplate,
) -> Result<TokenEmbeddingSequence> {
    PromptSkeleton::new(backbone, meme_text, template)?.fill(pseudo.values.view())
}

/// Text features of the inversion prompt for one meme.
pub fn encode_multimodal_text(
    image: &RgbImage,
    meme_text: &str,
    backbone: &dyn Backbone,
    phi: &PhiNetwork,
    template: &PromptTemplate,
) -> Result<FeatureVector> {
    let visual = backbone.encode_image(image)?;
    let pseudo = invert(&visual, phi)?;
    let seq = build_prompt(backbone, &pseudo, meme_text, template)?;
    let out = backbone.encode_token_embeddings(&seq)?;
    debug_assert_eq!(out.modality, Modality::Textual);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::MockBackbone;

    fn mock() -> MockBackbone {
        MockBackbone::new(0, 32, 32, 77).unwrap()
    }

    fn visual(v: f64) -> FeatureVector {
        FeatureVector {
            values: Array1::from_elem(32, v),
            modality: Modality::Visual,
        }
    }

    #[test]
    fn zero_phi_gives_zero_token() {
        let t = invert(&visual(0.7), &PhiNetwork::zero(32, 32)).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invert_checks_dimension() {
        let bad = FeatureVector {
            values: Array1::zeros(5),
            modality: Modality::Visual,
        };
        assert!(matches!(invert(&bad, &PhiNetwork::stub(32, 32, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn stub_is_identity_for_square_dims_and_pure_otherwise() {
        let v = visual(0.25);
        assert_eq!(invert(&v, &PhiNetwork::stub(32, 32, 0)).unwrap().values, v.values);
        let rect = PhiNetwork::stub(32, 16, 4);
        assert_eq!(rect.output_dim(), 16);
        assert_eq!(invert(&v, &rect).unwrap(), invert(&v, &rect).unwrap());
    }

    #[test]
    fn single_slot_right_after_prefix() {
        let m = mock();
        let pseudo = PseudoToken {
            values: Array1::from_elem(32, 9.0),
        };
        let seq = build_prompt(&m, &pseudo, "ishtar is looking for love", &PromptTemplate::default())
            .unwrap();
        assert_eq!(seq.pseudo_slot, Some(4));
        let slot_rows: Vec<usize> = (0..seq.len())
            .filter(|&r| seq.embeddings.row(r).iter().all(|&v| v == 9.0))
            .collect();
        assert_eq!(slot_rows, vec![4]);
        // SOT + 3 prefix + slot + ", " + 5 words + EOT
        assert_eq!(seq.len(), 1 + 3 + 1 + 1 + 5 + 1);
        assert_eq!(seq.eot_index, seq.len() - 1);
    }

    #[test]
    fn empty_text_drops_separator() {
        let m = mock();
        let pseudo = PseudoToken {
            values: Array1::zeros(32),
        };
        let seq = build_prompt(&m, &pseudo, "", &PromptTemplate::default()).unwrap();
        assert_eq!(seq.len(), 1 + 3 + 1 + 1);
    }

    #[test]
    fn long_text_fills_context_and_keeps_eot() {
        let m = mock();
        let pseudo = PseudoToken {
            values: Array1::zeros(32),
        };
        let text = vec!["word"; 500].join(" ");
        let sk = PromptSkeleton::new(&m, &text, &PromptTemplate::default()).unwrap();
        assert!(sk.truncated);
        let seq = sk.fill(pseudo.values.view()).unwrap();
        assert_eq!(seq.len(), 77);
        assert_eq!(seq.eot_index, 76);
        let eot_row = m.embed_tokens(&[m.eot()]).unwrap().embeddings;
        assert_eq!(seq.embeddings.row(76), eot_row.row(0));
    }

    #[test]
    fn empty_prefix_is_rejected() {
        let m = mock();
        let t = PromptTemplate {
            prefix: "   ".into(),
            separator: ", ".into(),
        };
        assert!(PromptSkeleton::new(&m, "x", &t).is_err());
    }

    #[test]
    fn phi_input_grad_matches_finite_differences() {
        let mut rng = seeded_rng(1, "phi-test");
        let phi = PhiNetwork {
            layers: vec![
                Linear::uniform(6, 8, &mut rng),
                Linear::uniform(8, 8, &mut rng),
                Linear::uniform(8, 5, &mut rng),
            ],
        };
        let x = Array1::from_shape_fn(6, |i| 0.3 * i as f64 - 0.7);
        let g = Array1::from_shape_fn(5, |i| 1.0 - 0.4 * i as f64);
        let analytic = phi.input_grad(x.view(), g.view());
        for i in 0..6 {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut n = x.clone();
            n[i] -= 1e-6;
            let fd = (g.dot(&phi.forward(p.view())) - g.dot(&phi.forward(n.view()))) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn phi_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(2, "phi-save");
        let phi = PhiNetwork {
            layers: vec![Linear::uniform(4, 6, &mut rng), Linear::uniform(6, 3, &mut rng)],
        };
        phi.save(dir.path()).unwrap();
        let loaded = PhiNetwork::load(dir.path()).unwrap();
        assert_eq!(loaded.layers.len(), 2);
        let x = Array1::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let a = phi.forward(x.view());
        let b = loaded.forward(x.view());
        // weights were stored as f32
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-6));
    }
}
