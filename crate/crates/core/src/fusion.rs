//! Fusion heads: the gated Combiner, the outer-product interaction head,
//! the classification MLP, and the fixed baseline fusers.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureVector;
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, sigmoid, Linear, Params, Tensor, TensorMut};

/// Gated fusion of a text and an image vector of equal length `p`.
///
/// Both inputs pass through ReLU branches (`p → h`). Their concatenation
/// drives a scalar gate `λ` and a residual (`2h → h → p`). The output is
/// `λ·text + (1−λ)·image + residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams {
    pub text_branch: Linear,
    pub image_branch: Linear,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub residual_hidden: Linear,
    pub residual_out: Linear,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CombinerCache {
    text: Array1<f64>,
    image: Array1<f64>,
    text_pre: Array1<f64>,
    image_pre: Array1<f64>,
    joint: Array1<f64>,
    gate_pre: Array1<f64>,
    gate_act: Array1<f64>,
    residual_pre: Array1<f64>,
    residual_act: Array1<f64>,
    pub lambda: f64,
}

impl CombinerParams {
    pub fn new(p: usize, h: usize, rng: &mut impl Rng) -> Self {
        Self {
            text_branch: Linear::uniform(p, h, rng),
            image_branch: Linear::uniform(p, h, rng),
            gate_hidden: Linear::uniform(2 * h, h, rng),
            gate_out: Linear::uniform(h, 1, rng),
            residual_hidden: Linear::uniform(2 * h, h, rng),
            residual_out: Linear::uniform(h, p, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            text_branch: self.text_branch.zeros_like(),
            image_branch: self.image_branch.zeros_like(),
            gate_hidden: self.gate_hidden.zeros_like(),
            gate_out: self.gate_out.zeros_like(),
            residual_hidden: self.residual_hidden.zeros_like(),
            residual_out: self.residual_out.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.text_branch.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.text_branch.output_dim()
    }

    /// Zeroes the final gate and residual layers, which pins `λ` to 0.5 and
    /// the residual to zero regardless of the other weights.
    pub fn force_even_mix(&mut self) {
        self.gate_out.weight.fill(0.0);
        self.gate_out.bias.fill(0.0);
        self.residual_out.weight.fill(0.0);
        self.residual_out.bias.fill(0.0);
    }

    fn check(&self, text: ArrayView1<'_, f64>, image: ArrayView1<'_, f64>) -> Result<()> {
        let p = self.input_dim();
        if text.len() != p || image.len() != p {
            return Err(Error::shape(format!(
                "combiner expects two length-{p} inputs, got {} and {}",
                text.len(),
                image.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, text: ArrayView1<'_, f64>, image: ArrayView1<'_, f64>) -> (Array1<f64>, CombinerCache) {
        let h = self.hidden_dim();
        let text_pre = self.text_branch.forward(text);
        let image_pre = self.image_branch.forward(image);
        let mut joint = Array1::zeros(2 * h);
        joint.slice_mut(s![..h]).assign(&relu(&text_pre));
        joint.slice_mut(s![h..]).assign(&relu(&image_pre));
        let gate_pre = self.gate_hidden.forward(joint.view());
        let gate_act = relu(&gate_pre);
        let lambda = sigmoid(self.gate_out.forward(gate_act.view())[0]);
        let residual_pre = self.residual_hidden.forward(joint.view());
        let residual_act = relu(&residual_pre);
        let residual = self.residual_out.forward(residual_act.view());
        let out = &text * lambda + &image * (1.0 - lambda) + residual;
        let cache = CombinerCache {
            text: text.to_owned(),
            image: image.to_owned(),
            text_pre,
            image_pre,
            joint,
            gate_pre,
            gate_act,
            residual_pre,
            residual_act,
            lambda,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad`; returns the gradients
    /// with respect to the text and image inputs.
    pub fn backward(
        &self,
        cache: &CombinerCache,
        grad_out: ArrayView1<'_, f64>,
        grad: &mut CombinerParams,
    ) -> (Array1<f64>, Array1<f64>) {
        let h = self.hidden_dim();
        let lambda = cache.lambda;
        let mut d_text = &grad_out * lambda;
        let mut d_image = &grad_out * (1.0 - lambda);

        let d_lambda = grad_out.dot(&(&cache.text - &cache.image));
        let d_gate_logit = Array1::from_elem(1, d_lambda * lambda * (1.0 - lambda));
        let d_gate_act = self
            .gate_out
            .backward(cache.gate_act.view(), d_gate_logit.view(), &mut grad.gate_out);
        let d_gate_pre = relu_backward(&cache.gate_pre, &d_gate_act);
        let mut d_joint =
            self.gate_hidden
                .backward(cache.joint.view(), d_gate_pre.view(), &mut grad.gate_hidden);

        let d_res_act = self
            .residual_out
            .backward(cache.residual_act.view(), grad_out, &mut grad.residual_out);
        let d_res_pre = relu_backward(&cache.residual_pre, &d_res_act);
        d_joint += &self.residual_hidden.backward(
            cache.joint.view(),
            d_res_pre.view(),
            &mut grad.residual_hidden,
        );

        let d_text_pre = relu_backward(&cache.text_pre, &d_joint.slice(s![..h]).to_owned());
        let d_image_pre = relu_backward(&cache.image_pre, &d_joint.slice(s![h..]).to_owned());
        d_text += &self
            .text_branch
            .backward(cache.text.view(), d_text_pre.view(), &mut grad.text_branch);
        d_image += &self
            .image_branch
            .backward(cache.image.view(), d_image_pre.view(), &mut grad.image_branch);
        (d_text, d_image)
    }

    pub fn gate(&self, text: ArrayView1<'_, f64>, image: ArrayView1<'_, f64>) -> Result<f64> {
        self.check(text, image)?;
        Ok(self.forward(text, image).1.lambda)
    }
}

pub fn combine(
    text: ArrayView1<'_, f64>,
    image: ArrayView1<'_, f64>,
    params: &CombinerParams,
) -> Result<Array1<f64>> {
    params.check(text, image)?;
    Ok(params.forward(text, image).0)
}

impl Params for CombinerParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.text_branch.collect(&join(prefix, "text_branch"), out);
        self.image_branch.collect(&join(prefix, "image_branch"), out);
        self.gate_hidden.collect(&join(prefix, "gate_hidden"), out);
        self.gate_out.collect(&join(prefix, "gate_out"), out);
        self.residual_hidden.collect(&join(prefix, "residual_hidden"), out);
        self.residual_out.collect(&join(prefix, "residual_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.text_branch.collect_mut(&join(prefix, "text_branch"), out);
        self.image_branch.collect_mut(&join(prefix, "image_branch"), out);
        self.gate_hidden.collect_mut(&join(prefix, "gate_hidden"), out);
        self.gate_out.collect_mut(&join(prefix, "gate_out"), out);
        self.residual_hidden.collect_mut(&join(prefix, "residual_hidden"), out);
        self.residual_out.collect_mut(&join(prefix, "residual_out"), out);
    }
}

/// Two-layer MLP producing one logit: `in → hidden → 1` with ReLU and
/// optional inverted dropout on the hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
    mask: Option<Array1<f64>>,
}

impl HeadParams {
    /// `h → max(h/2, 1) → 1`.
    pub fn new(input_dim: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self::with_hidden(input_dim, (input_dim / 2).max(1), dropout, rng)
    }

    pub fn with_hidden(input_dim: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::uniform(input_dim, hidden, rng),
            out: Linear::uniform(hidden, 1, rng),
            dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
            dropout: self.dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    /// `mask` is a dropout mask over the hidden units; `None` in inference.
    pub fn forward(&self, x: ArrayView1<'_, f64>, mask: Option<Array1<f64>>) -> (f64, HeadCache) {
        let pre = self.hidden.forward(x);
        let mut act = relu(&pre);
        if let Some(m) = &mask {
            act *= m;
        }
        let logit = self.out.forward(act.view())[0];
        let cache = HeadCache {
            input: x.to_owned(),
            pre,
            act,
            mask,
        };
        (logit, cache)
    }

    pub fn backward(&self, cache: &HeadCache, d_logit: f64, grad: &mut HeadParams) -> Array1<f64> {
        let g = Array1::from_elem(1, d_logit);
        let mut d_act = self.out.backward(cache.act.view(), g.view(), &mut grad.out);
        if let Some(m) = &cache.mask {
            d_act *= m;
        }
        let d_pre = relu_backward(&cache.pre, &d_act);
        self.hidden.backward(cache.input.view(), d_pre.view(), &mut grad.hidden)
    }

    pub fn logit(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "head expects length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(self.forward(x, None).0)
    }
}

impl Params for HeadParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.hidden.collect_mut(&join(prefix, "hidden"), out);
        self.out.collect_mut(&join(prefix, "out"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub logit: f64,
    pub probability: f64,
}

pub fn classify(fused: ArrayView1<'_, f64>, head: &HeadParams) -> Result<Classification> {
    let logit = head.logit(fused)?;
    Ok(Classification {
        logit,
        probability: sigmoid(logit),
    })
}

/// Classifier over the flattened `p × p` outer product of image and text
/// vectors. Rows follow the image vector, columns the text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionHeadParams {
    pub p: usize,
    pub mlp: HeadParams,
}

#[derive(Debug, Clone)]
pub struct InteractionCache {
    text: Array1<f64>,
    image: Array1<f64>,
    head: HeadCache,
}

/// `z[a·p + b] = image[a] · text[b]`.
pub fn outer_flat(image: ArrayView1<'_, f64>, text: ArrayView1<'_, f64>) -> Array1<f64> {
    let p = image.len();
    let q = text.len();
    Array1::from_shape_fn(p * q, |k| image[k / q] * text[k % q])
}

impl InteractionHeadParams {
    pub fn new(p: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            p,
            mlp: HeadParams::with_hidden(p * p, hidden, dropout, rng),
        }
    }

    pub fn from_mlp(p: usize, mlp: HeadParams) -> Result<Self> {
        if mlp.input_dim() != p * p {
            return Err(Error::shape(format!(
                "interaction head needs input {} for p = {p}, MLP takes {}",
                p * p,
                mlp.input_dim()
            )));
        }
        Ok(Self { p, mlp })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            p: self.p,
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(
        &self,
        text: ArrayView1<'_, f64>,
        image: ArrayView1<'_, f64>,
        mask: Option<Array1<f64>>,
    ) -> (f64, InteractionCache) {
        let z = outer_flat(image, text);
        let (logit, head) = self.mlp.forward(z.view(), mask);
        let cache = InteractionCache {
            text: text.to_owned(),
            image: image.to_owned(),
            head,
        };
        (logit, cache)
    }

    /// Returns the gradients with respect to the text and image inputs.
    pub fn backward(
        &self,
        cache: &InteractionCache,
        d_logit: f64,
        grad: &mut InteractionHeadParams,
    ) -> (Array1<f64>, Array1<f64>) {
        let dz = self.mlp.backward(&cache.head, d_logit, &mut grad.mlp);
        let m: Array2<f64> = dz.into_shape_with_order((self.p, self.p)).expect("p x p");
        let d_image = m.dot(&cache.text);
        let d_text = m.t().dot(&cache.image);
        (d_text, d_image)
    }
}

pub fn interaction_fuse(
    text: ArrayView1<'_, f64>,
    image: ArrayView1<'_, f64>,
    params: &InteractionHeadParams,
) -> Result<f64> {
    if text.len() != params.p || image.len() != params.p {
        return Err(Error::shape(format!(
            "interaction head expects two length-{} inputs, got {} and {}",
            params.p,
            text.len(),
            image.len()
        )));
    }
    Ok(params.forward(text, image, None).0)
}

impl Params for InteractionHeadParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.mlp.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.mlp.collect_mut(prefix, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    TextOnly,
    ImageOnly,
    TextPlusTi,
    Sum,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 4] = [Self::TextOnly, Self::ImageOnly, Self::TextPlusTi, Self::Sum];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TextOnly => "text_only",
            Self::ImageOnly => "image_only",
            Self::TextPlusTi => "text_plus_ti",
            Self::Sum => "sum",
        }
    }
}

/// Features available to a baseline fuser. `inverted_text` holds the text
/// features of the inversion prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct BaselineInputs<'a> {
    pub visual: Option<&'a FeatureVector>,
    pub textual: Option<&'a FeatureVector>,
    pub inverted_text: Option<&'a FeatureVector>,
}

pub fn baseline_fuse(mode: BaselineMode, inputs: BaselineInputs<'_>) -> Result<Array1<f64>> {
    let need = |f: Option<&FeatureVector>, what: &str| {
        f.map(|v| v.values.clone()).ok_or_else(|| {
            Error::config("baseline.mode", format!("{} requires {what} features", mode.as_str()))
        })
    };
    match mode {
        BaselineMode::TextOnly => need(inputs.textual, "textual"),
        BaselineMode::ImageOnly => need(inputs.visual, "visual"),
        BaselineMode::TextPlusTi => need(inputs.inverted_text, "inversion-prompt text"),
        BaselineMode::Sum => {
            let v = need(inputs.visual, "visual")?;
            let t = need(inputs.textual, "textual")?;
            if v.len() != t.len() {
                return Err(Error::shape(format!(
                    "cannot sum features of length {} and {}",
                    v.len(),
                    t.len()
                )));
            }
            Ok(v + t)
        }
    }
}
