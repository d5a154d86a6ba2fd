//! Dense building blocks for the trainable heads: a linear layer with a
//! hand-written backward pass, activations, parameter visitation and
//! seeded randomness.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Borrowed view of one named parameter tensor.
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named parameter tensor.
pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Anything that owns named `f64` tensors in a fixed visiting order.
///
/// Gradients are stored in a value of the same type as the parameters
/// (see `zeros_like` on the implementors), so the two visiting orders line up.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);

    fn tensors(&self, prefix: &str) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.collect(prefix, &mut out);
        out
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut(prefix, &mut out);
        out
    }

    /// SHA-256 over the little-endian bytes of every tensor, in visiting order.
    fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors("") {
            for v in t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn num_params(&self) -> usize {
        self.tensors("").iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer computing `weight · x + bias`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Weights and bias drawn from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn uniform(input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight =
            Array2::from_shape_fn((output_dim, input_dim), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(output_dim, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input `x`.
    pub fn backward(
        &self,
        x: ArrayView1<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        let g_col = grad_out.insert_axis(Axis(1));
        let x_row = x.insert_axis(Axis(0));
        general_mat_mul(1.0, &g_col, &x_row, 1.0, &mut grad.weight);
        grad.bias += &grad_out;
        self.weight.t().dot(&grad_out)
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor {
            name: join(prefix, "weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(Tensor {
            name: join(prefix, "bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let wshape = self.weight.shape().to_vec();
        let bshape = self.bias.shape().to_vec();
        out.push(TensorMut {
            name: join(prefix, "weight"),
            shape: wshape,
            data: self.weight.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: join(prefix, "bias"),
            shape: bshape,
            data: self.bias.as_slice_mut().expect("standard layout"),
        });
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward(pre: &Array1<f64>, grad: &Array1<f64>) -> Array1<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Inverted dropout mask: kept units are scaled by 1/(1-rate).
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Array1<f64> {
    if rate <= 0.0 {
        return Array1::ones(len);
    }
    let keep = 1.0 - rate;
    Array1::from_shape_fn(len, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Derives an independent 64-bit seed for a labelled purpose.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn seeded_rng(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
