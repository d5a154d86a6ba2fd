//! Trainable linear projections with per-projection freeze control.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Linear, Params, Tensor, TensorMut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionName {
    VisualProj,
    TextualProj,
    PhiProj,
}

impl ProjectionName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::VisualProj => "visual_proj",
            Self::TextualProj => "textual_proj",
            Self::PhiProj => "phi_proj",
        }
    }
}

impl fmt::Display for ProjectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Ones on the leading diagonal, zero elsewhere; the exact identity when square.
    IdentityPadded,
    /// Entries from U(-1/sqrt(p_in), 1/sqrt(p_in)).
    SeededUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub name: ProjectionName,
    pub linear: Linear,
    pub frozen: bool,
}

pub fn init_projection(
    name: ProjectionName,
    p_in: usize,
    p_out: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<ProjectionParams> {
    if p_in == 0 || p_out == 0 {
        return Err(Error::arg(format!(
            "{name} dimensions must be positive (got {p_in} -> {p_out})"
        )));
    }
    let linear = match scheme {
        InitScheme::IdentityPadded => {
            let mut l = Linear::zeros(p_in, p_out);
            for k in 0..p_in.min(p_out) {
                l.weight[[k, k]] = 1.0;
            }
            l
        }
        InitScheme::SeededUniform => {
            let mut rng = seeded_rng(seed, name.as_str());
            Linear::uniform(p_in, p_out, &mut rng)
        }
    };
    Ok(ProjectionParams {
        name,
        linear,
        frozen: false,
    })
}

impl ProjectionParams {
    pub fn p_in(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn p_out(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.p_in() {
            return Err(Error::shape(format!(
                "{} expects input length {}, got {}",
                self.name,
                self.p_in(),
                x.len()
            )));
        }
        Ok(self.linear.forward(x))
    }

    pub fn set_frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            name: self.name,
            linear: self.linear.zeros_like(),
            frozen: self.frozen,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors("").iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl Params for ProjectionParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.linear.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.linear.collect_mut(prefix, out);
    }
}
