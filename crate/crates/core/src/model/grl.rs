use ndarray::{Array, ArrayView, Dimension};

use crate::error::{Error, Result};

/// Identity on the forward pass; multiplies the upstream gradient by
/// `-scale` on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    scale: f64,
}

impl GradientReversal {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("GRL scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn forward<D: Dimension>(&self, x: ArrayView<f64, D>) -> Array<f64, D> {
        x.to_owned()
    }

    pub fn backward<D: Dimension>(&self, g: ArrayView<f64, D>) -> Array<f64, D> {
        g.mapv(|v| -self.scale * v)
    }
}

impl Default for GradientReversal {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

/// How adversarial-head gradients flow back into the embedder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling {
    Reversal(GradientReversal),
    /// Plain pass-through; the reference graph for reversal checks.
    Identity,
}

impl Coupling {
    pub fn backward<D: Dimension>(&self, g: ArrayView<f64, D>) -> Array<f64, D> {
        match self {
            Coupling::Reversal(r) => r.backward(g),
            Coupling::Identity => g.to_owned(),
        }
    }
}
