use ndarray::{concatenate, s, Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, ParamGroup, ParamStore};
use crate::seed::Rng;

/// Symmetric pair feature `|a − b| ⊕ (a ⊙ b)`.
pub fn pair_feature(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diff = (&a - &b).mapv(f64::abs);
    let prod = &a * &b;
    Ok(concatenate![Axis(0), diff, prod])
}

/// Predicts whether two embeddings share an augmentation category.
#[derive(Debug, Clone)]
pub struct Discriminator {
    hidden: Linear,
    out: Linear,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct PairTrace {
    a: Array1<f64>,
    b: Array1<f64>,
    feat: Array1<f64>,
    hidden: Array1<f64>,
}

impl Discriminator {
    pub fn new(dim: usize, hidden: usize, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        let g = ParamGroup::Discriminator;
        let h = Linear::new(ps, "disc.hidden", g, 2 * dim, hidden, (2.0 / (2 * dim) as f64).sqrt(), rng);
        let out = Linear::new(ps, "disc.out", g, hidden, 1, (1.0 / hidden as f64).sqrt(), rng);
        Self { hidden: h, out, dim }
    }

    pub fn input_width(&self) -> usize {
        2 * self.dim
    }

    pub fn logit(&self, ps: &ParamStore, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        self.forward(ps, a, b).map(|(z, _)| z)
    }

    pub fn forward(&self, ps: &ParamStore, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, PairTrace)> {
        if a.len() != self.dim {
            return Err(Error::invalid(format!(
                "discriminator expects dim {}, got {}",
                self.dim,
                a.len()
            )));
        }
        let feat = pair_feature(a, b)?;
        let mut hidden = self.hidden.forward_vec(ps, feat.view());
        hidden.mapv_inplace(|v| v.max(0.0));
        let z = self.out.forward_vec(ps, hidden.view())[0];
        Ok((
            z,
            PairTrace {
                a: a.to_owned(),
                b: b.to_owned(),
                feat,
                hidden,
            },
        ))
    }

    /// Accumulates discriminator gradients; returns `(dL/da, dL/db)`.
    pub fn backward(&self, ps: &ParamStore, tr: &PairTrace, d_logit: f64, grads: &mut Grads) -> (Array1<f64>, Array1<f64>) {
        let dz = Array1::from_elem(1, d_logit);
        let mut dh = self.out.backward_vec(ps, tr.hidden.view(), dz.view(), grads);
        dh.zip_mut_with(&tr.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        let df = self.hidden.backward_vec(ps, tr.feat.view(), dh.view(), grads);
        let d_abs = df.slice(s![..self.dim]);
        let d_prod = df.slice(s![self.dim..]);
        let mut da = Array1::zeros(self.dim);
        let mut db = Array1::zeros(self.dim);
        for k in 0..self.dim {
            let diff = tr.a[k] - tr.b[k];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            da[k] = d_abs[k] * sign + d_prod[k] * tr.b[k];
            db[k] = -d_abs[k] * sign + d_prod[k] * tr.a[k];
        }
        (da, db)
    }
}
