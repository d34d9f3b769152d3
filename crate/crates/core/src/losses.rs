//! Speaker loss, adversarial augmentation losses and their combination.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::NoiseCategory;
use crate::error::{Error, Result};
use crate::model::AUG_CLASSES;

/// Cosine clamp keeping `sqrt(1 - cos²)` away from zero.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::config(format!("AAM margin {} outside [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::config(format!("AAM scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Margin-penalized target cosine `cos(θ + m)` and its slope in `cos θ`.
    /// Past `θ + m > π` the curve continues as `cos θ − m·sin m`, which
    /// keeps the penalty growing with `m`.
    fn target(&self, c: f64) -> (f64, f64) {
        let m = self.margin;
        if c > (std::f64::consts::PI - m).cos() {
            let s = (1.0 - c * c).sqrt();
            (c * m.cos() - s * m.sin(), m.cos() + c * m.sin() / s)
        } else {
            (c - m * m.sin(), 1.0)
        }
    }
}

/// AAM-softmax loss with gradients for the embeddings and class weights.
#[derive(Debug, Clone)]
pub struct AamOutput {
    pub loss: f64,
    pub d_embeddings: Array2<f64>,
    pub d_weights: Array2<f64>,
}

fn check_aam(emb: &ArrayView2<f64>, labels: &[usize], weights: &ArrayView2<f64>) -> Result<()> {
    if emb.nrows() == 0 || emb.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} embeddings for {} labels",
            emb.nrows(),
            labels.len()
        )));
    }
    if emb.ncols() != weights.ncols() {
        return Err(Error::invalid(format!(
            "embedding dim {} vs class weight dim {}",
            emb.ncols(),
            weights.ncols()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= weights.nrows()) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            weights.nrows()
        )));
    }
    Ok(())
}

fn normalize_rows(x: &ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect::<Array1<f64>>();
    let mut unit = x.to_owned();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (unit, norms)
}

/// Backward through `x̂ = x / |x|` row-wise.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &mut Array2<f64>) {
    for ((mut d, u), &n) in d_unit.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let proj = d.dot(&u);
        d.scaled_add(-proj, &u);
        d /= n;
    }
}

/// Mean AAM-softmax cross-entropy; embeddings are rows of `emb`, class
/// weights are rows of `weights`.
pub fn aam_softmax(emb: ArrayView2<f64>, labels: &[usize], weights: ArrayView2<f64>, cfg: &AamConfig) -> Result<f64> {
    aam_softmax_grad(emb, labels, weights, cfg).map(|o| o.loss)
}

pub fn aam_softmax_grad(
    emb: ArrayView2<f64>,
    labels: &[usize],
    weights: ArrayView2<f64>,
    cfg: &AamConfig,
) -> Result<AamOutput> {
    cfg.validate()?;
    check_aam(&emb, labels, &weights)?;
    let (x_hat, x_norm) = normalize_rows(&emb);
    let (w_hat, w_norm) = normalize_rows(&weights);
    if x_norm.iter().chain(w_norm.iter()).any(|&n| !(n > 0.0)) {
        return Err(Error::invalid("zero-norm embedding or class weight"));
    }
    let raw = x_hat.dot(&w_hat.t());
    let b = emb.nrows();
    let k = weights.nrows();
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let mut loss = 0.0;
    let mut d_cos = Array2::zeros((b, k));
    for i in 0..b {
        let y = labels[i];
        let mut z = Array1::zeros(k);
        let mut slope_y = 0.0;
        for c in 0..k {
            let cos = raw[[i, c]].clamp(lo, hi);
            z[c] = if c == y {
                let (phi, dphi) = cfg.target(cos);
                slope_y = dphi;
                cfg.scale * phi
            } else {
                cfg.scale * cos
            };
        }
        let zmax = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        loss += lse - z[y];
        for c in 0..k {
            let mut dz = (z[c] - lse).exp();
            if c == y {
                dz -= 1.0;
            }
            let inside = raw[[i, c]] > lo && raw[[i, c]] < hi;
            let slope = if c == y { slope_y } else { 1.0 };
            d_cos[[i, c]] = if inside { dz * cfg.scale * slope / b as f64 } else { 0.0 };
        }
    }
    let mut d_x_hat = d_cos.dot(&w_hat);
    let mut d_w_hat = d_cos.t().dot(&x_hat);
    normalize_backward(&x_hat, &x_norm, &mut d_x_hat);
    normalize_backward(&w_hat, &w_norm, &mut d_w_hat);
    Ok(AamOutput {
        loss: loss / b as f64,
        d_embeddings: d_x_hat,
        d_weights: d_w_hat,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits.
pub fn adv_pair_loss(logits: &[f64], targets: &[bool]) -> Result<f64> {
    adv_pair_loss_grad(logits, targets).map(|(l, _)| l)
}

/// Loss and `dL/d logit` per pair.
pub fn adv_pair_loss_grad(logits: &[f64], targets: &[bool]) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let t = if t { 1.0 } else { 0.0 };
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((loss / n, grad))
}

/// Row of the 4-way augmentation head for a training-time category.
pub fn aug_class_index(cat: NoiseCategory) -> Result<usize> {
    if cat.is_unseen() {
        return Err(Error::invalid(format!("{cat} is not a training augmentation category")));
    }
    Ok(cat.index())
}

/// Mean softmax cross-entropy over the augmentation classes.
pub fn adv_multiclass_loss(rows: ArrayView2<f64>, labels: &[NoiseCategory]) -> Result<f64> {
    adv_multiclass_loss_grad(rows, labels).map(|(l, _)| l)
}

pub fn adv_multiclass_loss_grad(rows: ArrayView2<f64>, labels: &[NoiseCategory]) -> Result<(f64, Array2<f64>)> {
    if rows.nrows() == 0 || rows.nrows() != labels.len() || rows.ncols() != AUG_CLASSES {
        return Err(Error::invalid(format!(
            "expected {} rows of {AUG_CLASSES} logits, got {:?}",
            labels.len(),
            rows.dim()
        )));
    }
    let n = rows.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(rows.raw_dim());
    for (i, (row, &cat)) in rows.rows().into_iter().zip(labels).enumerate() {
        let y = aug_class_index(cat)?;
        let (lse, probs) = log_softmax_parts(row);
        loss += lse - row[y];
        for c in 0..AUG_CLASSES {
            grad[[i, c]] = (probs[c] - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

fn log_softmax_parts(row: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    (lse, row.mapv(|v| (v - lse).exp()))
}

/// Per-step objective terms; `l_adv` is absent when no valid pairs exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_spk: f64,
    pub l_adv: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_spk.is_finite() && self.l_adv.is_none_or(f64::is_finite) && self.total.is_finite()
    }

    /// `step l_spk l_adv total`, with `NA` for a skipped adversarial term.
    pub fn log_line(&self, step: u64) -> String {
        let adv = self.l_adv.map_or_else(|| "NA".to_string(), |v| format!("{v:.8}"));
        format!("{step} {:.8} {adv} {:.8}", self.l_spk, self.total)
    }
}

/// `total = l_spk + lambda·l_adv`.
pub fn total_loss(l_spk: f64, l_adv: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossBreakdown {
        l_spk,
        l_adv: Some(l_adv),
        lambda,
        total: l_spk + lambda * l_adv,
    })
}

/// Breakdown for a step whose pair set was degenerate.
pub fn speaker_only(l_spk: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_spk,
        l_adv: None,
        lambda,
        total: l_spk,
    }
}
