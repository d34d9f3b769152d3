use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::corpus::NoiseCategory;
use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_SPLITS: usize = 3;
pub const PROBE_TRAIN_FRACTION: f64 = 0.7;

/// Held-out accuracy of a multinomial logistic regression predicting the
/// augmentation category from frozen embeddings, averaged over seeded
/// stratified 70/30 splits of a class-balanced subsample.
pub fn residual_probe(embeddings: &[Array1<f64>], labels: &[NoiseCategory], seed: u64) -> Result<f64> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::invalid(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::invalid("embeddings differ in dimension"));
    }
    let mut classes: Vec<NoiseCategory> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("probe needs at least 2 categories"));
    }
    let mut rng = seed::rng(&[seed, tag("probe")]);
    let mut by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
        .collect();
    let per_class = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if per_class < 2 {
        return Err(Error::invalid("probe needs at least 2 samples per category"));
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        idx.truncate(per_class);
    }
    let n_train = ((per_class as f64 * PROBE_TRAIN_FRACTION).floor() as usize).clamp(1, per_class - 1);

    let mut total = 0.0;
    for _ in 0..PROBE_SPLITS {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (k, idx) in by_class.iter_mut().enumerate() {
            idx.shuffle(&mut rng);
            train.extend(idx[..n_train].iter().map(|&i| (i, k)));
            test.extend(idx[n_train..].iter().map(|&i| (i, k)));
        }
        total += fit_and_score(embeddings, &train, &test, classes.len());
    }
    Ok(total / PROBE_SPLITS as f64)
}

fn stack(embeddings: &[Array1<f64>], rows: &[(usize, usize)]) -> Array2<f64> {
    let dim = embeddings[0].len();
    let mut x = Array2::zeros((rows.len(), dim));
    for (mut r, &(i, _)) in x.rows_mut().into_iter().zip(rows) {
        r.assign(&embeddings[i]);
    }
    x
}

fn fit_and_score(embeddings: &[Array1<f64>], train: &[(usize, usize)], test: &[(usize, usize)], k: usize) -> f64 {
    let mut x = stack(embeddings, train);
    let mut xt = stack(embeddings, test);
    // Standardize with training statistics.
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    for m in [&mut x, &mut xt] {
        *m -= &mean;
        *m /= &std;
    }
    let n = x.nrows() as f64;
    let mut onehot = Array2::<f64>::zeros((x.nrows(), k));
    for (r, &(_, c)) in train.iter().enumerate() {
        onehot[[r, c]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((x.ncols(), k));
    let mut b = Array1::<f64>::zeros(k);
    for _ in 0..PROBE_ITERATIONS {
        let mut p = x.dot(&w) + &b;
        softmax_rows(&mut p);
        let d = (p - &onehot) / n;
        let gw = x.t().dot(&d) + &(&w * PROBE_L2);
        let gb = d.sum_axis(Axis(0));
        w.scaled_add(-PROBE_LR, &gw);
        b.scaled_add(-PROBE_LR, &gb);
    }
    let logits = xt.dot(&w) + &b;
    let correct = logits
        .rows()
        .into_iter()
        .zip(test)
        .filter(|(row, &(_, c))| {
            let best = (0..k).fold(0, |bi, j| if row[j] > row[bi] { j } else { bi });
            best == c
        })
        .count();
    correct as f64 / test.len() as f64
}

fn softmax_rows(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}
