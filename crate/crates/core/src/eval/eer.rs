use crate::error::{Error, Result};

/// Scores with same-speaker flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} scores for {} targets",
                scores.len(),
                targets.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(Self { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Linear interpolation at the first sign change of `FAR − FRR` along an
/// operating-point sequence ordered by increasing threshold.
pub fn interpolate_crossing(points: &[(f64, f64, f64)]) -> Option<EerResult> {
    let k = points.iter().position(|&(_, far, frr)| far - frr <= 0.0)?;
    let (t1, far1, frr1) = points[k];
    if k == 0 {
        return Some(EerResult {
            eer: far1,
            threshold: t1,
        });
    }
    let (t0, far0, frr0) = points[k - 1];
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let a = d0 / (d0 - d1);
    Some(EerResult {
        eer: far0 + a * (far1 - far0),
        threshold: t0 + a * (t1 - t0),
    })
}

/// Equal error rate with the ROC convention: accept iff `score ≥ t`, one
/// operating point per distinct score plus a reject-all point, and linear
/// interpolation where `FAR − FRR` changes sign.
pub fn compute_eer(set: &ScoreSet) -> Result<EerResult> {
    let n_tar = set.targets.iter().filter(|&&t| t).count();
    let n_non = set.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::invalid("EER needs both target and non-target scores"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    let mut points = Vec::with_capacity(set.len() + 1);
    // Counts strictly below the current threshold.
    let mut tar_below = 0usize;
    let mut non_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = set.scores[order[i]];
        points.push((
            t,
            (n_non - non_below) as f64 / n_non as f64,
            tar_below as f64 / n_tar as f64,
        ));
        while i < order.len() && set.scores[order[i]] == t {
            if set.targets[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    let top = set.scores[order[order.len() - 1]];
    points.push((top.next_up(), 0.0, 1.0));
    Ok(interpolate_crossing(&points).expect("reject-all point always crosses"))
}
