use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use crate::nn::{Grads, Linear, ParamGroup, ParamStore};
use crate::seed::Rng;

/// Variance floor inside the square root of the pooled std.
pub const ASP_EPS: f64 = 1e-6;

/// Attentive statistics pooling: a tanh MLP scores each frame, a softmax
/// over time turns scores into weights, and the output is the weighted
/// mean concatenated with the weighted standard deviation.
#[derive(Debug, Clone)]
pub struct Asp {
    attn: Linear,
    score: Linear,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct AspTrace {
    h: Array2<f64>,
    a: Array2<f64>,
    w: Array1<f64>,
    mu: Array1<f64>,
    sigma: Array1<f64>,
    var: Array1<f64>,
}

impl Asp {
    pub fn new(channels: usize, hidden: usize, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        let g = ParamGroup::Embedder;
        let attn = Linear::new(ps, "asp.attn", g, channels, hidden, (1.0 / channels as f64).sqrt(), rng);
        let score = Linear::new(ps, "asp.score", g, hidden, 1, (1.0 / hidden as f64).sqrt(), rng);
        Self {
            attn,
            score,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Zeroes the attention MLP, which makes the weights uniform.
    pub fn zero_attention(&self, ps: &mut ParamStore) {
        for id in [self.attn.weight, self.attn.bias, self.score.weight, self.score.bias] {
            ps.get_mut(id).fill(0.0);
        }
    }

    /// `h` is `T' × C`; returns `μ ⊕ σ` of length `2C`.
    pub fn forward(&self, ps: &ParamStore, h: &Array2<f64>) -> (Array1<f64>, AspTrace) {
        let mut a = self.attn.forward(ps, h.view());
        a.mapv_inplace(f64::tanh);
        let e = self.score.forward(ps, a.view()).column(0).to_owned();
        let m = e.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let u = e.mapv(|v| (v - m).exp());
        let z = u.sum();
        // Accumulate unnormalized sums in time order and divide once, so
        // equal logits give exactly the plain frame mean.
        let c = h.ncols();
        let mut mu = Array1::zeros(c);
        let mut ex2 = Array1::zeros(c);
        for (row, &ut) in h.outer_iter().zip(u.iter()) {
            ndarray::Zip::from(&mut mu).and(&mut ex2).and(&row).for_each(|m, s, &hv| {
                *m += ut * hv;
                *s += ut * (hv * hv);
            });
        }
        mu /= z;
        ex2 /= z;
        let w = u / z;
        let var = &ex2 - &mu.mapv(|v| v * v);
        let sigma = var.mapv(|v| v.max(ASP_EPS).sqrt());
        let out = concatenate![Axis(0), mu, sigma];
        (
            out,
            AspTrace {
                h: h.clone(),
                a,
                w,
                mu,
                sigma,
                var,
            },
        )
    }

    /// Accumulates attention gradients; returns `dL/dh`.
    pub fn backward(&self, ps: &ParamStore, tr: &AspTrace, d_out: ArrayView1<f64>, grads: &mut Grads) -> Array2<f64> {
        let c = self.channels;
        let d_mu = d_out.slice(s![..c]);
        let d_sigma = d_out.slice(s![c..]);
        // σ = sqrt(max(var, ε)); the clamp has zero slope below ε.
        let d_var = ndarray::Zip::from(&d_sigma)
            .and(&tr.var)
            .and(&tr.sigma)
            .map_collect(|&g, &v, &s| if v > ASP_EPS { g / (2.0 * s) } else { 0.0 });
        // var = Σ w h² − μ², so μ also receives −2μ·d_var.
        let d_mu_total = &d_mu - &(&tr.mu * &d_var * 2.0);

        let h = &tr.h;
        let mut dh = Array2::zeros(h.raw_dim());
        let mut dw = Array1::zeros(tr.w.len());
        for (t, (hrow, mut drow)) in h.outer_iter().zip(dh.outer_iter_mut()).enumerate() {
            let wt = tr.w[t];
            let mut acc = 0.0;
            for k in 0..c {
                let hv = hrow[k];
                drow[k] = wt * (d_mu_total[k] + 2.0 * hv * d_var[k]);
                acc += hv * d_mu_total[k] + hv * hv * d_var[k];
            }
            dw[t] = acc;
        }
        let wdw = tr.w.dot(&dw);
        let de = &tr.w * &(&dw - wdw);
        let de2 = de.insert_axis(Axis(1));
        let mut da = self.score.backward(ps, tr.a.view(), de2.view(), grads);
        da.zip_mut_with(&tr.a, |g, &av| *g *= 1.0 - av * av);
        dh += &self.attn.backward(ps, h.view(), da.view(), grads);
        dh
    }
}
