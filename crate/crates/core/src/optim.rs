use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TensorArchive;
use crate::nn::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam or momentum SGD over a [`ParamStore`], with per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, ps: &ParamStore) -> Self {
        let zeros = || ps.params().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect::<Vec<_>>();
        let second = match cfg {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            cfg,
            t: 0,
            first: zeros(),
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter whose `active` flag is set; the others and
    /// their state are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads, active: impl Fn(usize) -> bool) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (i, p) in ps.params_mut().iter_mut().enumerate() {
                    if !active(i) {
                        continue;
                    }
                    let g = &grads.values()[i];
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    ndarray::Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                        let g = g + weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for (i, p) in ps.params_mut().iter_mut().enumerate() {
                    if !active(i) {
                        continue;
                    }
                    let g = &grads.values()[i];
                    let vel = &mut self.first[i];
                    ndarray::Zip::from(&mut p.value).and(g).and(vel).for_each(|w, &g, u| {
                        *u = momentum * *u + g + weight_decay * *w;
                        *w -= lr * *u;
                    });
                }
            }
        }
    }

    pub fn write_archive(&self, ps: &ParamStore, ar: &mut TensorArchive) {
        for (p, m) in ps.params().iter().zip(&self.first) {
            ar.push(format!("opt.first/{}", p.name), m.clone());
        }
        for (p, v) in ps.params().iter().zip(&self.second) {
            ar.push(format!("opt.second/{}", p.name), v.clone());
        }
    }

    pub fn read_archive(cfg: OptimizerConfig, t: u64, ps: &ParamStore, ar: &TensorArchive) -> Result<Self> {
        let mut opt = Self::new(cfg, ps);
        opt.t = t;
        let fetch = |prefix: &str, name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let v = ar
                .get(&format!("{prefix}/{name}"))
                .ok_or_else(|| Error::format("checkpoint", format!("missing {prefix}/{name}")))?;
            if v.dim() != shape {
                return Err(Error::format("checkpoint", format!("bad shape for {prefix}/{name}")));
            }
            Ok(v.clone())
        };
        for (i, p) in ps.params().iter().enumerate() {
            opt.first[i] = fetch("opt.first", &p.name, p.value.dim())?;
            if !opt.second.is_empty() {
                opt.second[i] = fetch("opt.second", &p.name, p.value.dim())?;
            }
        }
        Ok(opt)
    }
}
