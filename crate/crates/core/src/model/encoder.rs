use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{relu_backward, relu_inplace, Conv2d, Grads, ParamGroup, ParamStore};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `relu(conv1x1(relu(conv_kxk_strided(x))) + shortcut(x))`; the
    /// shortcut is a strided 1x1 projection when the shape changes.
    Residual,
    /// A single strided 1x1 convolution with no activation.
    Linear,
}

/// Frame encoder, pooling and embedding head sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Channel width of each stage.
    pub widths: Vec<usize>,
    pub time_strides: Vec<usize>,
    pub freq_strides: Vec<usize>,
    /// Kernel of the first convolution in each stage.
    pub kernel: usize,
    pub block: BlockKind,
    pub embedding_dim: usize,
    pub attention_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            time_strides: vec![1, 2, 2],
            freq_strides: vec![4, 2, 2],
            kernel: 3,
            block: BlockKind::Residual,
            embedding_dim: 256,
            attention_hidden: 64,
        }
    }
}

impl EncoderConfig {
    /// A single linear 1x1 stage with unit strides.
    pub fn identity_ablated(width: usize, embedding_dim: usize) -> Self {
        Self {
            widths: vec![width],
            time_strides: vec![1],
            freq_strides: vec![1],
            kernel: 1,
            block: BlockKind::Linear,
            embedding_dim,
            attention_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.time_strides.len() != n || self.freq_strides.len() != n {
            return Err(Error::config(
                "widths, time_strides and freq_strides must be non-empty and equally long",
            ));
        }
        if self.widths.iter().chain(&self.time_strides).chain(&self.freq_strides).any(|&v| v == 0) {
            return Err(Error::config("widths and strides must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding_dim must be >= 2"));
        }
        if self.attention_hidden == 0 {
            return Err(Error::config("attention_hidden must be >= 1"));
        }
        Ok(())
    }

    pub fn total_time_stride(&self) -> usize {
        self.time_strides.iter().product()
    }

    /// Frequency bins left after all stages.
    pub fn out_freq(&self, n_mels: usize) -> usize {
        self.freq_strides.iter().fold(n_mels, |f, s| f.div_ceil(*s))
    }

    /// Per-frame channel count after flattening.
    pub fn frame_channels(&self, n_mels: usize) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.out_freq(n_mels)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Residual {
        conv_a: Conv2d,
        conv_b: Conv2d,
        shortcut: Option<Conv2d>,
    },
    Linear {
        conv: Conv2d,
    },
}

#[derive(Debug, Clone)]
enum BlockTrace {
    Residual {
        in_tf: (usize, usize),
        cols_a: Array2<f64>,
        act_a: Array3<f64>,
        cols_b: Array2<f64>,
        cols_sc: Option<Array2<f64>>,
        out: Array3<f64>,
    },
    Linear {
        in_tf: (usize, usize),
        cols: Array2<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    blocks: Vec<BlockTrace>,
    out_shape: (usize, usize, usize),
}

/// Strided residual CNN over the time-frequency map, flattened per frame.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<Block>,
    n_mels: usize,
    time_stride: usize,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, n_mels: usize, ps: &mut ParamStore, rng: &mut Rng) -> Self {
        let g = ParamGroup::Embedder;
        let mut in_ch = 1;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = (cfg.time_strides[i], cfg.freq_strides[i]);
            let name = format!("encoder.stage{i}");
            let block = match cfg.block {
                BlockKind::Residual => {
                    let conv_a = Conv2d::new(ps, &format!("{name}.conv_a"), g, in_ch, w, cfg.kernel, stride, rng);
                    let conv_b = Conv2d::new(ps, &format!("{name}.conv_b"), g, w, w, 1, (1, 1), rng);
                    let shortcut = (in_ch != w || stride != (1, 1))
                        .then(|| Conv2d::new(ps, &format!("{name}.shortcut"), g, in_ch, w, 1, stride, rng));
                    Block::Residual {
                        conv_a,
                        conv_b,
                        shortcut,
                    }
                }
                BlockKind::Linear => Block::Linear {
                    conv: Conv2d::new(ps, &format!("{name}.proj"), g, in_ch, w, 1, stride, rng),
                },
            };
            blocks.push(block);
            in_ch = w;
        }
        Self {
            blocks,
            n_mels,
            time_stride: cfg.total_time_stride(),
        }
    }

    /// Returns `T' × C` frame vectors; `T' = ceil(T / total_time_stride)`.
    pub fn forward(&self, ps: &ParamStore, feats: &FeatureMatrix) -> Result<(Array2<f64>, EncoderTrace)> {
        let (t, d) = feats.frames().dim();
        if d != self.n_mels {
            return Err(Error::invalid(format!(
                "encoder expects {} bands, features have {d}",
                self.n_mels
            )));
        }
        if t < self.time_stride {
            return Err(Error::invalid(format!(
                "{t} frames is fewer than the total time stride {}",
                self.time_stride
            )));
        }
        let mut x = feats
            .frames()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((1, t, d))
            .expect("shape");
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let in_tf = (x.dim().1, x.dim().2);
            match block {
                Block::Residual {
                    conv_a,
                    conv_b,
                    shortcut,
                } => {
                    let (mut act_a, cols_a) = conv_a.forward(ps, &x);
                    relu_inplace(&mut act_a);
                    let (mut out, cols_b) = conv_b.forward(ps, &act_a);
                    let cols_sc = match shortcut {
                        Some(sc) => {
                            let (s, cols) = sc.forward(ps, &x);
                            out += &s;
                            Some(cols)
                        }
                        None => {
                            out += &x;
                            None
                        }
                    };
                    relu_inplace(&mut out);
                    x = out.clone();
                    traces.push(BlockTrace::Residual {
                        in_tf,
                        cols_a,
                        act_a,
                        cols_b,
                        cols_sc,
                        out,
                    });
                }
                Block::Linear { conv } => {
                    let (y, cols) = conv.forward(ps, &x);
                    x = y;
                    traces.push(BlockTrace::Linear { in_tf, cols });
                }
            }
        }
        let (c, tp, fp) = x.dim();
        let frames = x
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((tp, c * fp))
            .expect("shape");
        Ok((
            frames,
            EncoderTrace {
                blocks: traces,
                out_shape: (c, tp, fp),
            },
        ))
    }

    /// Accumulates encoder parameter gradients given `dL/d frames`.
    pub fn backward(&self, ps: &ParamStore, trace: &EncoderTrace, d_frames: &Array2<f64>, grads: &mut Grads) {
        let (c, tp, fp) = trace.out_shape;
        let mut d = d_frames
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((tp, c, fp))
            .expect("shape")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        for (i, (block, tr)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            // The input features are not trainable.
            let need_dx = i > 0;
            d = match (block, tr) {
                (
                    Block::Residual {
                        conv_a,
                        conv_b,
                        shortcut,
                    },
                    BlockTrace::Residual {
                        in_tf,
                        cols_a,
                        act_a,
                        cols_b,
                        cols_sc,
                        out,
                    },
                ) => {
                    let mut dz = d;
                    relu_backward(&mut dz, out);
                    let a_tf = (act_a.dim().1, act_a.dim().2);
                    let mut d_act = conv_b
                        .backward(ps, cols_b, a_tf, &dz, grads, true)
                        .expect("input grad requested");
                    relu_backward(&mut d_act, act_a);
                    let dx_a = conv_a.backward(ps, cols_a, *in_tf, &d_act, grads, need_dx);
                    let dx_sc = match (shortcut, cols_sc) {
                        (Some(sc), Some(cols)) => sc.backward(ps, cols, *in_tf, &dz, grads, need_dx),
                        _ => Some(dz),
                    };
                    match (dx_a, dx_sc) {
                        (Some(mut a), Some(b)) => {
                            a += &b;
                            a
                        }
                        _ => return,
                    }
                }
                (Block::Linear { conv }, BlockTrace::Linear { in_tf, cols }) => {
                    match conv.backward(ps, cols, *in_tf, &d, grads, need_dx) {
                        Some(dx) => dx,
                        None => return,
                    }
                }
                _ => unreachable!("trace does not match block"),
            };
        }
    }
}
