//! Embedding extractor, gradient reversal and augmentation heads.

mod archive;
mod asp;
mod discriminator;
mod encoder;
mod grl;

pub use archive::{TensorArchive, TensorEntry};
pub use asp::{Asp, AspTrace, ASP_EPS};
pub use discriminator::{pair_feature, Discriminator, PairTrace};
pub use encoder::{BlockKind, Encoder, EncoderConfig, EncoderTrace};
pub use grl::{Coupling, GradientReversal};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{normal_init, Grads, Linear, ParamGroup, ParamId, ParamStore};
use crate::seed::{self, Rng};

/// Number of classes of the per-embedding augmentation head.
pub const AUG_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    /// Rescale embeddings to norm sqrt(D) before the adversarial heads.
    pub normalize_input: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            normalize_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub encoder: EncoderConfig,
    pub discriminator: DiscriminatorConfig,
    /// Rows of the AAM class-weight matrix; set from the training corpus.
    pub num_speakers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            encoder: EncoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            num_speakers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be >= 1"));
        }
        if self.discriminator.hidden == 0 {
            return Err(Error::config("discriminator.hidden must be >= 1"));
        }
        if self.num_speakers == 0 {
            return Err(Error::config("num_speakers must be >= 1"));
        }
        Ok(())
    }
}

/// A speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Array1<f64>,
}

impl Embedding {
    pub fn new(vector: Array1<f64>) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding must be non-empty and finite"));
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn into_vector(self) -> Array1<f64> {
        self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Everything the embedding backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    enc: EncoderTrace,
    frames: Array2<f64>,
    asp: AspTrace,
    pooled: Array1<f64>,
}

impl EmbedTrace {
    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }
}

/// Network architecture; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    asp: Asp,
    head: Linear,
    class_weights: ParamId,
    discriminator: Discriminator,
    aug_head: Linear,
}

impl Model {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng: Rng = seed::rng(&[seed, seed::tag("model-init")]);
        let mut ps = ParamStore::new();
        let enc = &cfg.encoder;
        let encoder = Encoder::new(enc, cfg.n_mels, &mut ps, &mut rng);
        let c = enc.frame_channels(cfg.n_mels);
        let asp = Asp::new(c, enc.attention_hidden, &mut ps, &mut rng);
        let d = enc.embedding_dim;
        let head = Linear::new(&mut ps, "embed.head", ParamGroup::Embedder, 2 * c, d, (1.0 / (2 * c) as f64).sqrt(), &mut rng);
        let class_weights = ps.add(
            "aam.class_weights",
            ParamGroup::Speaker,
            normal_init(&mut rng, cfg.num_speakers, d, (1.0 / d as f64).sqrt()),
        );
        let discriminator = Discriminator::new(d, cfg.discriminator.hidden, &mut ps, &mut rng);
        let aug_head = Linear::new(&mut ps, "aug.head", ParamGroup::AugClassifier, d, AUG_CLASSES, (1.0 / d as f64).sqrt(), &mut rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                asp,
                head,
                class_weights,
                discriminator,
                aug_head,
            },
            ps,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn asp(&self) -> &Asp {
        &self.asp
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn class_weights(&self) -> ParamId {
        self.class_weights
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn aug_head(&self) -> &Linear {
        &self.aug_head
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.encoder.embedding_dim
    }

    pub fn encode_frames(&self, ps: &ParamStore, feats: &FeatureMatrix) -> Result<Array2<f64>> {
        self.encoder.forward(ps, feats).map(|(f, _)| f)
    }

    pub fn embed(&self, ps: &ParamStore, feats: &FeatureMatrix) -> Result<Embedding> {
        let (v, _) = self.embed_traced(ps, feats)?;
        Embedding::new(v)
    }

    pub fn embed_traced(&self, ps: &ParamStore, feats: &FeatureMatrix) -> Result<(Array1<f64>, EmbedTrace)> {
        let (frames, enc) = self.encoder.forward(ps, feats)?;
        let (pooled, asp) = self.asp.forward(ps, &frames);
        let e = self.head.forward_vec(ps, pooled.view());
        Ok((
            e,
            EmbedTrace {
                enc,
                frames,
                asp,
                pooled,
            },
        ))
    }

    /// Accumulates embedder gradients given `dL/d embedding`.
    pub fn backward_embed(&self, ps: &ParamStore, tr: &EmbedTrace, d_emb: ArrayView1<f64>, grads: &mut Grads) {
        let d_pooled = self.head.backward_vec(ps, tr.pooled.view(), d_emb, grads);
        let d_frames = self.asp.backward(ps, &tr.asp, d_pooled.view(), grads);
        self.encoder.backward(ps, &tr.enc, &d_frames, grads);
    }

    pub fn aug_logits(&self, ps: &ParamStore, e: ArrayView1<f64>) -> Array1<f64> {
        self.aug_head.forward_vec(ps, e)
    }

    /// Serializes the architecture config and all parameters.
    pub fn to_archive(&self, ps: &ParamStore, mut meta: serde_json::Map<String, serde_json::Value>) -> TensorArchive {
        meta.insert("model".into(), serde_json::to_value(&self.cfg).expect("config serializes"));
        let mut ar = TensorArchive::new(serde_json::Value::Object(meta));
        for p in ps.params() {
            ar.push(format!("param/{}", p.name), p.value.clone());
        }
        ar
    }

    /// Rebuilds model and parameters from an archive written by
    /// [`Model::to_archive`].
    pub fn from_archive(ar: &TensorArchive) -> Result<(Self, ParamStore)> {
        let cfg: ModelConfig = serde_json::from_value(
            ar.meta.get("model").cloned().ok_or_else(|| Error::format("checkpoint", "no model config"))?,
        )
        .map_err(|e| Error::format("checkpoint", format!("model config: {e}")))?;
        let (model, mut ps) = Self::new(&cfg, 0)?;
        load_params(&mut ps, ar, "param/")?;
        Ok((model, ps))
    }
}

/// Overwrites every parameter in `ps` from `ar` entries named `prefix + name`.
pub fn load_params(ps: &mut ParamStore, ar: &TensorArchive, prefix: &str) -> Result<()> {
    let stored = ar.with_prefix(prefix).count();
    if stored != ps.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{stored} tensors under {prefix:?}, model has {}", ps.len()),
        ));
    }
    for p in ps.params_mut() {
        let v = ar
            .get(&format!("{prefix}{}", p.name))
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", p.name)))?;
        if v.dim() != p.value.dim() {
            return Err(Error::format(
                "checkpoint",
                format!("shape mismatch for {}: {:?} vs {:?}", p.name, v.dim(), p.value.dim()),
            ));
        }
        p.value.assign(v);
    }
    Ok(())
}

/// Plain mean ⊕ population-std pooling over frames, with the same ε floor.
pub fn stats_pool(frames: &Array2<f64>) -> Array1<f64> {
    let mu = frames.mean_axis(Axis(0)).expect("at least one frame");
    let ex2 = frames.mapv(|v| v * v).mean_axis(Axis(0)).expect("at least one frame");
    let sigma = (&ex2 - &mu.mapv(|v| v * v)).mapv(|v| v.max(ASP_EPS).sqrt());
    ndarray::concatenate![Axis(0), mu, sigma]
}
