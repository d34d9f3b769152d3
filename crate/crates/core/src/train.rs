//! Training loop for the baseline, DA and A-DA systems.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NoiseCategory, SnrRange};
use crate::error::{Error, Result};
use crate::features::{Fbank, FbankConfig};
use crate::losses::{
    aam_softmax_grad, adv_multiclass_loss_grad, adv_pair_loss_grad, speaker_only, total_loss, AamConfig,
    LossBreakdown,
};
use crate::model::{load_params, Coupling, GradientReversal, Model, ModelConfig, TensorArchive};
use crate::nn::{Grads, ParamGroup, ParamStore};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::sampler::{make_pairs, sample_batch, AugPrior, AugSource, BatchSpec, PairSet, SampledBatch};
use crate::seed::{self, tag};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    /// Clean data only.
    Baseline,
    /// Augmented data, speaker loss only.
    Da,
    /// Augmented data plus the adversarial augmentation loss.
    Ada,
}

impl System {
    pub const ALL: [System; 3] = [System::Baseline, System::Da, System::Ada];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Da => "da",
            System::Ada => "ada",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(System::Baseline),
            "da" => Ok(System::Da),
            "ada" | "a-da" => Ok(System::Ada),
            _ => Err(Error::config(format!("unknown system {s:?}"))),
        }
    }
}

/// Which reading of the augmentation classifier is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    /// Binary same/different-category head over embedding pairs.
    #[default]
    Pair,
    /// Per-embedding 4-way category head.
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub system: System,
    pub steps: u64,
    /// Speakers per batch (S); one utterance each.
    pub batch_speakers: usize,
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Write `ckpt_<step>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub enabled_categories: Vec<NoiseCategory>,
    pub p_aug: f64,
    pub snr_range_db: SnrRange,
    pub crop_s: Option<f64>,
    pub aug_prior: AugPrior,
    pub aug_source: AugSource,
    pub adv_mode: AdvMode,
    pub exclude_clean_pairs: bool,
    /// Keep discriminator parameters fixed.
    pub freeze_discriminator: bool,
    pub aam: AamConfig,
    pub model: ModelConfig,
    pub fbank: FbankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: System::Ada,
            steps: 2000,
            batch_speakers: 8,
            lambda: 0.01,
            optimizer: OptimizerConfig::adam(),
            seed: 0,
            checkpoint_every: 0,
            enabled_categories: NoiseCategory::SEEN.to_vec(),
            p_aug: 0.6,
            snr_range_db: SnrRange::default(),
            crop_s: Some(1.0),
            aug_prior: AugPrior::Bernoulli,
            aug_source: AugSource::OnTheFly,
            adv_mode: AdvMode::Pair,
            exclude_clean_pairs: false,
            freeze_discriminator: false,
            aam: AamConfig::default(),
            model: ModelConfig::default(),
            fbank: FbankConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `base` specialised to `system`: the baseline never augments, DA has
    /// no adversarial term, and A-DA falls back to lambda 0.01 when `base`
    /// has none.
    pub fn for_system(base: &TrainConfig, system: System) -> Self {
        let mut cfg = base.clone();
        cfg.system = system;
        match system {
            System::Baseline => {
                cfg.p_aug = 0.0;
                cfg.lambda = 0.0;
            }
            System::Da => {
                if cfg.p_aug == 0.0 {
                    cfg.p_aug = TrainConfig::default().p_aug;
                }
                cfg.lambda = 0.0;
            }
            System::Ada => {
                if cfg.p_aug == 0.0 {
                    cfg.p_aug = TrainConfig::default().p_aug;
                }
                if cfg.lambda == 0.0 {
                    cfg.lambda = TrainConfig::default().lambda;
                }
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        match self.system {
            System::Baseline if self.p_aug != 0.0 => {
                return Err(Error::config("baseline requires p_aug = 0"));
            }
            System::Baseline | System::Da if self.lambda != 0.0 => {
                return Err(Error::config(format!("{} requires lambda = 0", self.system)));
            }
            System::Ada if !(self.lambda > 0.0) => {
                return Err(Error::config("ada requires lambda > 0"));
            }
            _ => {}
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        self.batch_spec()
            .validate()
            .map_err(|e| Error::config(e.to_string().trim_start_matches("invalid argument: ").to_string()))?;
        self.optimizer.validate()?;
        self.aam.validate()?;
        self.model.encoder.validate()?;
        self.fbank.validate(crate::corpus::DEFAULT_SAMPLE_RATE)?;
        if self.fbank.n_mels != self.model.n_mels {
            return Err(Error::config(format!(
                "fbank.n_mels {} differs from model.n_mels {}",
                self.fbank.n_mels, self.model.n_mels
            )));
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            speakers: self.batch_speakers,
            utts_per_speaker: 1,
            p_aug: self.p_aug,
            enabled_categories: self.enabled_categories.clone(),
            snr_range_db: self.snr_range_db,
            crop_s: self.crop_s,
            prior: self.aug_prior,
            source: self.aug_source,
        }
    }

    fn adversarial(&self) -> bool {
        self.system == System::Ada
    }

    /// Whether parameters of `group` are updated.
    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embedder | ParamGroup::Speaker => true,
            ParamGroup::Discriminator => {
                self.adversarial() && self.adv_mode == AdvMode::Pair && !self.freeze_discriminator
            }
            ParamGroup::AugClassifier => {
                self.adversarial() && self.adv_mode == AdvMode::Multiclass && !self.freeze_discriminator
            }
        }
    }
}

/// Running means of the logged loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub steps: u64,
    pub mean_l_spk: f64,
    pub adv_steps: u64,
    pub mean_l_adv: f64,
}

impl LossStats {
    fn record(&mut self, b: &LossBreakdown) {
        self.steps += 1;
        self.mean_l_spk += (b.l_spk - self.mean_l_spk) / self.steps as f64;
        if let Some(a) = b.l_adv {
            self.adv_steps += 1;
            self.mean_l_adv += (a - self.mean_l_adv) / self.adv_steps as f64;
        }
    }
}

/// Model, parameters, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub stats: LossStats,
}

impl TrainState {
    /// Fresh initialization for `cfg`; the class count comes from the corpus.
    pub fn new(cfg: &TrainConfig, num_speakers: usize) -> Result<Self> {
        let mut mcfg = cfg.model.clone();
        mcfg.num_speakers = num_speakers;
        let (model, params) = Model::new(&mcfg, seed::derive(&[cfg.seed, tag("init")]))?;
        let optimizer = Optimizer::new(cfg.optimizer, &params);
        Ok(Self {
            step: 0,
            model,
            params,
            optimizer,
            stats: LossStats::default(),
        })
    }

    pub fn to_archive(&self, cfg: &TrainConfig) -> TensorArchive {
        let mut meta = serde_json::Map::new();
        meta.insert("step".into(), self.step.into());
        meta.insert("optimizer_steps".into(), self.optimizer.steps_taken().into());
        meta.insert("stats".into(), serde_json::to_value(self.stats).expect("stats serialize"));
        meta.insert("train".into(), serde_json::to_value(cfg).expect("config serializes"));
        let mut ar = self.model.to_archive(&self.params, meta);
        self.optimizer.write_archive(&self.params, &mut ar);
        ar
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        self.to_archive(cfg).save(path)
    }

    /// Restores a state and the config it was trained with.
    pub fn from_archive(ar: &TensorArchive) -> Result<(Self, TrainConfig)> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        let cfg: TrainConfig = serde_json::from_value(ar.meta.get("train").cloned().ok_or_else(|| bad("no train config"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let (model, mut params) = Model::from_archive(ar)?;
        load_params(&mut params, ar, "param/")?;
        let get_u64 = |k: &str| ar.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad(k));
        let optimizer = Optimizer::read_archive(cfg.optimizer, get_u64("optimizer_steps")?, &params, ar)?;
        let stats = serde_json::from_value(ar.meta.get("stats").cloned().ok_or_else(|| bad("stats"))?)
            .map_err(|e| bad(&e.to_string()))?;
        Ok((
            Self {
                step: get_u64("step")?,
                model,
                params,
                optimizer,
                stats,
            },
            cfg,
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

/// How [`compute_gradients`] builds the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradOptions {
    /// Coupling between embeddings and the adversarial head.
    pub coupling: Coupling,
    /// Include the speaker loss; off isolates the adversarial term.
    pub speaker_term: bool,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self {
            coupling: Coupling::Reversal(GradientReversal::default()),
            speaker_term: true,
        }
    }
}

/// Loss terms and the summed parameter gradient of one batch.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub grads: Grads,
}

/// Inputs of the adversarial heads. With `normalize`, each row is rescaled
/// to norm sqrt(D): the speaker loss ignores scale, so a scale-sensitive
/// adversary could be defeated by inflating embedding norms.
fn adv_inputs(emb: &Array2<f64>, normalize: bool) -> (Array2<f64>, Option<Vec<f64>>) {
    if !normalize {
        return (emb.clone(), None);
    }
    let target = (emb.ncols() as f64).sqrt();
    let mut out = emb.clone();
    let mut norms = Vec::with_capacity(emb.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(NORM_FLOOR);
        row *= target / n;
        norms.push(n);
    }
    (out, Some(norms))
}

/// Gradient through [`adv_inputs`]; `scaled` holds its output rows.
fn adv_inputs_backward(scaled: &Array2<f64>, norms: Option<&[f64]>, mut d: Array2<f64>) -> Array2<f64> {
    let Some(norms) = norms else { return d };
    let target2 = scaled.ncols() as f64;
    for ((mut g, u), &n) in d.rows_mut().into_iter().zip(scaled.rows()).zip(norms) {
        let proj = u.dot(&g) / target2;
        g.scaled_add(-proj, &u);
        g *= target2.sqrt() / n;
    }
    d
}

const NORM_FLOOR: f64 = 1e-12;

/// Forward and backward pass of the full objective on one batch, without
/// touching the parameters.
pub fn compute_gradients(
    model: &Model,
    ps: &ParamStore,
    batch: &SampledBatch,
    pairs: &PairSet,
    cfg: &TrainConfig,
    opts: GradOptions,
) -> Result<StepGradients> {
    let coupling = opts.coupling;
    let b = batch.len();
    if b == 0 || batch.class_indices.len() != b || batch.aug_labels.len() != b {
        return Err(Error::invalid("inconsistent batch"));
    }
    let traced = batch
        .features
        .par_iter()
        .map(|f| model.embed_traced(ps, f))
        .collect::<Result<Vec<_>>>()?;
    let d = model.embedding_dim();
    let mut emb = Array2::zeros((b, d));
    for (mut row, (e, _)) in emb.rows_mut().into_iter().zip(&traced) {
        row.assign(e);
    }

    let mut grads = ps.zero_grads();
    if !emb.iter().all(|v| v.is_finite()) {
        // Overflowed forward pass; the caller's finiteness guard reports it.
        let breakdown = LossBreakdown {
            l_spk: f64::NAN,
            l_adv: None,
            lambda: cfg.lambda,
            total: f64::NAN,
        };
        return Ok(StepGradients { breakdown, grads });
    }
    let aam = aam_softmax_grad(emb.view(), &batch.class_indices, ps.get(model.class_weights()).view(), &cfg.aam)?;
    let mut d_emb = if opts.speaker_term {
        *grads.get_mut(model.class_weights()) += &aam.d_weights;
        aam.d_embeddings
    } else {
        Array2::zeros((b, d))
    };

    let breakdown = if cfg.adversarial() {
        let (emb, norms) = adv_inputs(&emb, cfg.model.discriminator.normalize_input);
        let mut d_adv = Array2::zeros((b, d));
        let breakdown = match cfg.adv_mode {
            AdvMode::Pair if !pairs.degenerate && !pairs.is_empty() => {
                let disc = model.discriminator();
                let mut logits = Vec::with_capacity(pairs.len());
                let mut traces = Vec::with_capacity(pairs.len());
                for &(i, j) in &pairs.pairs {
                    if j >= b {
                        return Err(Error::invalid(format!("pair ({i}, {j}) outside batch of {b}")));
                    }
                    let (z, tr) = disc.forward(ps, emb.row(i), emb.row(j))?;
                    logits.push(z);
                    traces.push(tr);
                }
                let (l_adv, dz) = adv_pair_loss_grad(&logits, &pairs.targets)?;
                for (k, &(i, j)) in pairs.pairs.iter().enumerate() {
                    let (da, db) = disc.backward(ps, &traces[k], cfg.lambda * dz[k], &mut grads);
                    d_adv.row_mut(i).scaled_add(1.0, &da);
                    d_adv.row_mut(j).scaled_add(1.0, &db);
                }
                total_loss(aam.loss, l_adv, cfg.lambda)?
            }
            AdvMode::Pair => speaker_only(aam.loss, cfg.lambda),
            AdvMode::Multiclass => {
                let head = model.aug_head();
                let rows = head.forward(ps, emb.view());
                let (l_adv, d_rows) = adv_multiclass_loss_grad(rows.view(), &batch.aug_labels)?;
                let d_rows = d_rows * cfg.lambda;
                let d_in = head.backward(ps, emb.view(), d_rows.view(), &mut grads);
                d_adv += &d_in;
                total_loss(aam.loss, l_adv, cfg.lambda)?
            }
        };
        let d_adv = adv_inputs_backward(&emb, norms.as_deref(), d_adv);
        for (mut row, g) in d_emb.rows_mut().into_iter().zip(d_adv.rows()) {
            row += &coupling.backward(g);
        }
        breakdown
    } else {
        speaker_only(aam.loss, cfg.lambda)
    };

    let partial: Vec<Grads> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut g = ps.zero_grads();
            model.backward_embed(ps, &traced[i].1, d_emb.row(i), &mut g);
            g
        })
        .collect();
    // Fixed summation order keeps results independent of the thread count.
    for g in &partial {
        grads.add_assign(g);
    }
    Ok(StepGradients { breakdown, grads })
}

/// One optimizer update on `batch`; advances the step counter.
pub fn train_step(state: &mut TrainState, batch: &SampledBatch, pairs: &PairSet, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let bad: Vec<&str> = state
        .params
        .params()
        .iter()
        .filter(|p| !p.value.iter().all(|v| v.is_finite()))
        .map(|p| p.name.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Error::NumericAbort {
            step: state.step,
            detail: format!("l_spk=NaN l_adv=NaN total=NaN non_finite_params={}", bad.join(",")),
        });
    }
    let sg = compute_gradients(&state.model, &state.params, batch, pairs, cfg, GradOptions::default())?;
    if !sg.breakdown.is_finite() || !sg.grads.is_finite() {
        return Err(Error::NumericAbort {
            step: state.step,
            detail: format!(
                "l_spk={} l_adv={:?} total={} finite_grads={}",
                sg.breakdown.l_spk,
                sg.breakdown.l_adv,
                sg.breakdown.total,
                sg.grads.is_finite()
            ),
        });
    }
    let groups: Vec<bool> = state.params.params().iter().map(|p| cfg.trains(p.group)).collect();
    state.optimizer.step(&mut state.params, &sg.grads, |i| groups[i]);
    state.step += 1;
    state.stats.record(&sg.breakdown);
    Ok(sg.breakdown)
}

/// Batch and pair set of a given step.
pub fn step_inputs(corpus: &Corpus, cfg: &TrainConfig, fbank: &Fbank, step: u64) -> Result<(SampledBatch, PairSet)> {
    let batch = sample_batch(corpus, &cfg.batch_spec(), fbank, cfg.seed, step)?;
    let pairs = make_pairs(&batch.aug_labels, seed::derive(&[cfg.seed, tag("pairs"), step]), cfg.exclude_clean_pairs)?;
    Ok((batch, pairs))
}

/// Trains from scratch for `cfg.steps` steps. With `out_dir`, the loss log
/// and checkpoints are written there.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    let state = TrainState::new(cfg, corpus.class_count())?;
    train_from(state, cfg, corpus, out_dir)
}

/// Continues `state` up to `cfg.steps`; the log is appended to when the
/// state is not fresh.
pub fn train_from(mut state: TrainState, cfg: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    if corpus.class_count() < cfg.batch_speakers {
        return Err(Error::invalid(format!(
            "corpus has {} training speakers, batch needs {}",
            corpus.class_count(),
            cfg.batch_speakers
        )));
    }
    let fbank = Fbank::new(&cfg.fbank, corpus.config().sample_rate_hz)?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            let file = if state.step == 0 {
                File::create(&path)
            } else {
                std::fs::OpenOptions::new().append(true).create(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if state.step == 0 {
                writeln!(w, "step l_spk l_adv total").map_err(|e| Error::io(&path, e))?;
            }
            Some((w, path))
        }
        None => None,
    };
    while state.step < cfg.steps {
        let step = state.step;
        let (batch, pairs) = step_inputs(corpus, cfg, &fbank, step)?;
        let b = train_step(&mut state, &batch, &pairs, cfg)?;
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", b.log_line(step)).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                state.save(cfg, &dir.join(format!("ckpt_{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        state.save(cfg, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(state)
}
