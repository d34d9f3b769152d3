//! Verification trials, cosine scoring, EER and the augmentation-residual probe.

mod eer;
mod probe;
mod trials;

pub use eer::{compute_eer, interpolate_crossing, EerResult, ScoreSet};
pub use probe::{residual_probe, PROBE_ITERATIONS, PROBE_L2, PROBE_LR, PROBE_SPLITS, PROBE_TRAIN_FRACTION};
pub use trials::{build_trials, trial_pairs, Condition, Trial, TrialConfig, TrialSet};

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NoiseCategory, SnrRange, Split, Waveform};
use crate::error::{Error, Result};
use crate::features::{Fbank, FbankConfig};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::seed::{self, tag};

/// Cosine similarity of two non-zero vectors.
pub fn cosine_score(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("dims differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::invalid("cosine score of a zero vector"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trials: TrialConfig,
    pub fbank: FbankConfig,
    /// SNR range of the probe's corrupted copies.
    pub probe_snr_db: SnrRange,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: TrialConfig::default(),
            fbank: FbankConfig::default(),
            probe_snr_db: SnrRange::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_trials: usize,
}

/// Condition name → result, in the requested order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(Condition, ConditionResult)>,
}

impl EvalReport {
    pub fn get(&self, c: Condition) -> Option<&ConditionResult> {
        self.rows.iter().find(|(k, _)| *k == c).map(|(_, r)| r)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (c, r) in &self.rows {
            m.insert(c.as_str().to_string(), serde_json::to_value(r).expect("serializes"));
        }
        serde_json::Value::Object(m)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::format("report", "expected an object"))?;
        let mut rows = Vec::new();
        for (k, r) in obj {
            let c: Condition = k.parse().map_err(|_| Error::format("report", format!("condition {k}")))?;
            let r: ConditionResult =
                serde_json::from_value(r.clone()).map_err(|e| Error::format("report", e.to_string()))?;
            rows.push((c, r));
        }
        Ok(Self { rows })
    }
}

/// Trials of one condition with their scores.
#[derive(Debug, Clone)]
pub struct ScoredTrials {
    pub set: TrialSet,
    pub scores: Vec<f64>,
}

impl ScoredTrials {
    /// `enroll_utt test_utt score` per line.
    pub fn scores_text(&self) -> String {
        let mut s = String::new();
        for (t, sc) in self.set.trials.iter().zip(&self.scores) {
            s.push_str(&format!("{} {} {}\n", t.enroll_utt, t.test_utt, sc));
        }
        s
    }
}

/// Embeds audio with fixed parameters, caching clean held-out utterances.
pub struct Embedder<'a> {
    model: &'a Model,
    params: &'a ParamStore,
    fbank: Fbank,
    clean: BTreeMap<usize, Array1<f64>>,
}

impl<'a> Embedder<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore, fbank: &FbankConfig, sample_rate_hz: u32) -> Result<Self> {
        Ok(Self {
            model,
            params,
            fbank: Fbank::new(fbank, sample_rate_hz)?,
            clean: BTreeMap::new(),
        })
    }

    pub fn embed(&self, w: &Waveform) -> Result<Array1<f64>> {
        let f = self.fbank.compute(w)?;
        Ok(self.model.embed(self.params, &f)?.into_vector())
    }

    /// Embeddings of the given clean corpus entries, computed once.
    pub fn cache_clean(&mut self, corpus: &Corpus, entries: &[usize]) -> Result<()> {
        let mut todo: Vec<usize> = entries.iter().copied().filter(|i| !self.clean.contains_key(i)).collect();
        todo.sort_unstable();
        todo.dedup();
        let this = &*self;
        let done = todo
            .par_iter()
            .map(|&i| this.embed(&corpus.entry(i).utterance.waveform))
            .collect::<Result<Vec<_>>>()?;
        self.clean.extend(todo.into_iter().zip(done));
        Ok(())
    }

    fn side(&self, entry: usize, audio: &Option<Waveform>) -> Result<Array1<f64>> {
        match audio {
            Some(w) => self.embed(w),
            None => Ok(self.clean[&entry].clone()),
        }
    }

    pub fn score(&mut self, corpus: &Corpus, set: &TrialSet) -> Result<Vec<f64>> {
        let needed: Vec<usize> = set.enroll_entries.iter().chain(&set.test_entries).copied().collect();
        self.cache_clean(corpus, &needed)?;
        let this = &*self;
        (0..set.len())
            .into_par_iter()
            .map(|k| {
                let e = this.side(set.enroll_entries[k], &set.enroll_audio[k])?;
                let t = this.side(set.test_entries[k], &set.test_audio[k])?;
                cosine_score(e.view(), t.view())
            })
            .collect()
    }
}

/// EER per condition on shared trial pairs.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    corpus: &Corpus,
    conditions: &[Condition],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<ScoredTrials>)> {
    if conditions.is_empty() {
        return Err(Error::invalid("no conditions requested"));
    }
    let mut embedder = Embedder::new(model, params, &cfg.fbank, corpus.config().sample_rate_hz)?;
    let mut report = EvalReport::default();
    let mut scored = Vec::new();
    for &c in conditions {
        let set = build_trials(corpus, &cfg.trials, c, seed)?;
        let scores = embedder.score(corpus, &set)?;
        let targets = set.trials.iter().map(|t| t.target).collect();
        let r = compute_eer(&ScoreSet::new(scores.clone(), targets)?)?;
        report.rows.push((
            c,
            ConditionResult {
                eer: r.eer,
                threshold: r.threshold,
                n_trials: set.len(),
            },
        ));
        scored.push(ScoredTrials { set, scores });
    }
    Ok((report, scored))
}

/// Embeddings of every held-out utterance under each of CLEAN, NOISE,
/// MUSIC and SPEECH, labelled by category.
pub fn probe_embeddings(
    model: &Model,
    params: &ParamStore,
    corpus: &Corpus,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Vec<Array1<f64>>, Vec<NoiseCategory>)> {
    let embedder = Embedder::new(model, params, &cfg.fbank, corpus.config().sample_rate_hz)?;
    let cats = [
        NoiseCategory::Clean,
        NoiseCategory::Noise,
        NoiseCategory::Music,
        NoiseCategory::Speech,
    ];
    let jobs: Vec<(usize, NoiseCategory)> = corpus
        .split(Split::Trial)
        .filter(|(_, e)| e.utterance.aug_label == NoiseCategory::Clean)
        .flat_map(|(i, _)| cats.iter().map(move |&c| (i, c)))
        .collect();
    let embs = jobs
        .par_iter()
        .map(|&(i, c)| {
            let clean = &corpus.entry(i).utterance.waveform;
            if c == NoiseCategory::Clean {
                return embedder.embed(clean);
            }
            let mut rng = seed::rng(&[seed, tag("probe-audio"), i as u64, c.index() as u64]);
            let (w, _) = corpus.eval_noise().augment(clean, c, cfg.probe_snr_db, &mut rng)?;
            embedder.embed(&w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((embs, jobs.into_iter().map(|(_, c)| c).collect()))
}

/// Probe accuracy of a trained model on held-out corrupted copies.
pub fn probe_model(model: &Model, params: &ParamStore, corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    let (e, l) = probe_embeddings(model, params, corpus, cfg, seed)?;
    residual_probe(&e, &l, seed)
}
