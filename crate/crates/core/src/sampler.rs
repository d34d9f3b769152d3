//! Speaker-balanced batch sampling with random augmentation, and the
//! same/different-augmentation pair set for the adversarial loss.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NoiseCategory, SnrRange, Waveform};
use crate::error::{Error, Result};
use crate::features::{Fbank, FeatureMatrix};
use crate::seed::{self, tag};

/// How the augmented fraction of a batch is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugPrior {
    /// Independent Bernoulli(p_aug) per utterance.
    #[default]
    Bernoulli,
    /// Exactly `round(p_aug · batch)` augmented utterances per batch.
    Quota,
}

/// Where augmented audio comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugSource {
    /// Fresh mix from the training noise bank at every draw.
    #[default]
    OnTheFly,
    /// Pre-augmented copies stored in the corpus.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    /// Speakers per batch (S).
    pub speakers: usize,
    /// Utterances per speaker (N).
    pub utts_per_speaker: usize,
    pub p_aug: f64,
    pub enabled_categories: Vec<NoiseCategory>,
    pub snr_range_db: SnrRange,
    /// Random crop length in seconds; `None` keeps whole utterances.
    pub crop_s: Option<f64>,
    pub prior: AugPrior,
    pub source: AugSource,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            speakers: 8,
            utts_per_speaker: 1,
            p_aug: 0.6,
            enabled_categories: NoiseCategory::SEEN.to_vec(),
            snr_range_db: SnrRange::default(),
            crop_s: Some(1.0),
            prior: AugPrior::Bernoulli,
            source: AugSource::OnTheFly,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::invalid("a batch needs at least 2 speakers"));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::invalid("utts_per_speaker must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::invalid(format!("p_aug {} outside [0, 1]", self.p_aug)));
        }
        if self.p_aug > 0.0 && self.enabled_categories.is_empty() {
            return Err(Error::invalid("p_aug > 0 needs at least one enabled category"));
        }
        if let Some(c) = self.enabled_categories.iter().find(|c| !c.is_seen()) {
            return Err(Error::invalid(format!("{c} cannot be used for training augmentation")));
        }
        if let Some(c) = self.crop_s {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid(format!("crop_s must be positive, got {c}")));
            }
        }
        self.snr_range_db.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.speakers * self.utts_per_speaker
    }
}

#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub features: Vec<FeatureMatrix>,
    pub speaker_ids: Vec<u32>,
    /// Row of the speaker in the AAM class-weight matrix.
    pub class_indices: Vec<usize>,
    pub aug_labels: Vec<NoiseCategory>,
    pub snr_db: Vec<Option<f64>>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// One batch item before audio is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemPlan {
    pub class: usize,
    /// Corpus index of the clean source utterance.
    pub entry: usize,
    pub category: NoiseCategory,
}

fn crop(w: &Waveform, len: Option<usize>, offset_draw: f64) -> Result<Waveform> {
    match len {
        Some(n) if n < w.len() => {
            let start = ((w.len() - n + 1) as f64 * offset_draw) as usize;
            w.segment(start.min(w.len() - n), n)
        }
        _ => Ok(w.clone()),
    }
}

/// Speakers, utterances and augmentation categories for `(seed, step)`.
pub fn plan_batch(corpus: &Corpus, spec: &BatchSpec, seed: u64, step: u64) -> Result<Vec<ItemPlan>> {
    spec.validate()?;
    let by_class = corpus.clean_train_by_class();
    if spec.speakers > by_class.len() {
        return Err(Error::invalid(format!(
            "batch needs {} speakers, corpus has {}",
            spec.speakers,
            by_class.len()
        )));
    }
    let mut rng = seed::rng(&[seed, tag("batch"), step]);
    let classes = index::sample(&mut rng, by_class.len(), spec.speakers).into_vec();
    let mut plans = Vec::with_capacity(spec.batch_size());
    for &class in &classes {
        let utts = &by_class[class];
        if spec.utts_per_speaker > utts.len() {
            return Err(Error::invalid(format!(
                "{} utterances per speaker requested, class {class} has {}",
                spec.utts_per_speaker,
                utts.len()
            )));
        }
        for k in index::sample(&mut rng, utts.len(), spec.utts_per_speaker).into_iter() {
            plans.push(ItemPlan {
                class,
                entry: utts[k],
                category: NoiseCategory::Clean,
            });
        }
    }
    let augmented: Vec<bool> = match spec.prior {
        AugPrior::Bernoulli => plans.iter().map(|_| rng.random_bool(spec.p_aug)).collect(),
        AugPrior::Quota => {
            let n = (spec.p_aug * plans.len() as f64).round() as usize;
            let mut flags: Vec<bool> = (0..plans.len()).map(|i| i < n).collect();
            flags.shuffle(&mut rng);
            flags
        }
    };
    for (plan, aug) in plans.iter_mut().zip(augmented) {
        if aug {
            let cats = &spec.enabled_categories;
            plan.category = cats[rng.random_range(0..cats.len())];
        }
    }
    Ok(plans)
}

/// Draws the batch for `(seed, step)`. Batch composition comes from one
/// stream; each item's crop and mix use their own derived stream, so the
/// result does not depend on the thread count.
pub fn sample_batch(corpus: &Corpus, spec: &BatchSpec, fbank: &Fbank, seed: u64, step: u64) -> Result<SampledBatch> {
    let plans = plan_batch(corpus, spec, seed, step)?;

    let sr = corpus.config().sample_rate_hz;
    let crop_len = spec.crop_s.map(|s| (s * sr as f64).round() as usize);
    let items = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| -> Result<(FeatureMatrix, Option<f64>)> {
            let mut irng = seed::rng(&[seed, tag("batch-item"), step, i as u64]);
            let entry = corpus.entry(plan.entry);
            let offset = irng.random::<f64>();
            let (wave, snr) = match (plan.category, spec.source) {
                (NoiseCategory::Clean, _) => (crop(&entry.utterance.waveform, crop_len, offset)?, None),
                (cat, AugSource::OnTheFly) => {
                    let clean = crop(&entry.utterance.waveform, crop_len, offset)?;
                    let (w, snr) = corpus.train_noise().augment(&clean, cat, spec.snr_range_db, &mut irng)?;
                    (w, Some(snr))
                }
                (cat, AugSource::Static) => {
                    let copy = corpus
                        .train_copies(entry.utterance.speaker_id, entry.utterance_index)
                        .into_iter()
                        .map(|j| corpus.entry(j))
                        .find(|e| e.utterance.aug_label == cat)
                        .ok_or_else(|| Error::invalid(format!("corpus has no static {cat} copy")))?;
                    (crop(&copy.utterance.waveform, crop_len, offset)?, copy.utterance.snr_db)
                }
            };
            Ok((fbank.compute(&wave)?, snr))
        })
        .collect::<Result<Vec<_>>>()?;

    let train_speakers = corpus.train_speakers();
    let mut batch = SampledBatch {
        features: Vec::with_capacity(plans.len()),
        speaker_ids: plans.iter().map(|p| train_speakers[p.class]).collect(),
        class_indices: plans.iter().map(|p| p.class).collect(),
        aug_labels: plans.iter().map(|p| p.category).collect(),
        snr_db: Vec::with_capacity(plans.len()),
    };
    for (f, snr) in items {
        batch.features.push(f);
        batch.snr_db.push(snr);
    }
    Ok(batch)
}

/// Index pairs with same-category targets, balanced between the two sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    /// `true` when both items share an augmentation category.
    pub targets: Vec<bool>,
    /// Only one side (same or different) was present.
    pub degenerate: bool,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Enumerates all pairs `i < j`, splits them by category equality and
/// subsamples the larger side down to the smaller one. With
/// `exclude_clean`, pairs touching a clean item are dropped first.
pub fn make_pairs(labels: &[NoiseCategory], seed: u64, exclude_clean: bool) -> Result<PairSet> {
    if labels.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 labels, got {}", labels.len())));
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if exclude_clean && (labels[i] == NoiseCategory::Clean || labels[j] == NoiseCategory::Clean) {
                continue;
            }
            if labels[i] == labels[j] {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    let degenerate = same.is_empty() || diff.is_empty();
    if !degenerate {
        let mut rng = seed::rng(&[seed, tag("pairs")]);
        let keep = same.len().min(diff.len());
        let big = if same.len() > diff.len() { &mut same } else { &mut diff };
        let mut picked: Vec<usize> = index::sample(&mut rng, big.len(), keep).into_vec();
        picked.sort_unstable();
        *big = picked.into_iter().map(|k| big[k]).collect();
    }
    let mut all: Vec<((usize, usize), bool)> = same
        .into_iter()
        .map(|p| (p, true))
        .chain(diff.into_iter().map(|p| (p, false)))
        .collect();
    all.sort_unstable();
    Ok(PairSet {
        pairs: all.iter().map(|(p, _)| *p).collect(),
        targets: all.iter().map(|(_, t)| *t).collect(),
        degenerate,
    })
}
