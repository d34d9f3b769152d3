use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mix::{mix_at_snr, tile_noise};
use super::synth::{synth_noise, synth_utterance, SpeakerProfile};
use super::{AugmentedUtterance, NoiseCategory, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::{self, tag, Rng};

/// Closed SNR interval in dB, serialized as `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange(pub f64, pub f64);

impl SnrRange {
    pub fn new(low_db: f64, high_db: f64) -> Result<Self> {
        let r = SnrRange(low_db, high_db);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0.is_finite() || !self.1.is_finite() || self.0 > self.1 {
            return Err(Error::config(format!(
                "SNR range [{}, {}] is not a finite ordered interval",
                self.0, self.1
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

impl Default for SnrRange {
    fn default() -> Self {
        SnrRange(0.0, 20.0)
    }
}

/// Which utterances are held out of training to build verification trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeldOut {
    /// Additional speakers never seen in training.
    Speakers {
        speakers: usize,
        utts_per_speaker: usize,
    },
    /// Additional utterances from the training speakers.
    Utterances { utts_per_speaker: usize },
}

impl Default for HeldOut {
    fn default() -> Self {
        HeldOut::Speakers {
            speakers: 20,
            utts_per_speaker: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseBankConfig {
    pub clips_per_category: usize,
    pub clip_s: f64,
}

impl Default for NoiseBankConfig {
    fn default() -> Self {
        Self {
            clips_per_category: 8,
            clip_s: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Training speakers.
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_range_s: [f64; 2],
    pub sample_rate_hz: u32,
    /// Seen categories that get a static augmented copy in the train split.
    pub categories: Vec<NoiseCategory>,
    pub snr_db: BTreeMap<NoiseCategory, SnrRange>,
    pub held_out: HeldOut,
    /// Spread of speaker spectral signatures; larger is easier.
    pub signature_std_db: f64,
    pub noise_bank: NoiseBankConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 30,
            utts_per_speaker: 10,
            duration_range_s: [1.0, 2.0],
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
            categories: NoiseCategory::SEEN.to_vec(),
            snr_db: NoiseCategory::ALL[1..]
                .iter()
                .map(|&c| (c, SnrRange::default()))
                .collect(),
            held_out: HeldOut::default(),
            signature_std_db: 6.0,
            noise_bank: NoiseBankConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::config(format!(
                "need at least 2 speakers for trials, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::config("utts_per_speaker must be positive"));
        }
        let [lo, hi] = self.duration_range_s;
        if !(lo > 0.0) || lo > hi || !hi.is_finite() {
            return Err(Error::config(format!(
                "duration range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if !c.is_seen() {
                return Err(Error::config(format!(
                    "{c} is not a trainable augmentation category"
                )));
            }
            if self.categories[..i].contains(c) {
                return Err(Error::config(format!("category {c} listed twice")));
            }
        }
        for r in self.snr_db.values() {
            r.validate()?;
        }
        match self.held_out {
            HeldOut::Speakers {
                speakers,
                utts_per_speaker,
            } => {
                if speakers < 2 || utts_per_speaker < 2 {
                    return Err(Error::config(
                        "held-out speakers mode needs >= 2 speakers with >= 2 utterances",
                    ));
                }
            }
            HeldOut::Utterances { utts_per_speaker } => {
                if utts_per_speaker < 2 {
                    return Err(Error::config(
                        "held-out utterances mode needs >= 2 utterances per speaker",
                    ));
                }
            }
        }
        if !(self.signature_std_db >= 0.0) {
            return Err(Error::config("signature_std_db must be non-negative"));
        }
        if self.noise_bank.clips_per_category == 0 || !(self.noise_bank.clip_s > 0.0) {
            return Err(Error::config("noise bank needs positive clip count and length"));
        }
        Ok(())
    }

    pub fn snr_range(&self, category: NoiseCategory) -> SnrRange {
        self.snr_db.get(&category).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Held-out audio from which verification trials are drawn.
    Trial,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "tr",
            Split::Trial => "ev",
        }
    }
}

/// A pool of interference clips per category. Augmentation draws a clip
/// and a random offset, tiling when the clip is shorter than the target.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    clips: BTreeMap<NoiseCategory, Vec<Waveform>>,
}

impl NoiseBank {
    pub fn synthesize(
        categories: &[NoiseCategory],
        cfg: &NoiseBankConfig,
        seed: u64,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        let jobs: Vec<(NoiseCategory, usize)> = categories
            .iter()
            .flat_map(|&c| (0..cfg.clips_per_category).map(move |i| (c, i)))
            .collect();
        let waves = jobs
            .par_iter()
            .map(|&(c, i)| {
                let s = seed::derive(&[seed, c.index() as u64, i as u64]);
                synth_noise(c, cfg.clip_s, s, sample_rate_hz)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut clips: BTreeMap<NoiseCategory, Vec<Waveform>> = BTreeMap::new();
        for ((c, _), w) in jobs.into_iter().zip(waves) {
            clips.entry(c).or_default().push(w);
        }
        Ok(Self { clips })
    }

    pub fn clips(&self, category: NoiseCategory) -> Result<&[Waveform]> {
        self.clips
            .get(&category)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::invalid(format!("no {category} clips in noise bank")))
    }

    /// A fresh noise instance of `len` samples: random clip, random offset.
    pub fn draw(&self, category: NoiseCategory, len: usize, rng: &mut Rng) -> Result<Waveform> {
        let clips = self.clips(category)?;
        let clip = &clips[rng.random_range(0..clips.len())];
        let offset = rng.random_range(0..clip.len());
        tile_noise(clip, len, offset)
    }

    /// Mixes a fresh instance of `category` into `clean` at an SNR drawn from
    /// `snr`. Returns the mixture and the realized SNR.
    pub fn augment(
        &self,
        clean: &Waveform,
        category: NoiseCategory,
        snr: SnrRange,
        rng: &mut Rng,
    ) -> Result<(Waveform, f64)> {
        let snr_db = snr.sample(rng);
        let noise = self.draw(category, clean.len(), rng)?;
        Ok((mix_at_snr(clean, &noise, snr_db)?, snr_db))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub utt_id: String,
    pub split: Split,
    pub utterance_index: usize,
    pub utterance: AugmentedUtterance,
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLine {
    pub utt_id: String,
    pub speaker_id: u32,
    pub category: NoiseCategory,
    pub snr_db: Option<f64>,
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    config: CorpusConfig,
    seed: u64,
    speakers: Vec<SpeakerProfile>,
    entries: Vec<CorpusEntry>,
    train_speakers: Vec<u32>,
    clean_train_by_class: Vec<Vec<usize>>,
    train_noise: NoiseBank,
    eval_noise: NoiseBank,
}

fn utt_id(split: Split, speaker: u32, index: usize, category: NoiseCategory) -> String {
    format!(
        "{}-s{speaker:04}-u{index:02}-{}",
        split.prefix(),
        category.as_str().to_ascii_lowercase()
    )
}

/// Synthesizes the corpus described by `cfg`. Every utterance is a pure
/// function of `(seed, speaker, utterance index, category)`, so the result
/// does not depend on thread count.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let sr = cfg.sample_rate_hz;
    let n_train = cfg.n_speakers as u32;

    let mut jobs: Vec<(u32, usize, Split)> = Vec::new();
    for spk in 0..n_train {
        for u in 0..cfg.utts_per_speaker {
            jobs.push((spk, u, Split::Train));
        }
    }
    match cfg.held_out {
        HeldOut::Speakers {
            speakers,
            utts_per_speaker,
        } => {
            for spk in n_train..n_train + speakers as u32 {
                for u in 0..utts_per_speaker {
                    jobs.push((spk, u, Split::Trial));
                }
            }
        }
        HeldOut::Utterances { utts_per_speaker } => {
            for spk in 0..n_train {
                for k in 0..utts_per_speaker {
                    jobs.push((spk, cfg.utts_per_speaker + k, Split::Trial));
                }
            }
        }
    }

    let n_profiles = jobs.iter().map(|j| j.0).max().unwrap_or(0) + 1;
    let speakers: Vec<SpeakerProfile> = (0..n_profiles)
        .map(|id| SpeakerProfile::draw(id, seed, cfg.signature_std_db))
        .collect();

    let [dlo, dhi] = cfg.duration_range_s;
    let clean: Vec<Waveform> = jobs
        .par_iter()
        .map(|&(spk, u, _)| {
            let clean_tag = NoiseCategory::Clean.index() as u64;
            let mut drng = seed::rng(&[seed, spk as u64, u as u64, tag("duration")]);
            let dur = if dlo == dhi {
                dlo
            } else {
                drng.random_range(dlo..=dhi)
            };
            let s = seed::derive(&[seed, spk as u64, u as u64, clean_tag]);
            synth_utterance(&speakers[spk as usize], dur, s, sr)
        })
        .collect::<Result<_>>()?;

    let train_noise = NoiseBank::synthesize(
        &NoiseCategory::SEEN,
        &cfg.noise_bank,
        seed::derive(&[seed, tag("train-noise")]),
        sr,
    )?;
    let eval_noise = NoiseBank::synthesize(
        &NoiseCategory::ALL[1..],
        &cfg.noise_bank,
        seed::derive(&[seed, tag("eval-noise")]),
        sr,
    )?;

    // Static augmented copies of the training utterances.
    let aug_jobs: Vec<(usize, NoiseCategory)> = jobs
        .iter()
        .enumerate()
        .filter(|(_, j)| j.2 == Split::Train)
        .flat_map(|(i, _)| cfg.categories.iter().map(move |&c| (i, c)))
        .collect();
    let augmented: Vec<(Waveform, f64)> = aug_jobs
        .par_iter()
        .map(|&(i, c)| {
            let (spk, u, _) = jobs[i];
            let mut rng = seed::rng(&[seed, spk as u64, u as u64, c.index() as u64]);
            train_noise.augment(&clean[i], c, cfg.snr_range(c), &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(jobs.len() + aug_jobs.len());
    let mut aug_iter = aug_jobs.iter().zip(augmented).peekable();
    for (i, (&(spk, u, split), wave)) in jobs.iter().zip(clean).enumerate() {
        entries.push(CorpusEntry {
            utt_id: utt_id(split, spk, u, NoiseCategory::Clean),
            split,
            utterance_index: u,
            utterance: AugmentedUtterance::clean(wave, spk),
        });
        while let Some(((src, _), _)) = aug_iter.peek() {
            if *src != i {
                break;
            }
            let ((_, c), (w, snr)) = aug_iter.next().unwrap();
            entries.push(CorpusEntry {
                utt_id: utt_id(split, spk, u, *c),
                split,
                utterance_index: u,
                utterance: AugmentedUtterance::augmented(w, spk, *c, snr)?,
            });
        }
    }

    let train_speakers: Vec<u32> = (0..n_train).collect();
    let mut clean_train_by_class = vec![Vec::new(); train_speakers.len()];
    for (i, e) in entries.iter().enumerate() {
        if e.split == Split::Train && e.utterance.aug_label == NoiseCategory::Clean {
            clean_train_by_class[e.utterance.speaker_id as usize].push(i);
        }
    }

    Ok(Corpus {
        config: cfg.clone(),
        seed,
        speakers,
        entries,
        train_speakers,
        clean_train_by_class,
        train_noise,
        eval_noise,
    })
}

impl Corpus {
    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn speakers(&self) -> &[SpeakerProfile] {
        &self.speakers
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &CorpusEntry {
        &self.entries[index]
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &CorpusEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.split == split)
    }

    /// Speaker ids of the training classes, in class-index order.
    pub fn train_speakers(&self) -> &[u32] {
        &self.train_speakers
    }

    pub fn class_count(&self) -> usize {
        self.train_speakers.len()
    }

    /// Entry indices of the clean training utterances, grouped by class.
    pub fn clean_train_by_class(&self) -> &[Vec<usize>] {
        &self.clean_train_by_class
    }

    /// Indices of every training entry (clean and augmented) of a speaker
    /// sharing the given utterance index.
    pub fn train_copies(&self, speaker_id: u32, utterance_index: usize) -> Vec<usize> {
        self.split(Split::Train)
            .filter(|(_, e)| {
                e.utterance.speaker_id == speaker_id && e.utterance_index == utterance_index
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Noise pool used for training-time augmentation (seen categories).
    pub fn train_noise(&self) -> &NoiseBank {
        &self.train_noise
    }

    /// Independent noise pool for evaluation (all categories).
    pub fn eval_noise(&self) -> &NoiseBank {
        &self.eval_noise
    }

    fn manifest_path(e: &CorpusEntry, with_audio: bool) -> String {
        if with_audio {
            format!("wav/{}.wav", e.utt_id)
        } else {
            "-".to_string()
        }
    }

    /// Manifest text: `utt_id speaker_id category snr_db|NA path` per line.
    pub fn manifest(&self, with_audio: bool) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let snr = match e.utterance.snr_db {
                Some(s) => format!("{s:.4}"),
                None => "NA".to_string(),
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.utt_id,
                e.utterance.speaker_id,
                e.utterance.aug_label,
                snr,
                Self::manifest_path(e, with_audio)
            );
        }
        out
    }

    /// Writes every utterance as 16-bit WAV under `dir/wav/`.
    pub fn export_wavs(&self, dir: &Path) -> Result<()> {
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for e in &self.entries {
            super::wav::write_wav(&dir.join(Self::manifest_path(e, true)), &e.utterance.waveform)?;
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |d: &str| Error::format("manifest", format!("line {}: {d}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let speaker_id = f[1].parse().map_err(|_| bad("bad speaker id"))?;
            let category: NoiseCategory = f[2].parse().map_err(|_| bad("bad category"))?;
            let snr_db = match f[3] {
                "NA" => None,
                s => Some(s.parse().map_err(|_| bad("bad snr"))?),
            };
            if (category == NoiseCategory::Clean) != snr_db.is_none() {
                return Err(bad("snr must be NA exactly for CLEAN"));
            }
            Ok(ManifestLine {
                utt_id: f[0].to_string(),
                speaker_id,
                category,
                snr_db,
                path: f[4].to_string(),
            })
        })
        .collect()
}
