use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NoiseCategory, SnrRange, Split, Waveform};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// Interference applied to the test side of every trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Clean,
    Noise,
    Music,
    Speech,
    /// A per-trial random choice among the seen categories.
    #[serde(rename = "ALL")]
    All,
    Car,
    Cafe,
}

impl Condition {
    pub const SEEN_TABLE: [Condition; 5] = [
        Condition::Clean,
        Condition::Noise,
        Condition::Music,
        Condition::Speech,
        Condition::All,
    ];
    pub const UNSEEN_TABLE: [Condition; 2] = [Condition::Car, Condition::Cafe];
    pub const EVERY: [Condition; 7] = [
        Condition::Clean,
        Condition::Noise,
        Condition::Music,
        Condition::Speech,
        Condition::All,
        Condition::Car,
        Condition::Cafe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::Noise => "Noise",
            Condition::Music => "Music",
            Condition::Speech => "Speech",
            Condition::All => "ALL",
            Condition::Car => "Car",
            Condition::Cafe => "Cafe",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// The fixed category of this condition; `None` for ALL.
    pub fn category(self) -> Option<NoiseCategory> {
        match self {
            Condition::Clean => Some(NoiseCategory::Clean),
            Condition::Noise => Some(NoiseCategory::Noise),
            Condition::Music => Some(NoiseCategory::Music),
            Condition::Speech => Some(NoiseCategory::Speech),
            Condition::All => None,
            Condition::Car => Some(NoiseCategory::Car),
            Condition::Cafe => Some(NoiseCategory::Cafe),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::EVERY
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_utt: String,
    pub test_utt: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    pub snr_range_db: SnrRange,
    /// Also corrupt the enrollment side.
    pub augment_enroll: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_target: 500,
            n_nontarget: 500,
            snr_range_db: SnrRange::default(),
            augment_enroll: false,
        }
    }
}

/// Trial list plus the audio realized for one condition.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub condition: Condition,
    pub trials: Vec<Trial>,
    /// Corpus indices of the enroll and test utterances.
    pub enroll_entries: Vec<usize>,
    pub test_entries: Vec<usize>,
    /// Realized test audio; `None` means the clean original.
    pub test_audio: Vec<Option<Waveform>>,
    pub enroll_audio: Vec<Option<Waveform>>,
    /// Category applied to each test side.
    pub test_labels: Vec<NoiseCategory>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// `enroll_utt test_utt 1|0` per line.
    pub fn trials_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            s.push_str(&format!("{} {} {}\n", t.enroll_utt, t.test_utt, u8::from(t.target)));
        }
        s
    }
}

/// Index pairs `(enroll, test)` into the held-out split; the same for every
/// condition given `seed`.
pub fn trial_pairs(corpus: &Corpus, cfg: &TrialConfig, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    let held: Vec<(usize, u32)> = corpus
        .split(Split::Trial)
        .filter(|(_, e)| e.utterance.aug_label == NoiseCategory::Clean)
        .map(|(i, e)| (i, e.utterance.speaker_id))
        .collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for &(a, sa) in &held {
        for &(b, sb) in &held {
            if a == b {
                continue;
            }
            if sa == sb {
                targets.push((a, b, true));
            } else {
                nontargets.push((a, b, false));
            }
        }
    }
    if targets.len() < cfg.n_target || nontargets.len() < cfg.n_nontarget {
        return Err(Error::invalid(format!(
            "held-out data gives {} target and {} non-target pairs; {} and {} requested",
            targets.len(),
            nontargets.len(),
            cfg.n_target,
            cfg.n_nontarget
        )));
    }
    if cfg.n_target + cfg.n_nontarget == 0 {
        return Err(Error::invalid("no trials requested"));
    }
    let mut rng = seed::rng(&[seed, tag("trials")]);
    let mut out: Vec<(usize, usize, bool)> = index::sample(&mut rng, targets.len(), cfg.n_target)
        .into_iter()
        .map(|k| targets[k])
        .chain(
            index::sample(&mut rng, nontargets.len(), cfg.n_nontarget)
                .into_iter()
                .map(|k| nontargets[k]),
        )
        .collect();
    out.sort_unstable();
    Ok(out)
}

fn realize(
    corpus: &Corpus,
    entry: usize,
    category: NoiseCategory,
    snr: SnrRange,
    rng: &mut crate::seed::Rng,
) -> Result<Option<Waveform>> {
    if category == NoiseCategory::Clean {
        return Ok(None);
    }
    let clean = &corpus.entry(entry).utterance.waveform;
    corpus.eval_noise().augment(clean, category, snr, rng).map(|(w, _)| Some(w))
}

/// Trials for `condition`: seeded target / non-target pairs drawn from the
/// held-out split, test side corrupted from the evaluation noise bank.
pub fn build_trials(corpus: &Corpus, cfg: &TrialConfig, condition: Condition, seed: u64) -> Result<TrialSet> {
    cfg.snr_range_db.validate()?;
    let pairs = trial_pairs(corpus, cfg, seed)?;
    let realized = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(e, t, _))| -> Result<_> {
            let mut rng = seed::rng(&[seed, tag("trial-audio"), condition.index(), k as u64]);
            let cat = condition
                .category()
                .unwrap_or_else(|| NoiseCategory::SEEN[rng.random_range(0..NoiseCategory::SEEN.len())]);
            let test = realize(corpus, t, cat, cfg.snr_range_db, &mut rng)?;
            let enroll = if cfg.augment_enroll {
                realize(corpus, e, cat, cfg.snr_range_db, &mut rng)?
            } else {
                None
            };
            Ok((cat, test, enroll))
        })
        .collect::<Result<Vec<_>>>()?;
    let id = |i: usize| corpus.entry(i).utt_id.clone();
    let mut set = TrialSet {
        condition,
        trials: pairs
            .iter()
            .map(|&(e, t, target)| Trial {
                enroll_utt: id(e),
                test_utt: id(t),
                target,
            })
            .collect(),
        enroll_entries: pairs.iter().map(|p| p.0).collect(),
        test_entries: pairs.iter().map(|p| p.1).collect(),
        test_audio: Vec::with_capacity(pairs.len()),
        enroll_audio: Vec::with_capacity(pairs.len()),
        test_labels: Vec::with_capacity(pairs.len()),
    };
    for (cat, test, enroll) in realized {
        set.test_labels.push(cat);
        set.test_audio.push(test);
        set.enroll_audio.push(enroll);
    }
    Ok(set)
}
