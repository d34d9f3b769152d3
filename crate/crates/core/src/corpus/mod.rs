//! Synthetic multi-speaker corpus with SNR-controlled additive-noise
//! augmentation.
//!
//! Speakers are procedural voices (harmonic excitation at a per-speaker
//! fundamental, shaped by a per-speaker spectral envelope). Noise comes in
//! three trainable categories (noise, music, speech babble) and two
//! evaluation-only ones (car, cafe).

mod build;
mod mix;
mod synth;
mod wav;

pub use build::{
    build_corpus, parse_manifest, Corpus, CorpusConfig, CorpusEntry, HeldOut, ManifestLine,
    NoiseBank, NoiseBankConfig, SnrRange, Split,
};
pub use mix::{mix_at_snr, mix_at_snr_with_gain, signal_power, tile_noise};
pub use synth::{synth_noise, synth_utterance, SpeakerProfile, SIGNATURE_BANDS};
pub use wav::{read_wav, write_wav};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio. Samples are nominally in [-1, 1] but may exceed it after
/// mixing; no clipping is applied until WAV export.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean of squared samples.
    pub fn power(&self) -> f64 {
        mix::mean_square(&self.samples)
    }

    /// Copies `len` samples starting at `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Waveform> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::invalid(format!(
                "segment [{start}, {}) outside waveform of length {}",
                start + len,
                self.samples.len()
            )));
        }
        Waveform::new(self.samples[start..start + len].to_vec(), self.sample_rate_hz)
    }
}

/// Augmentation type attached to an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoiseCategory {
    Clean,
    Noise,
    Music,
    Speech,
    Car,
    Cafe,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 6] = [
        NoiseCategory::Clean,
        NoiseCategory::Noise,
        NoiseCategory::Music,
        NoiseCategory::Speech,
        NoiseCategory::Car,
        NoiseCategory::Cafe,
    ];

    /// Categories available for training-time augmentation.
    pub const SEEN: [NoiseCategory; 3] = [
        NoiseCategory::Noise,
        NoiseCategory::Music,
        NoiseCategory::Speech,
    ];

    /// Evaluation-only categories.
    pub const UNSEEN: [NoiseCategory; 2] = [NoiseCategory::Car, NoiseCategory::Cafe];

    pub fn is_seen(self) -> bool {
        Self::SEEN.contains(&self)
    }

    pub fn is_unseen(self) -> bool {
        Self::UNSEEN.contains(&self)
    }

    /// Stable small integer, used in seed derivation.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseCategory::Clean => "CLEAN",
            NoiseCategory::Noise => "NOISE",
            NoiseCategory::Music => "MUSIC",
            NoiseCategory::Speech => "SPEECH",
            NoiseCategory::Car => "CAR",
            NoiseCategory::Cafe => "CAFE",
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown noise category '{s}'")))
    }
}

/// An utterance together with the augmentation applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedUtterance {
    pub waveform: Waveform,
    pub speaker_id: u32,
    pub aug_label: NoiseCategory,
    /// Present iff `aug_label` is not `Clean`.
    pub snr_db: Option<f64>,
}

impl AugmentedUtterance {
    pub fn clean(waveform: Waveform, speaker_id: u32) -> Self {
        Self {
            waveform,
            speaker_id,
            aug_label: NoiseCategory::Clean,
            snr_db: None,
        }
    }

    pub fn augmented(
        waveform: Waveform,
        speaker_id: u32,
        aug_label: NoiseCategory,
        snr_db: f64,
    ) -> Result<Self> {
        if aug_label == NoiseCategory::Clean {
            return Err(Error::invalid("augmented utterance cannot be labelled CLEAN"));
        }
        Ok(Self {
            waveform,
            speaker_id,
            aug_label,
            snr_db: Some(snr_db),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![0.0, f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![1.5, -2.0], 16000).is_ok());
    }

    #[test]
    fn category_names_round_trip() {
        for c in NoiseCategory::ALL {
            assert_eq!(c.as_str().parse::<NoiseCategory>().unwrap(), c);
        }
        assert!("jazz".parse::<NoiseCategory>().is_err());
        assert!(NoiseCategory::Speech.is_seen());
        assert!(NoiseCategory::Cafe.is_unseen());
        assert!(!NoiseCategory::Clean.is_seen() && !NoiseCategory::Clean.is_unseen());
    }

    #[test]
    fn clean_label_has_no_snr() {
        let w = Waveform::new(vec![0.1; 4], 16000).unwrap();
        let u = AugmentedUtterance::clean(w.clone(), 3);
        assert_eq!(u.snr_db, None);
        assert!(AugmentedUtterance::augmented(w, 3, NoiseCategory::Clean, 5.0).is_err());
    }
}
