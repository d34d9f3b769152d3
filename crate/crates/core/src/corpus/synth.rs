use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{NoiseCategory, Waveform};
use crate::error::{Error, Result};
use crate::seed::{self, tag, Rng};

/// Number of bands in a speaker's spectral signature.
pub const SIGNATURE_BANDS: usize = 24;
const SIGNATURE_LOW_HZ: f64 = 60.0;
const SIGNATURE_HIGH_HZ: f64 = 7600.0;

const F0_RANGE_HZ: (f64, f64) = (80.0, 300.0);
// Per-utterance variation around a speaker's fixed identity.
const F0_JITTER: f64 = 0.04;
const UTTERANCE_JITTER_DB: f64 = 2.0;
const EXCITATION_NOISE: f64 = 0.03;
const PEAK: f64 = 0.9;

/// A synthetic voice: fundamental frequency plus a fixed spectral envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub fundamental_hz: f64,
    /// Per-band gains in dB, bands evenly spaced on the mel scale.
    pub spectral_signature: Vec<f64>,
}

impl SpeakerProfile {
    /// Draws a profile from a generator keyed on `(seed, speaker_id)`.
    /// `signature_std_db` controls how far apart speakers sit.
    pub fn draw(speaker_id: u32, seed: u64, signature_std_db: f64) -> Self {
        let mut rng = seed::rng(&[seed, tag("speaker"), speaker_id as u64]);
        let (lo, hi) = (F0_RANGE_HZ.0.ln(), F0_RANGE_HZ.1.ln());
        let fundamental_hz = rng.random_range(lo..hi).exp();
        let spectral_signature = (0..SIGNATURE_BANDS)
            .map(|_| signature_std_db * normal(&mut rng))
            .collect();
        Self {
            speaker_id,
            fundamental_hz,
            spectral_signature,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Linear interpolation of band gains (dB) on the mel axis.
fn envelope_db(bands_db: &[f64], f_hz: f64) -> f64 {
    let lo = hz_to_mel(SIGNATURE_LOW_HZ);
    let hi = hz_to_mel(SIGNATURE_HIGH_HZ);
    let pos = (hz_to_mel(f_hz) - lo) / (hi - lo) * (bands_db.len() - 1) as f64;
    if pos <= 0.0 {
        return bands_db[0];
    }
    let i = pos.floor() as usize;
    if i + 1 >= bands_db.len() {
        return bands_db[bands_db.len() - 1];
    }
    let frac = pos - i as f64;
    bands_db[i] * (1.0 - frac) + bands_db[i + 1] * frac
}

fn sample_count(duration_s: f64, sample_rate_hz: u32) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let n = (duration_s * sample_rate_hz as f64).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    Ok(n)
}

fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Synthesizes one utterance of `profile`.
///
/// Output is a harmonic series at a slowly varying fundamental, weighted by
/// the speaker's envelope (with small per-utterance perturbations), under a
/// syllable-rate amplitude envelope, plus low-level excitation noise. Peak
/// normalized to 0.9.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    seed: u64,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    let n = sample_count(duration_s, sample_rate_hz)?;
    if profile.spectral_signature.len() < 2 {
        return Err(Error::invalid("spectral signature needs at least two bands"));
    }
    let sr = sample_rate_hz as f64;
    let mut rng = seed::rng(&[seed, tag("utterance")]);

    let f0 = profile.fundamental_hz * (F0_JITTER * normal(&mut rng)).exp();
    let depth = rng.random_range(0.02..0.08);
    let contour_rate = rng.random_range(0.5..2.0);
    let contour_phase = rng.random_range(0.0..2.0 * PI);
    let syllable_rate = rng.random_range(2.5..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let bands_db: Vec<f64> = profile
        .spectral_signature
        .iter()
        .map(|g| g + UTTERANCE_JITTER_DB * normal(&mut rng))
        .collect();

    let top_hz = (0.95 * sr / 2.0).min(7800.0);
    let harmonics = ((top_hz / (f0 * (1.0 + depth))).floor() as usize).max(1);
    // amps[k - 1] weights harmonic k.
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let db = envelope_db(&bands_db, k as f64 * f0);
            10f64.powf(db / 20.0) / (k as f64).sqrt()
        })
        .collect();

    let mut x = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + depth * (2.0 * PI * contour_rate * t + contour_phase).sin());
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        // sin(k*phase) by the Chebyshev recurrence.
        let s1 = phase.sin();
        let two_cos = 2.0 * phase.cos();
        let (mut prev, mut cur) = (0.0, s1);
        let mut acc = amps[0] * s1;
        for a in &amps[1..] {
            let next = two_cos * cur - prev;
            acc += a * next;
            prev = cur;
            cur = next;
        }
        let env = 0.35
            + 0.65 * (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos());
        x.push(env * acc);
    }
    let level = EXCITATION_NOISE * rms(&x);
    for v in x.iter_mut() {
        *v += level * normal(&mut rng);
    }
    peak_normalize(&mut x);
    Waveform::new(x, sample_rate_hz)
}

/// Filters `x` with a zero-phase magnitude response `gain(f_hz)`.
fn shape_spectrum(x: &[f64], sample_rate_hz: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= gain(bin as f64 * sample_rate_hz / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn white(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn babble(
    talkers: usize,
    duration_s: f64,
    rng: &mut Rng,
    sample_rate_hz: u32,
) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for i in 0..talkers {
        // Ad-hoc voices, disjoint from corpus speaker ids.
        let profile = SpeakerProfile::draw(u32::MAX - i as u32, rng.random(), 6.0);
        let w = synth_utterance(&profile, duration_s, rng.random(), sample_rate_hz)?;
        if out.is_empty() {
            out = w.into_samples();
        } else {
            out.iter_mut().zip(w.samples()).for_each(|(o, v)| *o += v);
        }
    }
    Ok(out)
}

/// Synthesizes an interference signal of the given category.
///
/// * `Noise`: stationary colored noise with a random spectral tilt.
/// * `Music`: 3 to 8 sustained harmonic tones under slow envelopes.
/// * `Speech`: babble of 3 to 6 synthetic talkers.
/// * `Car`: noise low-passed around 120-250 Hz plus engine harmonics.
/// * `Cafe`: babble of 5 to 8 talkers plus sparse broadband transients.
pub fn synth_noise(
    category: NoiseCategory,
    duration_s: f64,
    seed: u64,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    if category == NoiseCategory::Clean {
        return Err(Error::invalid("cannot synthesize noise for CLEAN"));
    }
    let n = sample_count(duration_s, sample_rate_hz)?;
    let sr = sample_rate_hz as f64;
    let mut rng = seed::rng(&[seed, tag("noise"), category.index() as u64]);

    let mut x = match category {
        NoiseCategory::Clean => unreachable!(),
        NoiseCategory::Noise => {
            // Power spectrum ~ f^-beta.
            let beta: f64 = rng.random_range(-0.5..2.0);
            let w = white(&mut rng, n);
            shape_spectrum(&w, sr, |f| {
                if f < 20.0 {
                    0.0
                } else {
                    (f / 1000.0).powf(-beta / 2.0)
                }
            })
        }
        NoiseCategory::Music => {
            let tones = rng.random_range(3..=8);
            let mut x = vec![0.0; n];
            for _ in 0..tones {
                let midi: f64 = rng.random_range(45..=81) as f64;
                let f = 440.0 * 2f64.powf((midi - 69.0) / 12.0);
                let partials = rng.random_range(1..=5);
                let amp = rng.random_range(0.4..1.0);
                let rate = rng.random_range(0.1..0.8);
                let env_phase = rng.random_range(0.0..2.0 * PI);
                let phase: f64 = rng.random_range(0.0..2.0 * PI);
                for (i, v) in x.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let env = 0.55 + 0.45 * (2.0 * PI * rate * t + env_phase).sin();
                    let mut s = 0.0;
                    for h in 1..=partials {
                        let fh = f * h as f64;
                        if fh < 0.45 * sr {
                            s += (2.0 * PI * fh * t + phase * h as f64).sin() / h as f64;
                        }
                    }
                    *v += amp * env * s;
                }
            }
            x
        }
        NoiseCategory::Speech => {
            let talkers = rng.random_range(3..=6);
            babble(talkers, duration_s, &mut rng, sample_rate_hz)?
        }
        NoiseCategory::Car => {
            let cutoff: f64 = rng.random_range(120.0..250.0);
            let w = white(&mut rng, n);
            let mut x = shape_spectrum(&w, sr, |f| {
                if f < 20.0 {
                    0.0
                } else {
                    1.0 / (1.0 + (f / cutoff).powi(4))
                }
            });
            let level = rms(&x);
            let engine = rng.random_range(25.0..50.0);
            for h in 1..=3 {
                let a = level * rng.random_range(0.5..1.0) / h as f64;
                let ph = rng.random_range(0.0..2.0 * PI);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += a * (2.0 * PI * engine * h as f64 * i as f64 / sr + ph).sin();
                }
            }
            x
        }
        NoiseCategory::Cafe => {
            let talkers = rng.random_range(5..=8);
            let mut x = babble(talkers, duration_s, &mut rng, sample_rate_hz)?;
            let level = rms(&x);
            let events = (rng.random_range(2.0..4.0) * duration_s).round() as usize;
            for _ in 0..events {
                let start = rng.random_range(0..n);
                let tau = rng.random_range(0.005..0.02);
                let ring = rng.random_range(2000.0..5000.0);
                let amp = level * rng.random_range(2.0..5.0);
                let len = ((6.0 * tau * sr) as usize).min(n - start);
                for j in 0..len {
                    let t = j as f64 / sr;
                    let decay = (-t / tau).exp();
                    let s = 0.7 * normal(&mut rng) + 0.7 * (2.0 * PI * ring * t).sin();
                    x[start + j] += amp * decay * s;
                }
            }
            x
        }
    };
    peak_normalize(&mut x);
    Waveform::new(x, sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(id: u32) -> SpeakerProfile {
        SpeakerProfile::draw(id, 11, 6.0)
    }

    /// Power spectrum by direct FFT, as (frequency, power) pairs up to Nyquist.
    fn power_spectrum(w: &Waveform) -> Vec<(f64, f64)> {
        let n = w.len();
        let mut buf: Vec<Complex<f64>> =
            w.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let sr = w.sample_rate_hz() as f64;
        (0..=n / 2)
            .map(|k| (k as f64 * sr / n as f64, buf[k].norm_sqr()))
            .collect()
    }

    #[test]
    fn utterance_length_and_determinism() {
        let p = profile(0);
        let a = synth_utterance(&p, 2.0, 7, 16000).unwrap();
        let b = synth_utterance(&p, 2.0, 7, 16000).unwrap();
        assert_eq!(a.len(), 32000);
        assert_eq!(a, b);
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
        assert_ne!(a, synth_utterance(&p, 2.0, 8, 16000).unwrap());
    }

    #[test]
    fn non_positive_duration_rejected() {
        let p = profile(0);
        assert!(synth_utterance(&p, 0.0, 1, 16000).is_err());
        assert!(synth_utterance(&p, -1.0, 1, 16000).is_err());
        assert!(synth_noise(NoiseCategory::Noise, 0.0, 1, 16000).is_err());
    }

    #[test]
    fn profiles_are_fixed_per_speaker() {
        assert_eq!(profile(3), profile(3));
        assert_ne!(profile(3).spectral_signature, profile(4).spectral_signature);
        assert_eq!(profile(3).spectral_signature.len(), SIGNATURE_BANDS);
        for id in 0..50 {
            let f0 = profile(id).fundamental_hz;
            assert!((80.0..300.0).contains(&f0));
        }
    }

    #[test]
    fn noise_contracts() {
        let w = synth_noise(NoiseCategory::Noise, 1.0, 3, 16000).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples().iter().all(|v| v.is_finite()));
        let a = synth_noise(NoiseCategory::Music, 2.0, 5, 16000).unwrap();
        let b = synth_noise(NoiseCategory::Music, 2.0, 5, 16000).unwrap();
        assert_eq!(a, b);
        assert!(synth_noise(NoiseCategory::Clean, 1.0, 1, 16000).is_err());
        for c in [
            NoiseCategory::Speech,
            NoiseCategory::Car,
            NoiseCategory::Cafe,
        ] {
            let w = synth_noise(c, 0.5, 9, 16000).unwrap();
            assert_eq!(w.len(), 8000);
            assert!(w.power() > 0.0);
        }
    }

    #[test]
    fn car_noise_is_low_frequency() {
        let w = synth_noise(NoiseCategory::Car, 4.0, 1, 16000).unwrap();
        let spec = power_spectrum(&w);
        let total: f64 = spec.iter().map(|(_, p)| p).sum();
        let low: f64 = spec.iter().filter(|(f, _)| *f < 400.0).map(|(_, p)| p).sum();
        assert!(low / total >= 0.9, "low-band fraction {}", low / total);
    }

    #[test]
    fn envelope_interpolates_between_bands() {
        let bands = vec![0.0, 10.0];
        assert_eq!(envelope_db(&bands, 10.0), 0.0);
        assert_eq!(envelope_db(&bands, 8000.0), 10.0);
        let mid = envelope_db(&bands, 1500.0);
        assert!(mid > 0.0 && mid < 10.0);
    }
}
