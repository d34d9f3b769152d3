use super::Waveform;
use crate::error::{Error, Result};

pub(crate) fn mean_square(samples: &[f64]) -> f64 {
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Mean of squared samples.
pub fn signal_power(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("signal power of an empty waveform"));
    }
    Ok(mean_square(samples))
}

/// Adds `noise` to `clean` so that the clean-to-scaled-noise power ratio is
/// exactly `snr_db`. The noise is cropped to the clean length; no clipping.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_at_snr_with_gain(clean, noise, snr_db).map(|(w, _)| w)
}

/// As [`mix_at_snr`], also returning the gain applied to the noise.
pub fn mix_at_snr_with_gain(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
) -> Result<(Waveform, f64)> {
    if clean.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate_hz(),
            noise.sample_rate_hz()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let n = clean.len();
    if noise.len() < n {
        return Err(Error::invalid(format!(
            "noise ({} samples) shorter than clean ({n} samples); tile it first",
            noise.len()
        )));
    }
    let cropped = &noise.samples()[..n];
    let p_noise = mean_square(cropped);
    if p_noise <= 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    let p_clean = clean.power();
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean
        .samples()
        .iter()
        .zip(cropped)
        .map(|(c, v)| c + gain * v)
        .collect();
    Ok((Waveform::new(mixed, clean.sample_rate_hz())?, gain))
}

/// Returns `len` samples of `noise` read cyclically from `offset`.
pub fn tile_noise(noise: &Waveform, len: usize, offset: usize) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::invalid("tiled length must be positive"));
    }
    let src = noise.samples();
    let start = offset % src.len();
    let out = src.iter().cycle().skip(start).take(len).copied().collect();
    Waveform::new(out, noise.sample_rate_hz())
}
