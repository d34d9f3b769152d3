//! 80-band log-Mel filterbank features.
//!
//! Hamming window, 512-point FFT, triangular filters laid out on the HTK mel
//! scale between 20 and 7600 Hz, natural log with a floor, optional
//! per-utterance mean subtraction. No pre-emphasis, no dithering.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub n_fft: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
    /// Subtract the per-band mean over time.
    pub cmn: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            n_fft: 512,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            low_hz: 20.0,
            high_hz: 7600.0,
            log_floor: 1e-10,
            cmn: true,
        }
    }
}

impl FbankConfig {
    pub fn frame_length(&self, sample_rate_hz: u32) -> usize {
        (self.frame_length_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate_hz: u32) -> usize {
        (self.frame_shift_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz <= nyquist) {
            return Err(Error::config(format!(
                "need 0 <= low_hz < high_hz <= {nyquist}, got [{}, {}]",
                self.low_hz, self.high_hz
            )));
        }
        let frame = self.frame_length(sample_rate_hz);
        if frame == 0 || self.frame_shift(sample_rate_hz) == 0 {
            return Err(Error::config("frame length and shift must be at least one sample"));
        }
        if self.n_fft < frame {
            return Err(Error::config(format!(
                "n_fft {} shorter than the frame ({frame} samples)",
                self.n_fft
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }
}

/// Frames × bands log-Mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::invalid("feature matrix must be non-empty"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix contains non-finite values"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Binary dump: `T` and `D` as little-endian u32, then T·D little-endian
    /// f32 values in row-major order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.num_frames() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.frames.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format("feature dump", e.to_string());
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(bad)?;
        let t = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(bad)?;
        let d = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            r.read_exact(&mut word).map_err(bad)?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        let frames = Array2::from_shape_vec((t, d), data)
            .map_err(|e| Error::format("feature dump", e.to_string()))?;
        Self::new(frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `1 + floor((len - frame) / shift)`, or `None` if shorter than a frame.
pub fn frame_count(len: usize, frame: usize, shift: usize) -> Option<usize> {
    (len >= frame).then(|| 1 + (len - frame) / shift)
}

#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// A reusable extractor: window, filterbank and FFT plan for one sample rate.
#[derive(Clone)]
pub struct Fbank {
    cfg: FbankConfig,
    sample_rate_hz: u32,
    frame_length: usize,
    frame_shift: usize,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fbank")
            .field("cfg", &self.cfg)
            .field("sample_rate_hz", &self.sample_rate_hz)
            .finish()
    }
}

impl Fbank {
    pub fn new(cfg: &FbankConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate(sample_rate_hz)?;
        let frame_length = cfg.frame_length(sample_rate_hz);
        let frame_shift = cfg.frame_shift(sample_rate_hz);
        let window = (0..frame_length)
            .map(|i| {
                0.54 - 0.46
                    * (2.0 * std::f64::consts::PI * i as f64 / (frame_length - 1).max(1) as f64)
                        .cos()
            })
            .collect();

        let n_bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.low_hz);
        let mel_hi = hz_to_mel(cfg.high_hz);
        let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
        let bin_mel: Vec<f64> = (0..n_bins)
            .map(|k| hz_to_mel(k as f64 * sample_rate_hz as f64 / cfg.n_fft as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.n_mels);
        let mut centers_hz = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let left = mel_lo + m as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let full: Vec<f64> = bin_mel
                .iter()
                .map(|&b| {
                    if b > left && b <= center {
                        (b - left) / (center - left)
                    } else if b > center && b < right {
                        (right - b) / (right - center)
                    } else {
                        0.0
                    }
                })
                .collect();
            let first = full.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = full.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            filters.push(MelFilter {
                first_bin: first,
                weights: full[first..=last].to_vec(),
            });
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate_hz,
            frame_length,
            frame_shift,
            window,
            filters,
            centers_hz,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    /// Center frequency of each mel band in Hz.
    pub fn band_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense `n_mels × (n_fft/2 + 1)` filter matrix.
    pub fn filter_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.cfg.n_mels, self.cfg.n_fft / 2 + 1));
        for (row, f) in self.filters.iter().enumerate() {
            for (j, w) in f.weights.iter().enumerate() {
                m[[row, f.first_bin + j]] = *w;
            }
        }
        m
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate_hz() != self.sample_rate_hz {
            return Err(Error::invalid(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate_hz,
                w.sample_rate_hz()
            )));
        }
        let x = w.samples();
        let t = frame_count(x.len(), self.frame_length, self.frame_shift).ok_or_else(|| {
            Error::invalid(format!(
                "waveform of {} samples is shorter than one frame ({})",
                x.len(),
                self.frame_length
            ))
        })?;
        let n_fft = self.cfg.n_fft;
        let n_bins = n_fft / 2 + 1;
        let floor_log = self.cfg.log_floor.ln();
        let mut out = Array2::zeros((t, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let start = i * self.frame_shift;
            for (j, c) in buf.iter_mut().enumerate() {
                *c = if j < self.frame_length {
                    Complex::new(x[start + j] * self.window[j], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (v, f) in row.iter_mut().zip(&self.filters) {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&power[f.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                *v = if e > self.cfg.log_floor { e.ln() } else { floor_log };
            }
        }
        if self.cfg.cmn {
            let mean = out.mean_axis(Axis(0)).expect("t >= 1");
            out -= &mean;
        }
        FeatureMatrix::new(out)
    }
}

/// One-shot extraction.
pub fn fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    Fbank::new(cfg, w.sample_rate_hz())?.compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_utterance, SpeakerProfile};
    use proptest::prelude::*;

    fn no_cmn() -> FbankConfig {
        FbankConfig {
            cmn: false,
            ..FbankConfig::default()
        }
    }

    fn sine(freq: f64, n: usize) -> Waveform {
        let x = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(x, 16000).unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = fbank(&w, &no_cmn()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(f.frames().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_98_frames() {
        assert_eq!(frame_count(16000, 400, 160), Some(98));
        let w = sine(440.0, 16000);
        let f = fbank(&w, &FbankConfig::default()).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (98, 80));
    }

    #[test]
    fn shorter_than_frame_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(fbank(&w, &FbankConfig::default()).is_err());
        assert!(fbank(&Waveform::new(vec![0.1; 400], 16000).unwrap(), &FbankConfig::default()).is_ok());
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let fb = Fbank::new(&no_cmn(), 16000).unwrap();
        // Below ~k=12 neighbouring bands are narrower than an FFT bin and
        // share the same bins, so the argmax is not unique there.
        for k in (12..80).step_by(5) {
            let f = fb.compute(&sine(fb.band_centers_hz()[k], 8000)).unwrap();
            let mean = f.frames().mean_axis(Axis(0)).unwrap();
            let arg = mean
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, k, "band {k}");
        }
    }

    #[test]
    fn filterbank_shape_invariants() {
        let fb = Fbank::new(&FbankConfig::default(), 16000).unwrap();
        let m = fb.filter_matrix();
        assert!(m.iter().all(|&w| w >= 0.0));
        for row in m.axis_iter(Axis(0)) {
            assert!(row.sum() > 0.0);
        }
        assert!(fb.band_centers_hz().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = FbankConfig::default();
        c.high_hz = 9000.0;
        assert!(c.validate(16000).is_err());
        let mut c = FbankConfig::default();
        c.n_mels = 0;
        assert!(c.validate(16000).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let f = fbank(&sine(300.0, 4000), &FbankConfig::default()).unwrap();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 + f.num_frames() * 80 * 4);
        assert_eq!(&bytes[..4], &(f.num_frames() as u32).to_le_bytes());
        let back = FeatureMatrix::read_from(bytes.as_slice()).unwrap();
        for (a, b) in back.frames().iter().zip(f.frames()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn speakers_differ_in_band_energies() {
        // Band energies of two speakers' utterances under a shared seed.
        let a = SpeakerProfile::draw(0, 3, 6.0);
        let b = SpeakerProfile::draw(1, 3, 6.0);
        let fa = fbank(&synth_utterance(&a, 2.0, 7, 16000).unwrap(), &no_cmn()).unwrap();
        let fb = fbank(&synth_utterance(&b, 2.0, 7, 16000).unwrap(), &no_cmn()).unwrap();
        let ma = fa.frames().mean_axis(Axis(0)).unwrap();
        let mb = fb.frames().mean_axis(Axis(0)).unwrap();
        // Natural-log energy difference converted to dB.
        let max_db = ma
            .iter()
            .zip(mb.iter())
            .map(|(x, y)| (x - y).abs() * 10.0 / std::f64::consts::LN_10)
            .fold(0.0, f64::max);
        assert!(max_db > 1.0, "max band difference {max_db} dB");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_formula_holds(len in 400usize..6000) {
            let w = Waveform::new((0..len).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect(), 16000).unwrap();
            let f = fbank(&w, &FbankConfig::default()).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (len - 400) / 160);
            prop_assert_eq!(f.dim(), 80);
        }

        #[test]
        fn gain_invariant_under_cmn(gain in 0.01f64..50.0, seed in 0u64..1000) {
            let p = SpeakerProfile::draw(seed as u32, seed, 6.0);
            let w = synth_utterance(&p, 0.3, seed, 16000).unwrap();
            let scaled = Waveform::new(w.samples().iter().map(|v| v * gain).collect(), 16000).unwrap();
            let cfg = FbankConfig::default();
            let a = fbank(&w, &cfg).unwrap();
            let b = fbank(&scaled, &cfg).unwrap();
            for (x, y) in a.frames().iter().zip(b.frames()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
