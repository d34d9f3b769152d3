use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Writes mono 16-bit PCM. Samples are clamped to [-1, 1] here and only here.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in w.samples() {
        let q = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(q).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", other.to_string()),
    };
    let mut reader = hound::WavReader::open(path).map_err(to_io)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format("wav", "expected mono 16-bit PCM"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(to_io)?;
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_clamps_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 1.7, -3.0], 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate_hz(), 16000);
        let expect = [0.0, 0.5, -0.25, 1.0, -1.0];
        for (a, b) in r.samples().iter().zip(expect) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }
}
