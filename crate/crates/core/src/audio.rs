//! Mono WAV input and PCM16 output.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{AsdError, Result};
use crate::features::Waveform;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AsdError::io(path, io),
        other => AsdError::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AsdError::Data(format!(
            "{}: {} channels, only mono audio is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(AsdError::Data(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => AsdError::io(path, io),
        other => AsdError::Wav(other),
    })?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|i| (i as f64 * 0.05).sin() * 0.5).collect(), 16_000).unwrap();
        write_wav_pcm16(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
