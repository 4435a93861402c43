//! Mono 16-bit PCM WAV I/O with linear-interpolation resampling on ingest.

use std::path::Path;

use super::Waveform;
use crate::error::Result;

/// Reads a WAV file, downmixes to mono, and resamples to `target_rate`.
pub fn read_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
    };
    let mono: Vec<f64> = raw
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    Ok(resample_linear(&wave, target_rate))
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Linear-interpolation resampling; identity when the rate already matches.
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate || wave.is_empty() {
        return Waveform {
            samples: wave.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let ratio = wave.sample_rate as f64 / target_rate as f64;
    let out_len = ((wave.len() as f64) / ratio).round() as usize;
    let last = wave.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let next = (j + 1).min(last);
            wave.samples[j] * (1.0 - frac) + wave.samples[next] * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_rate,
    }
}
