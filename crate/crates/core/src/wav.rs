//! WAV input/output and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, WavError>;

/// Read a WAV file as mono `f64` samples in [-1, 1]; multichannel input is
/// averaged across channels.
pub fn read_mono(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| WavError::Read {
        path: p.clone(),
        source,
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(WavError::Invalid {
            path: p,
            message: "zero channels or sample rate".into(),
        });
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|source| WavError::Read {
        path: p.clone(),
        source,
    })?;
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err(WavError::Invalid {
            path: p,
            message: "non-finite samples".into(),
        });
    }
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}

/// Read and resample to `target_rate` when needed.
pub fn read_mono_at(path: impl AsRef<Path>, target_rate: u32) -> Result<Vec<f64>> {
    let (samples, rate) = read_mono(path)?;
    Ok(resample(&samples, rate, target_rate))
}

/// Write mono 32-bit float PCM.
pub fn write_f32(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let werr = |source| WavError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in samples {
        w.write_sample(s).map_err(werr)?;
    }
    w.finalize().map_err(werr)
}

/// Write mono 16-bit PCM (used for generated corpora).
pub fn write_i16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let werr = |source| WavError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(werr)?;
    }
    w.finalize().map_err(werr)
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    const HALF_TAPS: f64 = 16.0;
    let ratio = to as f64 / from as f64;
    // cutoff at the lower Nyquist, in input-sample units
    let cutoff = ratio.min(1.0);
    let half_width = HALF_TAPS / cutoff;
    let out_len = ((samples.len() as f64) * ratio).round() as usize;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(samples.len() - 1);
            let mut acc = 0.0;
            for (i, &s) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let x = i as f64 - t;
                let w = 0.5 + 0.5 * (PI * x / half_width).cos();
                let arg = PI * cutoff * x;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                acc += s * cutoff * sinc * w;
            }
            acc
        })
        .collect()
}
