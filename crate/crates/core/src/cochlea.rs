//! Cochleagram front end.
//!
//! A bank of half-cosine bandpass filters, equally spaced on the ERB-rate
//! scale, is applied in the frequency domain. Each subband's envelope is the
//! magnitude of its analytic signal; envelopes are low-passed, decimated to
//! 200 Hz and power-law compressed. A 2-second clip therefore maps to a
//! 203 x 400 (frequency x time) matrix.
//!
//! Adjacent filters overlap by half their width, so the squared gains sum to
//! one between the first and last center frequency.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AudioClip, ClipSpec};

pub const N_FILTERS: usize = 203;
pub const N_FRAMES: usize = 400;
pub const ENVELOPE_RATE: u32 = 200;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_F_LO: f64 = 50.0;
pub const DEFAULT_F_HI: f64 = 8_000.0;
pub const DEFAULT_COMPRESSION: f64 = 0.3;

/// Zero crossings of the anti-aliasing kernel on each side, in output samples.
const AA_LOBES: usize = 4;

#[derive(Debug, Error)]
pub enum CochleaError {
    #[error("invalid filterbank parameters: {0}")]
    InvalidParams(String),
    #[error("clip has {got} samples at {rate} Hz, expected {expected}")]
    WrongLength {
        got: usize,
        expected: usize,
        rate: u32,
    },
    #[error("clip sample rate {got} Hz does not match filterbank rate {expected} Hz")]
    WrongRate { got: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, CochleaError>;

/// Glasberg & Moore ERB-rate (ERB number) of a frequency in Hz.
pub fn erb_rate(hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * hz).log10()
}

pub fn erb_rate_to_hz(erb: f64) -> f64 {
    (10f64.powf(erb / 21.4) - 1.0) / 0.00437
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CochleaParams {
    pub sample_rate: u32,
    pub n_filters: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub compression: f64,
    pub envelope_rate: u32,
    pub clip_seconds: f64,
}

impl Default for CochleaParams {
    fn default() -> Self {
        CochleaParams {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_filters: N_FILTERS,
            f_lo: DEFAULT_F_LO,
            f_hi: DEFAULT_F_HI,
            compression: DEFAULT_COMPRESSION,
            envelope_rate: ENVELOPE_RATE,
            clip_seconds: crate::augment::CLIP_SECONDS,
        }
    }
}

impl CochleaParams {
    pub fn n_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn n_frames(&self) -> usize {
        (self.clip_seconds * self.envelope_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
struct BandGain {
    first_bin: usize,
    gains: Vec<f64>,
}

/// Frequency-domain half-cosine filterbank for fixed-length signals.
#[derive(Clone)]
pub struct Filterbank {
    params: CochleaParams,
    n_fft: usize,
    center_freqs: Vec<f64>,
    /// ERB-rate support (lower, center, upper) of each filter.
    supports: Vec<(f64, f64, f64)>,
    bands: Vec<BandGain>,
    ifft: Arc<dyn Fft<f64>>,
    fft: Arc<dyn Fft<f64>>,
    aa_kernel: Vec<f64>,
    hash: String,
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank")
            .field("params", &self.params)
            .field("n_fft", &self.n_fft)
            .field("hash", &self.hash)
            .finish()
    }
}

/// Half-cosine filters with centers equally spaced in ERB-rate between `f_lo`
/// and `f_hi` (exclusive; the band edges are the outermost cutoffs).
pub fn build_filterbank(sample_rate: u32, n_filters: usize, f_lo: f64, f_hi: f64) -> Result<Filterbank> {
    Filterbank::new(CochleaParams {
        sample_rate,
        n_filters,
        f_lo,
        f_hi,
        ..CochleaParams::default()
    })
}

impl Filterbank {
    pub fn new(params: CochleaParams) -> Result<Filterbank> {
        let nyquist = params.sample_rate as f64 / 2.0;
        if params.sample_rate == 0 {
            return Err(CochleaError::InvalidParams("sample rate must be positive".into()));
        }
        if !(params.f_lo > 0.0 && params.f_lo < params.f_hi) {
            return Err(CochleaError::InvalidParams(format!(
                "need 0 < f_lo < f_hi, got {} and {}",
                params.f_lo, params.f_hi
            )));
        }
        if params.f_hi > nyquist {
            return Err(CochleaError::InvalidParams(format!(
                "f_hi {} exceeds Nyquist {nyquist}",
                params.f_hi
            )));
        }
        if params.n_filters == 0 {
            return Err(CochleaError::InvalidParams("need at least one filter".into()));
        }
        if !(params.compression > 0.0) {
            return Err(CochleaError::InvalidParams("compression exponent must be positive".into()));
        }
        if params.envelope_rate == 0 || params.sample_rate % params.envelope_rate != 0 {
            return Err(CochleaError::InvalidParams(format!(
                "envelope rate {} must divide sample rate {}",
                params.envelope_rate, params.sample_rate
            )));
        }
        let n_fft = params.n_samples();
        let n = params.n_filters;
        let e_lo = erb_rate(params.f_lo);
        let e_hi = erb_rate(params.f_hi);
        let step = (e_hi - e_lo) / (n + 1) as f64;
        let supports: Vec<(f64, f64, f64)> = (0..n)
            .map(|i| {
                let lower = e_lo + step * i as f64;
                (lower, lower + step, lower + 2.0 * step)
            })
            .collect();
        let center_freqs = supports.iter().map(|s| erb_rate_to_hz(s.1)).collect();

        let bin_hz = params.sample_rate as f64 / n_fft as f64;
        let n_pos = n_fft / 2 + 1;
        let bands = supports
            .iter()
            .map(|&(lo, c, hi)| {
                let f_lo = erb_rate_to_hz(lo);
                let f_hi = erb_rate_to_hz(hi);
                let first = ((f_lo / bin_hz).floor() as usize).min(n_pos - 1);
                let last = ((f_hi / bin_hz).ceil() as usize).min(n_pos - 1);
                let gains = (first..=last)
                    .map(|k| half_cosine(erb_rate(k as f64 * bin_hz), lo, c, hi))
                    .collect();
                BandGain {
                    first_bin: first,
                    gains,
                }
            })
            .collect::<Vec<_>>();

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n_fft);
        let ifft = planner.plan_fft_inverse(n_fft);
        let decim = (params.sample_rate / params.envelope_rate) as usize;
        let aa_kernel = lowpass_kernel(decim);

        let mut fb = Filterbank {
            params,
            n_fft,
            center_freqs,
            supports,
            bands,
            ifft,
            fft,
            aa_kernel,
            hash: String::new(),
        };
        fb.hash = fb.compute_hash();
        Ok(fb)
    }

    pub fn params(&self) -> &CochleaParams {
        &self.params
    }

    pub fn n_filters(&self) -> usize {
        self.params.n_filters
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    /// Gain of filter `i` at an arbitrary frequency.
    pub fn gain_at(&self, i: usize, hz: f64) -> f64 {
        let (lo, c, hi) = self.supports[i];
        half_cosine(erb_rate(hz), lo, c, hi)
    }

    /// Gain curve of filter `i` sampled on the FFT bins used for filtering.
    pub fn gain_curve(&self, i: usize) -> Vec<f64> {
        let mut curve = vec![0.0; self.n_fft / 2 + 1];
        let band = &self.bands[i];
        curve[band.first_bin..band.first_bin + band.gains.len()].copy_from_slice(&band.gains);
        curve
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        let bin_hz = self.params.sample_rate as f64 / self.n_fft as f64;
        (0..=self.n_fft / 2).map(|k| k as f64 * bin_hz).collect()
    }

    /// Content hash of the parameters and the sampled gain curves.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.params).expect("params serialize"));
        for b in &self.bands {
            h.update((b.first_bin as u64).to_le_bytes());
            for g in &b.gains {
                h.update(g.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Cochleagram of a clip, stored as `f32`.
    pub fn cochleagram(&self, clip: &AudioClip) -> Result<Cochleagram> {
        if clip.sample_rate != self.params.sample_rate {
            return Err(CochleaError::WrongRate {
                got: clip.sample_rate,
                expected: self.params.sample_rate,
            });
        }
        let values = self.transform(&clip.samples)?;
        Ok(Cochleagram {
            values,
            compression: self.params.compression,
            filterbank_hash: self.hash.clone(),
            provenance: Some(clip.spec.clone()),
        })
    }

    pub fn transform(&self, samples: &[f32]) -> Result<Array2<f32>> {
        let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        Ok(self.transform_f64(&x)?.mapv(|v| v as f32))
    }

    /// Full-precision transform; shape `(n_filters, n_frames)`.
    pub fn transform_f64(&self, samples: &[f64]) -> Result<Array2<f64>> {
        if samples.len() != self.n_fft {
            return Err(CochleaError::WrongLength {
                got: samples.len(),
                expected: self.n_fft,
                rate: self.params.sample_rate,
            });
        }
        let n = self.n_fft;
        let mut spectrum: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut spectrum);

        let frames = self.params.n_frames();
        let decim = (self.params.sample_rate / self.params.envelope_rate) as usize;
        let mut out = Array2::<f64>::zeros((self.params.n_filters, frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        let mut envelope = vec![0.0; n];
        let nyquist_bin = if n % 2 == 0 { Some(n / 2) } else { None };
        for (i, band) in self.bands.iter().enumerate() {
            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            // analytic signal: keep positive frequencies, doubled
            for (j, &g) in band.gains.iter().enumerate() {
                let k = band.first_bin + j;
                let w = if k == 0 || Some(k) == nyquist_bin { 1.0 } else { 2.0 };
                buf[k] = spectrum[k] * (g * w);
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let norm = 1.0 / n as f64;
            for (e, z) in envelope.iter_mut().zip(&buf) {
                *e = z.norm() * norm;
            }
            let p = self.params.compression;
            let mut row = out.row_mut(i);
            for (m, o) in row.iter_mut().enumerate() {
                let v = decimate_at(&envelope, &self.aa_kernel, m * decim).max(0.0);
                *o = v.powf(p);
            }
        }
        Ok(out)
    }
}

fn half_cosine(e: f64, lo: f64, center: f64, hi: f64) -> f64 {
    if e <= lo || e >= hi {
        0.0
    } else {
        (PI * (e - center) / (hi - lo)).cos()
    }
}

/// Hann-windowed sinc low-pass for decimation by `factor`, unit DC gain.
fn lowpass_kernel(factor: usize) -> Vec<f64> {
    let half = AA_LOBES * factor;
    let cutoff = 1.0 / factor as f64; // in cycles per input sample, x2
    let mut h: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let x = j as f64 - half as f64;
            let arg = PI * cutoff * x;
            let sinc = if x == 0.0 { 1.0 } else { arg.sin() / arg };
            let w = 0.5 + 0.5 * (PI * x / (half as f64 + 1.0)).cos();
            sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn decimate_at(x: &[f64], kernel: &[f64], center: usize) -> f64 {
    let half = (kernel.len() - 1) / 2;
    let start = center as i64 - half as i64;
    let mut acc = 0.0;
    for (j, &h) in kernel.iter().enumerate() {
        let idx = start + j as i64;
        if idx >= 0 && (idx as usize) < x.len() {
            acc += h * x[idx as usize];
        }
    }
    acc
}

/// Frequency x time matrix of compressed envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochleagram {
    pub values: Array2<f32>,
    pub compression: f64,
    pub filterbank_hash: String,
    pub provenance: Option<ClipSpec>,
}

impl Cochleagram {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_valid(&self) -> bool {
        self.values.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}
