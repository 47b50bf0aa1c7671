//! Clip excerpting and background-noise mixing.
//!
//! Each token of a target word yields ten 2-second clips. The word onset is
//! jittered uniformly over the positions where part of the word still covers
//! the clip midpoint (t = 1 s), the clean excerpt is level-normalized, and a
//! segment of background noise is added at an SNR drawn from a normal
//! distribution whose mean depends on the noise type.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{clip_seed, rng_from_seed};

pub const CLIP_SECONDS: f64 = 2.0;
pub const CLIP_MIDPOINT_S: f64 = 1.0;
pub const CLIPS_PER_TOKEN: usize = 10;
pub const SNR_STD_DB: f64 = 2.0;
pub const DEFAULT_TARGET_RMS: f64 = 0.05;
pub const DEFAULT_BABBLE_TALKERS: usize = 8;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("word duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("word interval [{onset}, {end}] s lies outside the {length} s source recording")]
    OutsideSource { onset: f64, end: f64, length: f64 },
    #[error("clean clip has zero power")]
    SilentClean,
    #[error("noise segment has zero power")]
    SilentNoise,
    #[error("noise `{id}` has {have} samples, clip needs {need}")]
    NoiseTooShort { id: String, have: usize, need: usize },
    #[error("no noise sources of type {0}")]
    EmptyNoiseType(NoiseType),
    #[error("babble needs {need} distinct talker streams, have {have}")]
    NotEnoughTalkers { need: usize, have: usize },
    #[error("noise `{0}` has zero power")]
    SilentNoiseSource(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Scenes,
    Music,
    Babble,
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [NoiseType::Scenes, NoiseType::Music, NoiseType::Babble];

    /// Mean of the SNR distribution in dB.
    pub fn mean_snr_db(self) -> f64 {
        match self {
            NoiseType::Babble => 10.0,
            NoiseType::Scenes | NoiseType::Music => 7.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Scenes => "scenes",
            NoiseType::Music => "music",
            NoiseType::Babble => "babble",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NoiseType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown noise type `{s}`"))
    }
}

/// Full provenance of one generated clip. One manifest row per clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub token_id: String,
    pub word: String,
    pub clip_index: u8,
    pub word_onset_in_clip: f64,
    pub word_duration: f64,
    pub noise_type: NoiseType,
    pub noise_id: String,
    /// Start sample of the noise segment within the noise source.
    pub noise_offset: usize,
    pub snr_db: f64,
    /// RMS the clean excerpt was normalized to before mixing.
    pub clean_rms: f64,
    pub seed: u64,
}

impl ClipSpec {
    /// Does the word interval contain the clip midpoint?
    pub fn covers_midpoint(&self) -> bool {
        self.word_onset_in_clip >= 0.0
            && self.word_onset_in_clip < CLIP_SECONDS
            && self.word_onset_in_clip <= CLIP_MIDPOINT_S
            && self.word_onset_in_clip + self.word_duration >= CLIP_MIDPOINT_S
            && (self.clip_index as usize) < CLIPS_PER_TOKEN
    }

    /// File stem used for the clip's waveform and cochleagram.
    pub fn stem(&self) -> String {
        format!("{}_{:02}", sanitize(&self.token_id), self.clip_index)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub spec: ClipSpec,
}

/// Clean 2-second excerpt before noise mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanExcerpt {
    pub samples: Vec<f64>,
    pub word_onset_in_clip: f64,
    pub word_duration: f64,
}

/// Feasible onset positions `[lo, hi]` (clip seconds) for a word of duration `d`.
pub fn onset_interval(word_duration: f64) -> (f64, f64) {
    let lo = (CLIP_MIDPOINT_S - word_duration).max(0.0);
    let hi = CLIP_MIDPOINT_S.min(CLIP_SECONDS - word_duration);
    if hi < lo {
        // longer than the clip: truncated at the right edge
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

pub fn clip_len(sample_rate: u32) -> usize {
    (CLIP_SECONDS * sample_rate as f64).round() as usize
}

/// Cut a 2-second window around a word with a uniformly jittered onset.
///
/// Samples outside the source recording are zero.
pub fn excerpt_window<R: Rng + ?Sized>(
    source: &[f64],
    sample_rate: u32,
    word_onset_s: f64,
    word_duration_s: f64,
    rng: &mut R,
) -> Result<CleanExcerpt> {
    if !(word_duration_s > 0.0) {
        return Err(AugmentError::NonPositiveDuration(word_duration_s));
    }
    let sr = sample_rate as f64;
    let length = source.len() as f64 / sr;
    let end = word_onset_s + word_duration_s;
    // half a sample of slack for alignments rounded to the sample grid
    if word_onset_s < 0.0 || end > length + 0.5 / sr {
        return Err(AugmentError::OutsideSource {
            onset: word_onset_s,
            end,
            length,
        });
    }
    let (lo, hi) = onset_interval(word_duration_s);
    let onset = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let start = ((word_onset_s - onset) * sr).round() as i64;
    let n = clip_len(sample_rate);
    let samples = (0..n as i64)
        .map(|i| {
            let j = start + i;
            if j >= 0 && (j as usize) < source.len() {
                source[j as usize]
            } else {
                0.0
            }
        })
        .collect();
    Ok(CleanExcerpt {
        samples,
        word_onset_in_clip: onset,
        word_duration: word_duration_s,
    })
}

pub fn sample_snr<R: Rng + ?Sized>(noise_type: NoiseType, rng: &mut R) -> f64 {
    Normal::new(noise_type.mean_snr_db(), SNR_STD_DB)
        .expect("finite parameters")
        .sample(rng)
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// SNR in dB between two component signals.
pub fn measured_snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_power(clean) / mean_power(noise)).log10()
}

/// Gain applied to noise so that `clean + gain * noise` has the requested SNR.
pub fn noise_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    ((clean_power / noise_power) * 10f64.powf(-snr_db / 10.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub mixture: Vec<f64>,
    pub clean: Vec<f64>,
    /// The noise segment after scaling.
    pub noise: Vec<f64>,
    pub gain: f64,
    pub noise_offset: usize,
}

/// Add a random contiguous noise segment to `clean` at `snr_db`.
pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &[f64],
    noise: &[f64],
    snr_db: f64,
    rng: &mut R,
) -> Result<Mix> {
    let n = clean.len();
    if noise.len() < n {
        return Err(AugmentError::NoiseTooShort {
            id: String::new(),
            have: noise.len(),
            need: n,
        });
    }
    let offset = rng.random_range(0..=noise.len() - n);
    mix_segment(clean, &noise[offset..offset + n], snr_db, offset)
}

fn mix_segment(clean: &[f64], segment: &[f64], snr_db: f64, offset: usize) -> Result<Mix> {
    let ps = mean_power(clean);
    if ps <= 0.0 {
        return Err(AugmentError::SilentClean);
    }
    let pn = mean_power(segment);
    if pn <= 0.0 {
        return Err(AugmentError::SilentNoise);
    }
    let gain = noise_gain(ps, pn, snr_db);
    let noise: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let mixture = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
    Ok(Mix {
        mixture,
        clean: clean.to_vec(),
        noise,
        gain,
        noise_offset: offset,
    })
}

#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub id: String,
    pub samples: Arc<Vec<f64>>,
}

impl NoiseSource {
    pub fn new(id: impl Into<String>, samples: Vec<f64>) -> NoiseSource {
        NoiseSource {
            id: id.into(),
            samples: Arc::new(samples),
        }
    }
}

/// Sum `talkers` distinct speech streams, each scaled to unit power, truncated
/// to the shortest stream.
pub fn build_babble(
    id: impl Into<String>,
    streams: &[NoiseSource],
    talkers: usize,
    seed: u64,
) -> Result<NoiseSource> {
    if streams.len() < talkers || talkers == 0 {
        return Err(AugmentError::NotEnoughTalkers {
            need: talkers.max(1),
            have: streams.len(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let chosen = rand::seq::index::sample(&mut rng, streams.len(), talkers);
    let len = chosen
        .iter()
        .map(|i| streams[i].samples.len())
        .min()
        .unwrap_or(0);
    let mut out = vec![0.0; len];
    for i in chosen.iter() {
        let s = &streams[i].samples[..len];
        let p = mean_power(s);
        if p <= 0.0 {
            return Err(AugmentError::SilentNoiseSource(streams[i].id.clone()));
        }
        let g = 1.0 / p.sqrt();
        for (o, v) in out.iter_mut().zip(s) {
            *o += v * g;
        }
    }
    // keep the summed babble in a sensible amplitude range
    let g = 1.0 / (talkers as f64).sqrt() * 0.1;
    out.iter_mut().for_each(|v| *v *= g);
    Ok(NoiseSource::new(id, out))
}

#[derive(Debug, Clone)]
pub struct NoisePool {
    scenes: Vec<NoiseSource>,
    music: Vec<NoiseSource>,
    babble: Vec<NoiseSource>,
}

impl NoisePool {
    /// Every type needs at least one source, each at least one clip long.
    pub fn new(
        scenes: Vec<NoiseSource>,
        music: Vec<NoiseSource>,
        babble: Vec<NoiseSource>,
        sample_rate: u32,
    ) -> Result<NoisePool> {
        let need = clip_len(sample_rate);
        for (t, sources) in [
            (NoiseType::Scenes, &scenes),
            (NoiseType::Music, &music),
            (NoiseType::Babble, &babble),
        ] {
            if sources.is_empty() {
                return Err(AugmentError::EmptyNoiseType(t));
            }
            for s in sources.iter() {
                if s.samples.len() < need {
                    return Err(AugmentError::NoiseTooShort {
                        id: s.id.clone(),
                        have: s.samples.len(),
                        need,
                    });
                }
            }
        }
        Ok(NoisePool {
            scenes,
            music,
            babble,
        })
    }

    /// Build the babble sources from individual talker streams.
    pub fn with_babble_from_talkers(
        scenes: Vec<NoiseSource>,
        music: Vec<NoiseSource>,
        talker_streams: &[NoiseSource],
        babble_tracks: usize,
        talkers: usize,
        sample_rate: u32,
        seed: u64,
    ) -> Result<NoisePool> {
        let babble = (0..babble_tracks)
            .map(|k| {
                let s = crate::seed::derive_seed(seed, &["babble", &k.to_string()]);
                build_babble(format!("babble-{k:03}"), talker_streams, talkers, s)
            })
            .collect::<Result<Vec<_>>>()?;
        NoisePool::new(scenes, music, babble, sample_rate)
    }

    pub fn sources(&self, t: NoiseType) -> &[NoiseSource] {
        match t {
            NoiseType::Scenes => &self.scenes,
            NoiseType::Music => &self.music,
            NoiseType::Babble => &self.babble,
        }
    }

    pub fn find(&self, t: NoiseType, id: &str) -> Option<&NoiseSource> {
        self.sources(t).iter().find(|s| s.id == id)
    }
}

/// One word occurrence in a source recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: String,
    pub word: String,
    pub onset_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub sample_rate: u32,
    pub target_rms: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sample_rate: 16_000,
            target_rms: DEFAULT_TARGET_RMS,
        }
    }
}

/// A clip together with the components it was mixed from.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub clip: AudioClip,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
}

impl GeneratedClip {
    pub fn measured_snr_db(&self) -> f64 {
        measured_snr_db(&self.clean, &self.noise)
    }
}

/// Generate clip `clip_index` of `token`. Depends only on
/// `(global_seed, token_id, clip_index)` and the inputs, so any clip can be
/// regenerated in isolation.
pub fn generate_clip(
    token: &Token,
    source: &[f64],
    pool: &NoisePool,
    cfg: &AugmentConfig,
    global_seed: u64,
    clip_index: usize,
) -> Result<GeneratedClip> {
    let seed = clip_seed(global_seed, &token.token_id, clip_index);
    let mut rng = rng_from_seed(seed);
    let excerpt = excerpt_window(
        source,
        cfg.sample_rate,
        token.onset_s,
        token.duration_s,
        &mut rng,
    )?;
    let rms = mean_power(&excerpt.samples).sqrt();
    if rms <= 0.0 {
        return Err(AugmentError::SilentClean);
    }
    let scale = cfg.target_rms / rms;
    let clean: Vec<f64> = excerpt.samples.iter().map(|v| v * scale).collect();

    let noise_type = NoiseType::ALL[rng.random_range(0..NoiseType::ALL.len())];
    let sources = pool.sources(noise_type);
    if sources.is_empty() {
        return Err(AugmentError::EmptyNoiseType(noise_type));
    }
    let noise_src = &sources[rng.random_range(0..sources.len())];
    let snr_db = sample_snr(noise_type, &mut rng);
    let mix = mix_at_snr(&clean, &noise_src.samples, snr_db, &mut rng).map_err(|e| match e {
        AugmentError::NoiseTooShort { have, need, .. } => AugmentError::NoiseTooShort {
            id: noise_src.id.clone(),
            have,
            need,
        },
        other => other,
    })?;

    let spec = ClipSpec {
        token_id: token.token_id.clone(),
        word: token.word.clone(),
        clip_index: clip_index as u8,
        word_onset_in_clip: excerpt.word_onset_in_clip,
        word_duration: excerpt.word_duration,
        noise_type,
        noise_id: noise_src.id.clone(),
        noise_offset: mix.noise_offset,
        snr_db,
        clean_rms: cfg.target_rms,
        seed,
    };
    Ok(GeneratedClip {
        clip: AudioClip {
            samples: mix.mixture.iter().map(|&v| v as f32).collect(),
            sample_rate: cfg.sample_rate,
            spec,
        },
        clean: mix.clean,
        noise: mix.noise,
    })
}

/// All ten clips of a token.
pub fn augment_token(
    token: &Token,
    source: &[f64],
    pool: &NoisePool,
    cfg: &AugmentConfig,
    global_seed: u64,
) -> Result<Vec<GeneratedClip>> {
    (0..CLIPS_PER_TOKEN)
        .map(|i| generate_clip(token, source, pool, cfg, global_seed, i))
        .collect()
}
