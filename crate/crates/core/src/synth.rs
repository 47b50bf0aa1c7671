//! Small formant synthesizer for synthetic corpora.
//!
//! Produces speech-like audio from ARPAbet phones (voiced formant vowels,
//! band-noise fricatives, closure-plus-burst stops, low-formant nasals),
//! plus scene, music and talker noise. Used to build demo corpora and test
//! fixtures; it is not meant to sound natural.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{NoisePool, NoiseSource, Token};
use crate::lexicon::{Lexicon, Manner, OnsetClass, Phone};
use crate::seed::{rng_for, PipelineRng};
use crate::wav::{self, WavError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0: f64,
    pub formant_scale: f64,
    /// Speaking rate multiplier; > 1 is faster.
    pub rate: f64,
}

impl Speaker {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Speaker {
        Speaker {
            f0: rng.random_range(90.0..220.0),
            formant_scale: rng.random_range(0.88..1.15),
            rate: rng.random_range(0.85..1.2),
        }
    }
}

impl Default for Speaker {
    fn default() -> Self {
        Speaker {
            f0: 120.0,
            formant_scale: 1.0,
            rate: 1.0,
        }
    }
}

fn vowel_formants(symbol: &str) -> [f64; 3] {
    match symbol {
        "IY" => [270.0, 2290.0, 3010.0],
        "IH" => [390.0, 1990.0, 2550.0],
        "EH" => [530.0, 1840.0, 2480.0],
        "EY" => [480.0, 2090.0, 2600.0],
        "AE" => [660.0, 1720.0, 2410.0],
        "AA" => [730.0, 1090.0, 2440.0],
        "AO" => [570.0, 840.0, 2410.0],
        "AW" => [700.0, 1100.0, 2400.0],
        "AY" => [650.0, 1500.0, 2500.0],
        "OW" => [500.0, 900.0, 2400.0],
        "OY" => [550.0, 1000.0, 2450.0],
        "UH" => [440.0, 1020.0, 2240.0],
        "UW" => [300.0, 870.0, 2240.0],
        "ER" => [490.0, 1350.0, 1690.0],
        "W" => [300.0, 700.0, 2200.0],
        "Y" => [260.0, 2200.0, 3000.0],
        "L" => [360.0, 1300.0, 2700.0],
        "R" => [310.0, 1060.0, 1380.0],
        // AH and anything unlisted
        _ => [640.0, 1190.0, 2390.0],
    }
}

/// Center frequency of frication or burst noise.
fn noise_center(symbol: &str) -> f64 {
    match symbol {
        "S" | "Z" => 6000.0,
        "SH" | "ZH" | "CH" | "JH" => 3000.0,
        "F" | "V" => 4500.0,
        "TH" | "DH" => 5200.0,
        "HH" => 1500.0,
        "P" | "B" => 900.0,
        "T" | "D" => 4000.0,
        "K" | "G" => 2000.0,
        _ => 2500.0,
    }
}

fn is_voiced(symbol: &str) -> bool {
    matches!(symbol, "B" | "D" | "G" | "V" | "DH" | "Z" | "ZH" | "JH")
}

/// Two-pole resonator with unit peak gain.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Resonator {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq.min(sr * 0.45) / sr;
        Resonator {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn glottal(n: usize, f0: f64, sr: f64, phase: &mut f64) -> Vec<f64> {
    let mut lp = 0.0;
    (0..n)
        .map(|_| {
            *phase = (*phase + f0 / sr).fract();
            let saw = 1.0 - 2.0 * *phase;
            lp += 0.3 * (saw - lp);
            lp
        })
        .collect()
}

fn formant_filter(src: &[f64], formants: [f64; 3], scale: f64, sr: f64) -> Vec<f64> {
    let amps = [1.0, 0.6, 0.3];
    let bws = [80.0, 110.0, 160.0];
    let mut out = vec![0.0; src.len()];
    for k in 0..3 {
        let mut r = Resonator::new(formants[k] * scale, bws[k], sr);
        for (o, &x) in out.iter_mut().zip(src) {
            *o += amps[k] * r.step(x);
        }
    }
    out
}

fn band_noise<R: Rng + ?Sized>(n: usize, center: f64, bandwidth: f64, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut r = Resonator::new(center, bandwidth, sr);
    (0..n)
        .map(|_| r.step(StandardNormal.sample(rng)))
        .collect()
}

fn ramp(x: &mut [f64], sr: f64) {
    let m = ((0.005 * sr) as usize).min(x.len() / 2);
    for i in 0..m {
        let g = i as f64 / m as f64;
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn secs(s: f64, speaker: &Speaker, sr: f64) -> usize {
    (s / speaker.rate * sr).round() as usize
}

/// Audio for one phone.
pub fn synthesize_phone<R: Rng + ?Sized>(phone: &Phone, speaker: &Speaker, sr: u32, rng: &mut R) -> Vec<f64> {
    let sr_f = sr as f64;
    let sym = phone.symbol.as_str();
    let mut phase = rng.random::<f64>();
    let voiced_part = |n: usize, formants: [f64; 3], phase: &mut f64| {
        let src = glottal(n, speaker.f0, sr_f, phase);
        let mut v = formant_filter(&src, formants, speaker.formant_scale, sr_f);
        normalize_rms(&mut v, 1.0);
        v
    };
    let mut out = match phone.manner {
        Manner::Vowel => voiced_part(secs(0.13, speaker, sr_f), vowel_formants(sym), &mut phase),
        Manner::Glide | Manner::Liquid => {
            let mut v = voiced_part(secs(0.07, speaker, sr_f), vowel_formants(sym), &mut phase);
            v.iter_mut().for_each(|s| *s *= 0.6);
            v
        }
        Manner::Nasal => {
            let f2 = match sym {
                "M" => 1100.0,
                "N" => 1700.0,
                _ => 2300.0,
            };
            let mut v = voiced_part(secs(0.08, speaker, sr_f), [250.0, f2, 2700.0], &mut phase);
            // nasal murmur is dominated by the low resonance
            let mut lp = 0.0;
            v.iter_mut().for_each(|s| {
                lp += 0.15 * (*s - lp);
                *s = 0.7 * lp;
            });
            v
        }
        Manner::Fricative => {
            let n = secs(0.11, speaker, sr_f);
            let bw = if sym == "HH" { 2000.0 } else { 1500.0 };
            let mut v = band_noise(n, noise_center(sym), bw, sr_f, rng);
            normalize_rms(&mut v, if matches!(sym, "S" | "SH" | "Z" | "ZH") { 0.6 } else { 0.3 });
            if is_voiced(sym) {
                let buzz = voiced_part(n, [250.0, 1200.0, 2500.0], &mut phase);
                v.iter_mut().zip(&buzz).for_each(|(a, b)| *a += 0.2 * b);
            }
            v
        }
        Manner::Stop | Manner::Affricate => {
            let closure = secs(0.05, speaker, sr_f);
            let burst = secs(0.015, speaker, sr_f);
            let frication = if phone.manner == Manner::Affricate {
                secs(0.07, speaker, sr_f)
            } else {
                secs(0.025, speaker, sr_f)
            };
            let mut v = vec![0.0; closure];
            if is_voiced(sym) {
                let buzz = voiced_part(closure, [200.0, 800.0, 2500.0], &mut phase);
                v.iter_mut().zip(&buzz).for_each(|(a, b)| *a = 0.08 * b);
            }
            let mut b = band_noise(burst, noise_center(sym), 3000.0, sr_f, rng);
            normalize_rms(&mut b, 1.0);
            v.extend(b);
            let mut f = band_noise(frication, noise_center(sym), 2000.0, sr_f, rng);
            normalize_rms(&mut f, 0.3);
            v.extend(f);
            v
        }
    };
    ramp(&mut out, sr_f);
    out
}

/// Concatenate phone renditions into one word.
pub fn synthesize_word<R: Rng + ?Sized>(phones: &[Phone], speaker: &Speaker, sr: u32, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    for p in phones {
        out.extend(synthesize_phone(p, speaker, sr, rng));
    }
    normalize_rms(&mut out, 0.1);
    out
}

fn phones(symbols: &[&str]) -> Vec<Phone> {
    symbols.iter().map(|s| Phone::parse(s).expect("valid ARPAbet")).collect()
}

const VOWELS: [&str; 12] = ["AA", "AE", "AH", "AO", "EH", "ER", "EY", "IH", "IY", "OW", "UH", "UW"];
const CONSONANTS: [&str; 17] = [
    "P", "B", "T", "D", "K", "G", "F", "V", "S", "Z", "SH", "M", "N", "L", "R", "W", "Y",
];

fn onset_inventory(class: OnsetClass) -> &'static [&'static str] {
    match class {
        OnsetClass::Fricative => &["F", "V", "S", "Z", "SH", "TH", "HH"],
        OnsetClass::Nasal => &["M", "N"],
        OnsetClass::Stop => &["P", "B", "T", "D", "K", "G", "CH", "JH"],
        OnsetClass::Liquid => &["L", "R"],
        OnsetClass::VowelGlide => &["W", "Y", "AA", "AE", "IY", "OW", "UW"],
    }
}

/// A random pronounceable nonword: CV syllables with an optional coda,
/// starting with a phone from the given onset class.
pub fn random_word<R: Rng + ?Sized>(onset: OnsetClass, syllables: usize, rng: &mut R) -> Vec<Phone> {
    let pick = |set: &[&'static str], rng: &mut R| set[rng.random_range(0..set.len())];
    let mut out = Vec::new();
    let first = pick(onset_inventory(onset), rng);
    out.push(first);
    for s in 0..syllables.max(1) {
        if s > 0 {
            out.push(pick(&CONSONANTS, rng));
        }
        if s > 0 || Manner::of_arpabet(first) != Some(Manner::Vowel) {
            out.push(pick(&VOWELS, rng));
        }
    }
    if rng.random_bool(0.5) {
        out.push(pick(&CONSONANTS[..13], rng));
    }
    phones(&out)
}

fn random_filler<R: Rng + ?Sized>(rng: &mut R) -> Vec<Phone> {
    let onset = OnsetClass::ALL[rng.random_range(0..5)];
    let syl = rng.random_range(1..3);
    random_word(onset, syl, rng)
}

/// A short recording: filler words, the target word, filler words.
/// Returns the audio and the target's (onset, duration) in seconds.
pub fn synthesize_utterance<R: Rng + ?Sized>(
    target: &[Phone],
    speaker: &Speaker,
    sr: u32,
    rng: &mut R,
) -> (Vec<f64>, f64, f64) {
    let sr_f = sr as f64;
    let mut out = Vec::new();
    let gap = |rng: &mut R| vec![0.0; (rng.random_range(0.03..0.12) * sr_f) as usize];
    let leading = rng.random_range(2..4);
    for _ in 0..leading {
        out.extend(synthesize_word(&random_filler(rng), speaker, sr, rng));
        out.extend(gap(rng));
    }
    let onset = out.len() as f64 / sr_f;
    let word = synthesize_word(target, speaker, sr, rng);
    let duration = word.len() as f64 / sr_f;
    out.extend(word);
    for _ in 0..rng.random_range(2..4) {
        out.extend(gap(rng));
        out.extend(synthesize_word(&random_filler(rng), speaker, sr, rng));
    }
    (out, onset, duration)
}

/// Filtered noise with a slow random amplitude contour and sparse clicks.
pub fn scene_noise<R: Rng + ?Sized>(n: usize, sr: u32, rng: &mut R) -> Vec<f64> {
    let sr_f = sr as f64;
    let mut lp = 0.0;
    let alpha = rng.random_range(0.02..0.3);
    let mod_rate = rng.random_range(0.2..2.0);
    let mod_phase = rng.random_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = StandardNormal.sample(rng);
            lp += alpha * (w - lp);
            let t = i as f64 / sr_f;
            lp * (1.0 + 0.5 * (2.0 * PI * mod_rate * t + mod_phase).sin())
        })
        .collect();
    let clicks = (n as f64 / sr_f * 2.0) as usize;
    for _ in 0..clicks {
        let at = rng.random_range(0..n);
        let len = (0.01 * sr_f) as usize;
        for k in 0..len.min(n - at) {
            let z: f64 = StandardNormal.sample(rng);
            out[at + k] += 3.0 * (-(k as f64) / (0.002 * sr_f)).exp() * z;
        }
    }
    normalize_rms(&mut out, 0.1);
    out
}

/// Harmonic notes from a pentatonic scale with decaying envelopes.
pub fn music_noise<R: Rng + ?Sized>(n: usize, sr: u32, rng: &mut R) -> Vec<f64> {
    let sr_f = sr as f64;
    let scale = [0, 2, 4, 7, 9];
    let base = rng.random_range(110.0..220.0);
    let tempo = rng.random_range(0.15..0.4);
    let mut out = vec![0.0; n];
    let mut t0 = 0usize;
    while t0 < n {
        let len = ((tempo * sr_f) as usize).max(1);
        let semis = scale[rng.random_range(0..5)] + 12 * rng.random_range(0..2);
        let f = base * 2f64.powf(semis as f64 / 12.0);
        for k in 0..(2 * len).min(n - t0) {
            let t = k as f64 / sr_f;
            let env = (-t / (tempo * 0.8)).exp();
            let mut s = 0.0;
            for h in 1..=5 {
                s += (2.0 * PI * f * h as f64 * t).sin() / h as f64;
            }
            out[t0 + k] += env * s;
        }
        t0 += len;
    }
    normalize_rms(&mut out, 0.1);
    out
}

/// Continuous nonword speech from a single random speaker.
pub fn talker_stream<R: Rng + ?Sized>(n: usize, sr: u32, rng: &mut R) -> Vec<f64> {
    let speaker = Speaker::random(rng);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        out.extend(synthesize_word(&random_filler(rng), &speaker, sr, rng));
        out.extend(vec![0.0; (rng.random_range(0.02..0.08) * sr as f64) as usize]);
    }
    out.truncate(n);
    out
}

/// A word of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWord {
    pub word: String,
    pub phones: Vec<Phone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub tokens_per_word: usize,
    pub sample_rate: u32,
    pub noise_files: usize,
    pub noise_seconds: f64,
    pub talkers: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            tokens_per_word: 2,
            sample_rate: 16_000,
            noise_files: 2,
            noise_seconds: 6.0,
            talkers: 8,
            seed: 0,
        }
    }
}

/// In-memory synthetic corpus: one recording per token.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub recordings: Vec<(Token, Vec<f64>)>,
    pub scenes: Vec<Vec<f64>>,
    pub music: Vec<Vec<f64>>,
    pub talkers: Vec<Vec<f64>>,
}

impl SynthCorpus {
    /// Noise pool with babble tracks mixed from the talker streams.
    pub fn noise_pool(&self, sample_rate: u32, babble_tracks: usize, talkers: usize, seed: u64) -> crate::augment::Result<NoisePool> {
        let wrap = |kind: &str, xs: &[Vec<f64>]| -> Vec<NoiseSource> {
            xs.iter()
                .enumerate()
                .map(|(i, x)| NoiseSource::new(format!("{kind}_{i:02}"), x.clone()))
                .collect()
        };
        NoisePool::with_babble_from_talkers(
            wrap("scenes", &self.scenes),
            wrap("music", &self.music),
            &wrap("talkers", &self.talkers),
            babble_tracks,
            talkers,
            sample_rate,
            seed,
        )
    }
}

/// Lexicon words for a demo corpus: at least `words_per_class` words in every
/// class of every probe task (where the lexicon has that many), chosen in a
/// seeded order. Pronunciations come from the lexicon.
pub fn demo_words(lex: &Lexicon, words_per_class: usize, seed: u64) -> Vec<SynthWord> {
    use crate::probes::{ProbeLabels, ProbeTask};
    use rand::seq::SliceRandom;
    let mut entries: Vec<_> = lex.entries().iter().collect();
    entries.shuffle(&mut rng_for(seed, &["demo-words"]));
    let labels: Vec<ProbeLabels> = entries.iter().map(|e| ProbeLabels::of_entry(e)).collect();
    let mut need: Vec<Vec<usize>> = ProbeTask::ALL
        .iter()
        .map(|&t| {
            (0..t.n_classes())
                .map(|c| {
                    let have = labels.iter().filter(|l| t.label_of(l) == Some(c)).count();
                    words_per_class.min(have)
                })
                .collect()
        })
        .collect();
    let mut chosen = Vec::new();
    for (e, l) in entries.iter().zip(&labels) {
        let mut useful = false;
        for (ti, t) in ProbeTask::ALL.iter().enumerate() {
            if let Some(c) = t.label_of(l) {
                if need[ti][c] > 0 {
                    useful = true;
                }
            }
        }
        if !useful {
            continue;
        }
        for (ti, t) in ProbeTask::ALL.iter().enumerate() {
            if let Some(c) = t.label_of(l) {
                need[ti][c] = need[ti][c].saturating_sub(1);
            }
        }
        chosen.push(SynthWord {
            word: e.word.clone(),
            phones: e.pronunciation.clone(),
        });
        if need.iter().flatten().all(|&n| n == 0) {
            break;
        }
    }
    chosen.sort_by(|a, b| a.word.cmp(&b.word));
    chosen
}

pub fn token_id(word: &str, k: usize) -> String {
    format!("{word}-{k:03}")
}

/// Each token is spoken by its own random speaker.
pub fn build_corpus(words: &[SynthWord], spec: &CorpusSpec) -> SynthCorpus {
    let sr = spec.sample_rate;
    let mut recordings = Vec::new();
    for w in words {
        for k in 0..spec.tokens_per_word {
            let id = token_id(&w.word, k);
            let mut rng: PipelineRng = rng_for(spec.seed, &["synth", &id]);
            let speaker = Speaker::random(&mut rng);
            let (audio, onset, duration) = synthesize_utterance(&w.phones, &speaker, sr, &mut rng);
            recordings.push((
                Token {
                    token_id: id,
                    word: w.word.clone(),
                    onset_s: onset,
                    duration_s: duration,
                },
                audio,
            ));
        }
    }
    let n = (spec.noise_seconds * sr as f64) as usize;
    let make = |kind: &str, count: usize, f: &dyn Fn(&mut PipelineRng) -> Vec<f64>| -> Vec<Vec<f64>> {
        (0..count)
            .map(|i| f(&mut rng_for(spec.seed, &["synth-noise", kind, &i.to_string()])))
            .collect()
    };
    SynthCorpus {
        recordings,
        scenes: make("scene", spec.noise_files, &|r| scene_noise(n, sr, r)),
        music: make("music", spec.noise_files, &|r| music_noise(n, sr, r)),
        talkers: make("talker", spec.talkers, &|r| talker_stream(n, sr, r)),
    }
}

/// Write a corpus in the layout the pipeline reads:
/// `tokens.tsv`, `audio/*.wav`, `noise/{scenes,music,talkers}/*.wav`.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus, sample_rate: u32) -> Result<(), WavError> {
    let mk = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| WavError::Invalid {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    mk(&dir.join("audio"))?;
    let mut tsv = String::from("token_id\tword\taudio\tonset_s\tduration_s\n");
    for (tok, audio) in &corpus.recordings {
        let rel = format!("audio/{}.wav", tok.token_id);
        wav::write_i16(dir.join(&rel), audio, sample_rate)?;
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            tok.token_id, tok.word, rel, tok.onset_s, tok.duration_s
        ));
    }
    for (sub, items) in [("scenes", &corpus.scenes), ("music", &corpus.music), ("talkers", &corpus.talkers)] {
        let d = dir.join("noise").join(sub);
        mk(&d)?;
        for (i, x) in items.iter().enumerate() {
            wav::write_i16(d.join(format!("{sub}_{i:02}.wav")), x, sample_rate)?;
        }
    }
    std::fs::write(dir.join("tokens.tsv"), tsv).map_err(|e| WavError::Invalid {
        path: dir.join("tokens.tsv").display().to_string(),
        message: e.to_string(),
    })
}
