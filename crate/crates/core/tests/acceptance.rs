//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one status line, even when it passes.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use duallex::augment::{augment_token, excerpt_window, generate_clip, sample_snr, AugmentConfig, ClipSpec, NoiseType};
use duallex::cochlea::{CochleaParams, Filterbank};
use duallex::lexicon::{Lexicon, OnsetClass};
use duallex::network::{
    Gradients, InputNorm, LayerKind, LayerSpec, Mode, Model, ModelConfig, Shape, Widths,
};
use duallex::probes::{assemble_balanced, fit_and_score, FeatureRecord, ProbeLabels, ProbeTask, TEST_FRACTION};
use duallex::report::config::PipelineConfig;
use duallex::report::stages::{cochleagram_path, input_norm, prepare, read_manifest, PREPARE};
use duallex::seed::rng_from_seed;
use duallex::synth::{build_corpus, random_word, write_corpus, CorpusSpec, SynthWord};
use duallex::trainer::{fit, EpochStats, Example, NetworkLoop, StopReason, StopRule, Task, TrainConfig, TrainLoop};

const SEED: u64 = 2024;
const TOY_WIDTHS: Widths = Widths {
    conv: [8, 16, 16, 16, 16],
    dense: 64,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- fixtures

/// One clip of the synthetic corpus with its cochleagram.
struct Clip {
    spec: ClipSpec,
    coch: Arc<Array2<f32>>,
    onset: OnsetClass,
    syllables: u8,
    word_index: usize,
}

/// 3 nonwords per onset class, 2 tokens each, 10 clips per token.
struct Corpus {
    clips: Vec<Clip>,
    words: Vec<String>,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let mut rng = rng_from_seed(SEED);
        let mut words = Vec::new();
        let mut meta = Vec::new();
        for (ci, &onset) in OnsetClass::ALL.iter().enumerate() {
            for j in 0..3 {
                let syl = 1 + (j % 2);
                words.push(SynthWord {
                    word: format!("w{ci}{j}"),
                    phones: random_word(onset, syl, &mut rng),
                });
                meta.push((onset, syl as u8));
            }
        }
        let spec = CorpusSpec {
            tokens_per_word: 2,
            seed: SEED,
            ..CorpusSpec::default()
        };
        let synth = build_corpus(&words, &spec);
        let pool = synth.noise_pool(spec.sample_rate, 4, 8, SEED).unwrap();
        let fb = Filterbank::new(CochleaParams::default()).unwrap();
        let cfg = AugmentConfig::default();
        let mut clips = Vec::new();
        for (token, audio) in &synth.recordings {
            let wi = words.iter().position(|w| w.word == token.word).unwrap();
            for g in augment_token(token, audio, &pool, &cfg, SEED).unwrap() {
                clips.push(Clip {
                    coch: Arc::new(fb.transform(&g.clip.samples).unwrap()),
                    spec: g.clip.spec,
                    onset: meta[wi].0,
                    syllables: meta[wi].1,
                    word_index: wi,
                });
            }
        }
        Corpus {
            clips,
            words: words.into_iter().map(|w| w.word).collect(),
        }
    })
}

fn examples(clips: &[&Clip], label: impl Fn(&Clip) -> usize) -> Vec<Example> {
    clips
        .iter()
        .map(|c| Example {
            x: c.coch.clone(),
            label: label(c),
            token_id: c.spec.token_id.clone(),
        })
        .collect()
}

fn toy_model(head: usize, seed: u64, data: &[Example]) -> Model {
    let cfg = ModelConfig::scaled((203, 400), TOY_WIDTHS, head).unwrap();
    let mut m = Model::new(cfg, seed).unwrap();
    m.set_input_norm(input_norm(data));
    m
}

/// Train on `data` and monitor the same set in eval mode.
fn train_toy(data: &[Example], head: usize, rule: StopRule, seed: u64) -> (Model, duallex::trainer::TrainRecord) {
    let mut cfg = TrainConfig::new(Task::Dorsal);
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    let mut lp = NetworkLoop::new(toy_model(head, seed, data), data, data, &cfg);
    fit(&mut lp, &rule).unwrap()
}

fn features(model: &Model, clips: &[Clip], labels: impl Fn(&Clip) -> ProbeLabels) -> Vec<FeatureRecord> {
    clips
        .iter()
        .map(|c| FeatureRecord {
            vector: model
                .penultimate_features(c.coch.view())
                .unwrap()
                .iter()
                .map(|&v| v as f32)
                .collect(),
            word: c.spec.word.clone(),
            token_id: c.spec.token_id.clone(),
            clip_index: c.spec.clip_index,
            labels: labels(c),
        })
        .collect()
}

fn word_labels(c: &Clip) -> ProbeLabels {
    ProbeLabels {
        onset: Some(c.onset),
        syllables: Some(c.syllables),
        ..ProbeLabels::default()
    }
}

/// Probe accuracy on an arbitrary labelling with a word-disjoint split.
fn probe(feats: &[FeatureRecord], classes: usize, label: impl Fn(&FeatureRecord) -> Option<usize>, per_class: usize, seed: u64) -> f64 {
    let names: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
    let set = assemble_balanced("acceptance", &names, feats, label, per_class, TEST_FRACTION, seed).unwrap();
    assert!(set.train_words.is_disjoint(&set.test_words));
    fit_and_score(feats, &set, "acceptance", "acceptance", seed).unwrap().accuracy
}

/// A written lexicon corpus prepared twice into separate workdirs.
struct Prepared {
    _dir: tempfile::TempDir,
    a: std::path::PathBuf,
    b: std::path::PathBuf,
}

fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let lex = Lexicon::bundled();
        let words: Vec<SynthWord> = lex.entries()[..5]
            .iter()
            .map(|e| SynthWord {
                word: e.word.clone(),
                phones: e.pronunciation.clone(),
            })
            .collect();
        let spec = CorpusSpec {
            seed: SEED,
            ..CorpusSpec::default()
        };
        let corpus = dir.path().join("corpus");
        write_corpus(&corpus, &build_corpus(&words, &spec), spec.sample_rate).unwrap();
        let mut out = Vec::new();
        for name in ["a", "b"] {
            let cfg = PipelineConfig::new(&corpus, dir.path().join(name), SEED);
            prepare(&cfg).unwrap();
            out.push(dir.path().join(name).join(PREPARE));
        }
        Prepared {
            b: out.pop().unwrap(),
            a: out.pop().unwrap(),
            _dir: dir,
        }
    })
}

// ---------------------------------------------------------------- criteria

fn shapes() -> Check {
    // reference table for a 203 x 400 input, (h, w, c)
    let table = [
        ("conv1", Shape::Map(68, 134, 96)),
        ("pool1", Shape::Map(34, 67, 96)),
        ("conv2", Shape::Map(17, 34, 256)),
        ("pool2", Shape::Map(9, 17, 256)),
        ("conv3", Shape::Map(9, 17, 512)),
        ("pool3", Shape::Map(5, 9, 512)),
        ("conv4", Shape::Map(5, 9, 1024)),
        ("conv5", Shape::Map(5, 9, 512)),
        ("pool4", Shape::Map(3, 5, 512)),
        ("dense1", Shape::Vector(4096)),
    ];
    let x = Array2::<f32>::zeros((203, 400));
    for head in [178, 10] {
        let model = Model::new(ModelConfig::canonical(head).map_err(|e| e.to_string())?, 1).map_err(|e| e.to_string())?;
        let got = model.layer_output_shapes(x.view()).map_err(|e| e.to_string())?;
        for (name, want) in table.iter().chain(&[("dense2", Shape::Vector(head))]) {
            let g = got.iter().find(|(n, _)| n == name).map(|(_, s)| *s);
            ensure(g == Some(*want), format!("head {head}: {name} is {g:?}, expected {want:?}"))?;
        }
        // noise and normalization layers keep the conv shape
        for w in got.windows(2) {
            if w[1].0.starts_with("gaus") || w[1].0.starts_with("norm") {
                ensure(w[0].1 == w[1].1, format!("{} changes shape", w[1].0))?;
            }
        }
    }
    Ok("all layers match for heads 178 and 10".into())
}

fn snr_fidelity() -> Check {
    let lex = Lexicon::bundled();
    let words: Vec<SynthWord> = lex.entries()[..10]
        .iter()
        .map(|e| SynthWord {
            word: e.word.clone(),
            phones: e.pronunciation.clone(),
        })
        .collect();
    let spec = CorpusSpec {
        seed: SEED,
        ..CorpusSpec::default()
    };
    let synth = build_corpus(&words, &spec);
    let pool = synth.noise_pool(spec.sample_rate, 4, 8, SEED).unwrap();
    let cfg = AugmentConfig::default();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for global in 0..5u64 {
        for (token, audio) in &synth.recordings {
            for i in 0..10 {
                let g = generate_clip(token, audio, &pool, &cfg, global, i).unwrap();
                // recompute from the stored components with an independent formula
                let p = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
                let snr = 10.0 * (p(&g.clean) / p(&g.noise)).log10();
                worst = worst.max((snr - g.clip.spec.snr_db).abs());
                n += 1;
            }
        }
    }
    ensure(n == 1000, format!("{n} mixes"))?;
    ensure(worst <= 0.05, format!("worst SNR error {worst:.4} dB"))?;

    let mut rng = rng_from_seed(SEED);
    let mut summary = Vec::new();
    for (t, mean) in [(NoiseType::Babble, 10.0), (NoiseType::Scenes, 7.0), (NoiseType::Music, 7.0)] {
        let draws: Vec<f64> = (0..100_000).map(|_| sample_snr(t, &mut rng)).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        ensure((m - mean).abs() <= 0.05, format!("{} mean {m:.4}", t.name()))?;
        ensure((sd - 2.0).abs() <= 0.05, format!("{} std {sd:.4}", t.name()))?;
        summary.push(format!("{} {m:.3}/{sd:.3}", t.name()));
    }
    Ok(format!("1000 mixes, worst error {worst:.2e} dB; {}", summary.join(", ")))
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

fn jitter() -> Check {
    let p = prepared();
    let manifest = read_manifest(&p.a).map_err(|e| e.to_string())?;
    let mut specs: Vec<&ClipSpec> = manifest.iter().collect();
    specs.extend(corpus().clips.iter().map(|c| &c.spec));
    let covered = specs
        .iter()
        .filter(|s| s.word_onset_in_clip <= 1.0 && s.word_onset_in_clip + s.word_duration >= 1.0)
        .count();
    ensure(covered == specs.len(), format!("{covered}/{} clips cover t = 1.0 s", specs.len()))?;

    // word of 0.5 s sitting at 1.0 s inside a 3 s recording
    let sr = 16_000;
    let source = vec![0.1; 3 * sr as usize];
    let mut rng = rng_from_seed(SEED);
    let mut onsets: Vec<f64> = (0..10_000)
        .map(|_| excerpt_window(&source, sr, 1.0, 0.5, &mut rng).unwrap().word_onset_in_clip)
        .collect();
    ensure(onsets.iter().all(|o| (0.5..=1.0).contains(o)), "onset outside [0.5, 1.0]")?;
    onsets.sort_by(f64::total_cmp);
    let n = onsets.len() as f64;
    let d = onsets
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let f = (o - 0.5) / 0.5;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let p_ks = ks_p_value(d, onsets.len());
    let bins = 20;
    let mut counts = vec![0usize; bins];
    for o in &onsets {
        counts[(((o - 0.5) / 0.5 * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let e = n / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p_chi = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    ensure(p_ks > 0.01, format!("KS p = {p_ks:.4}"))?;
    ensure(p_chi > 0.01, format!("chi-square p = {p_chi:.4}"))?;
    Ok(format!("{} clips cover the midpoint; KS p = {p_ks:.3}, chi-square p = {p_chi:.3}", specs.len()))
}

fn cochleagram_props() -> Check {
    let fb = Filterbank::new(CochleaParams::default()).map_err(|e| e.to_string())?;
    let p = prepared();
    let manifest = read_manifest(&p.a).map_err(|e| e.to_string())?;
    let mut n = 0;
    for s in &manifest {
        let c = duallex::store::read_cochleagram(&cochleagram_path(&p.a, s)).map_err(|e| e.to_string())?;
        ensure(c.shape() == (203, 400), format!("{} has shape {:?}", s.stem(), c.shape()))?;
        ensure(c.values.iter().all(|v| v.is_finite() && *v >= 0.0), format!("{} negative", s.stem()))?;
        n += 1;
    }
    for c in &corpus().clips {
        ensure(c.coch.dim() == (203, 400) && c.coch.iter().all(|v| *v >= 0.0), "in-memory clip")?;
        n += 1;
    }

    let silent = fb.transform_f64(&vec![0.0; 32_000]).map_err(|e| e.to_string())?;
    let loudest = silent.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ensure(loudest <= 1e-12, format!("silence gives {loudest:e}"))?;

    let mut rng = rng_from_seed(SEED);
    let x: Vec<f64> = (0..32_000).map(|_| rng.random_range(-0.3..0.3)).collect();
    let base = fb.transform_f64(&x).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for c in [0.25, 3.0, 10.0] {
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        let scaled = fb.transform_f64(&y).map_err(|e| e.to_string())?;
        let k = f64::powf(c, fb.params().compression);
        for (u, v) in base.iter().zip(&scaled) {
            let want = k * u;
            if want > 0.0 {
                worst = worst.max((v - want).abs() / want);
            } else {
                ensure(*v == 0.0, "zero output became non-zero after scaling")?;
            }
        }
    }
    ensure(worst <= 1e-6, format!("homogeneity error {worst:e}"))?;

    // tone selectivity: the peak channel is the one tuned nearest the tone
    let cf = fb.center_freqs().to_vec();
    let erb = |f: f64| 21.4 * (1.0 + 0.00437 * f).log10();
    for f in [250.0, 700.0, 1500.0, 3000.0, 6000.0] {
        let tone: Vec<f64> = (0..32_000)
            .map(|i| 0.1 * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
            .collect();
        let out = fb.transform_f64(&tone).map_err(|e| e.to_string())?;
        let means: Vec<f64> = out.rows().into_iter().map(|r| r.mean().unwrap()).collect();
        let peak = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        let nearest = (0..cf.len())
            .min_by(|&a, &b| (erb(cf[a]) - erb(f)).abs().total_cmp(&(erb(cf[b]) - erb(f)).abs()))
            .unwrap();
        ensure(peak.abs_diff(nearest) <= 1, format!("{f} Hz peaks in channel {peak}, nearest is {nearest}"))?;
        // one ERB away on either side the response has dropped
        for side in [-1.0, 1.0] {
            let target = erb(f) + side * 1.5;
            if let Some(j) = (0..cf.len()).find(|&j| (erb(cf[j]) - target).abs() < 0.1) {
                ensure(means[j] < 0.8 * means[peak], format!("{f} Hz: weak selectivity at channel {j}"))?;
            }
        }
    }
    Ok(format!("{n} clips valid; silence max {loudest:.1e}; homogeneity error {worst:.1e}; 5 tones selective"))
}

/// Replays a fixed validation-loss sequence; the snapshot is the epoch number.
struct Stub {
    losses: Vec<f64>,
    epoch: usize,
}

impl TrainLoop for Stub {
    type Snapshot = usize;
    fn run_epoch(&mut self, epoch: usize) -> duallex::trainer::Result<EpochStats> {
        self.epoch = epoch;
        let v = self.losses[epoch - 1];
        Ok(EpochStats {
            train_loss: v,
            train_acc: 0.5,
            val_loss: v,
            val_acc: 0.5,
        })
    }
    fn snapshot(&self) -> usize {
        self.epoch
    }
}

/// Straightforward restatement of the stopping rule: (stop epoch, best epoch).
fn oracle_stop(losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, &l) in losses.iter().take(max_epochs).enumerate() {
        if l < best.0 {
            best = (l, i + 1);
        }
        if i + 1 - best.1 >= patience {
            return (i + 1, best.1);
        }
    }
    (max_epochs.min(losses.len()), best.1)
}

fn early_stopping() -> Check {
    let rule = StopRule {
        max_epochs: 100,
        patience: 10,
        min_delta: 0.0,
        stop_at_train_accuracy: None,
    };
    let run = |losses: Vec<f64>| {
        let mut s = Stub { losses, epoch: 0 };
        fit(&mut s, &rule).unwrap()
    };
    // minimum at epoch 4, then ten epochs that never beat it (one tie)
    let mut seq = vec![1.0, 0.8, 0.9, 0.7];
    seq.extend([0.75, 0.7, 0.9, 0.8, 0.71, 0.72, 0.73, 0.74, 0.75, 0.76]);
    seq.extend([0.1; 20]);
    let (snap, rec) = run(seq);
    ensure(rec.stopped_epoch == 14 && rec.best_epoch == 4 && snap == 4, format!("stopped {} best {} snapshot {snap}", rec.stopped_epoch, rec.best_epoch))?;
    ensure(rec.stop_reason == StopReason::Patience, "stop reason")?;

    // an improvement on the tenth epoch resets the counter
    let mut seq = vec![1.0];
    seq.extend([1.5; 9]);
    seq.push(0.5);
    seq.extend([0.6; 10]);
    seq.extend([0.01; 5]);
    let (snap, rec) = run(seq);
    ensure(rec.stopped_epoch == 21 && snap == 11, format!("reset case stopped {} snapshot {snap}", rec.stopped_epoch))?;

    let mut rng = rng_from_seed(SEED);
    for _ in 0..500 {
        let seq: Vec<f64> = (0..100).map(|_| rng.random_range(0..50) as f64 / 10.0).collect();
        let (snap, rec) = run(seq.clone());
        let (stop, best) = oracle_stop(&seq, 10, 100);
        ensure(
            rec.stopped_epoch == stop && snap == best && rec.best_epoch == best,
            format!("random sequence: got ({}, {snap}), oracle ({stop}, {best})", rec.stopped_epoch),
        )?;
    }
    ensure(StopRule::default().patience == 10, "default patience")?;
    Ok("stops after exactly 10 non-improving epochs and restores the argmin epoch (2 fixed + 500 random sequences)".into())
}

fn overfit() -> Check {
    // 10 words: the first two of each onset class
    let c = corpus();
    let keep: Vec<&Clip> = c.clips.iter().filter(|k| k.word_index % 3 < 2).collect();
    ensure(keep.len() == 200, format!("{} clips", keep.len()))?;
    let mut index: Vec<usize> = keep.iter().map(|k| k.word_index).collect();
    index.sort();
    index.dedup();
    let data = examples(&keep, |k| index.iter().position(|&w| w == k.word_index).unwrap());
    let rule = StopRule {
        max_epochs: 200,
        patience: 200,
        min_delta: 0.0,
        stop_at_train_accuracy: Some(0.99),
    };
    let start = Instant::now();
    let (_, rec) = train_toy(&data, 10, rule, SEED);
    let last = rec.epochs.last().unwrap();
    ensure(
        last.train_acc >= 0.99,
        format!("training accuracy {:.3} after {} epochs", last.train_acc, rec.stopped_epoch),
    )?;
    Ok(format!(
        "training accuracy {:.3} at epoch {} ({:.0} s)",
        last.train_acc,
        rec.stopped_epoch,
        start.elapsed().as_secs_f64()
    ))
}

/// Exact two-sided 95% binomial interval of accuracy under chance.
fn chance_band(p: f64, n: usize) -> (f64, f64) {
    let b = Binomial::new(p, n as u64).unwrap();
    (b.inverse_cdf(0.025) as f64 / n as f64, b.inverse_cdf(0.975) as f64 / n as f64)
}

fn chance_control() -> Check {
    let c = corpus();
    let model = toy_model(5, SEED + 7, &examples(&c.clips.iter().collect::<Vec<_>>(), |_| 0));
    let base = features(&model, &c.clips, |_| ProbeLabels::default());
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (task, per_class) in [
        (ProbeTask::Onset, 50),
        (ProbeTask::Syllable, 60),
        (ProbeTask::Animacy, 100),
        (ProbeTask::Concreteness, 100),
    ] {
        // balanced labels dealt to clips at random
        let k = task.n_classes();
        let mut labels: Vec<usize> = (0..base.len()).map(|i| i % k).collect();
        labels.shuffle(&mut rng_from_seed(SEED ^ k as u64));
        let mut feats = base.clone();
        for (r, &l) in feats.iter_mut().zip(&labels) {
            r.labels = match task {
                ProbeTask::Onset => ProbeLabels { onset: Some(OnsetClass::ALL[l]), ..Default::default() },
                ProbeTask::Syllable => ProbeLabels { syllables: Some(l as u8 + 1), ..Default::default() },
                ProbeTask::Animacy => ProbeLabels {
                    animacy: Some([duallex::lexicon::Animacy::Animate, duallex::lexicon::Animacy::Inanimate][l]),
                    ..Default::default()
                },
                ProbeTask::Concreteness => ProbeLabels {
                    concreteness: Some([duallex::lexicon::Concreteness::Abstract, duallex::lexicon::Concreteness::Concrete][l]),
                    ..Default::default()
                },
            };
        }
        let r = duallex::probes::run_probe(task, duallex::probes::Source::RandomControl, &feats, per_class, SEED)
            .map_err(|e| e.to_string())?;
        let (lo, hi) = chance_band(1.0 / k as f64, r.n_test);
        lines.push(format!("{} {:.3} in [{lo:.3}, {hi:.3}]", task.name(), r.accuracy));
        if r.accuracy < lo || r.accuracy > hi {
            failures.push(task.name());
        }
    }
    ensure(failures.is_empty(), format!("outside the chance band: {failures:?}; {}", lines.join(", ")))?;
    Ok(lines.join(", "))
}

fn signal() -> Check {
    let c = corpus();
    let all: Vec<&Clip> = c.clips.iter().collect();
    let data = examples(&all, |k| k.onset.index());
    let rule = StopRule {
        max_epochs: 40,
        patience: 10,
        min_delta: 1e-4,
        stop_at_train_accuracy: None,
    };
    let (model, rec) = train_toy(&data, 5, rule, SEED + 1);
    let feats = features(&model, &c.clips, word_labels);
    let accs: Vec<f64> = (0..3)
        .map(|s| probe(&feats, 5, |r| r.labels.onset.map(|o| o.index()), 40, SEED + s))
        .collect();
    let min = accs.iter().cloned().fold(1.0, f64::min);
    let detail = format!(
        "onset probe on held-out words {:?} (network best epoch {})",
        accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
        rec.best_epoch
    );
    ensure(min >= 0.9, detail.clone())?;
    Ok(detail)
}

fn determinism() -> Check {
    let p = prepared();
    let ma = std::fs::read(p.a.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let mb = std::fs::read(p.b.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    ensure(ma == mb, "manifests differ")?;
    let manifest = read_manifest(&p.a).map_err(|e| e.to_string())?;
    for s in &manifest {
        let a = std::fs::read(cochleagram_path(&p.a, s)).map_err(|e| e.to_string())?;
        let b = std::fs::read(cochleagram_path(&p.b, s)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("cochleagram {} differs", s.stem()))?;
    }

    let c = corpus();
    let cfg = ModelConfig::scaled((203, 400), TOY_WIDTHS, 10).unwrap();
    let m1 = Model::new(cfg.clone(), 9).unwrap();
    let m2 = Model::new(cfg, 9).unwrap();
    for clip in c.clips.iter().step_by(37) {
        let a = m1.forward(clip.coch.view()).unwrap();
        let b = m1.forward(clip.coch.view()).unwrap();
        let d = m2.forward(clip.coch.view()).unwrap();
        let same = |x: &ndarray::Array1<f64>, y: &ndarray::Array1<f64>| x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits());
        ensure(same(&a, &b) && same(&a, &d), "eval forward passes differ")?;
        let fa = m1.penultimate_features(clip.coch.view()).unwrap();
        let fb = m2.penultimate_features(clip.coch.view()).unwrap();
        ensure(same(&fa, &fb), "penultimate features differ")?;
    }
    Ok(format!("{} manifest rows and cochleagrams bit-identical; eval forwards bit-identical", manifest.len()))
}

fn directional() -> Check {
    let c = corpus();
    let all: Vec<&Clip> = c.clips.iter().collect();
    // a 4-way class that cuts across onset classes
    let class_of = |k: &Clip| k.word_index % 4;
    let rule = StopRule {
        max_epochs: 30,
        patience: 10,
        min_delta: 1e-4,
        stop_at_train_accuracy: None,
    };
    let (identity, _) = train_toy(&examples(&all, |k| k.word_index), c.words.len(), rule, SEED + 2);
    let (class, _) = train_toy(&examples(&all, class_of), 4, rule, SEED + 3);
    let labels = |k: &Clip| ProbeLabels {
        // the class rides in the syllable slot; probes below read it back
        syllables: Some(class_of(k) as u8 + 1),
        ..word_labels(k)
    };
    let fi = features(&identity, &c.clips, labels);
    let fc = features(&class, &c.clips, labels);
    let form = |f: &[FeatureRecord]| probe(f, 5, |r| r.labels.onset.map(|o| o.index()), 40, SEED);
    // class membership of unseen words is arbitrary, so hold out tokens instead
    let by_token = |f: &[FeatureRecord]| {
        let f: Vec<FeatureRecord> = f.iter().cloned().map(|mut r| {
            r.word = r.token_id.clone();
            r
        }).collect();
        probe(&f, 4, |r| r.labels.syllables.map(|s| s as usize - 1), 40, SEED)
    };
    let (fi_form, fc_form) = (form(&fi), form(&fc));
    let (fi_class, fc_class) = (by_token(&fi), by_token(&fc));
    let pattern = fi_form > fc_form && fc_class > fi_class;
    Ok(format!(
        "form probe identity {fi_form:.3} vs class {fc_form:.3}; class probe identity {fi_class:.3} vs class {fc_class:.3}; pattern {}",
        if pattern { "reproduced" } else { "not reproduced" }
    ))
}

fn micro_net() -> ModelConfig {
    use LayerKind::*;
    ModelConfig {
        input: (12, 14),
        layers: vec![
            LayerSpec::new("conv1", Conv { filters: 4, kernel: 3, stride: 1 }, None),
            LayerSpec::new("gaus1", GaussianNoise { std: 0.1 }, None),
            LayerSpec::new("norm1", Lrn { radius: 2, k: 2.0, alpha: 0.1, beta: 0.75 }, None),
            LayerSpec::new("pool1", MaxPool { window: 3, stride: 2 }, None),
            LayerSpec::new("conv2", Conv { filters: 5, kernel: 3, stride: 1 }, None),
            LayerSpec::new("gaus2", GaussianNoise { std: 0.1 }, None),
            LayerSpec::new("norm2", Lrn { radius: 2, k: 2.0, alpha: 0.1, beta: 0.75 }, None),
            LayerSpec::new("pool2", MeanPool { window: 3, stride: 2 }, None),
            LayerSpec::new("dense1", Dense { units: 7, relu: true }, None),
            LayerSpec::new("dropout", Dropout { rate: 0.1 }, None),
            LayerSpec::new("dense2", Dense { units: 4, relu: false }, None),
            LayerSpec::new("softmax", Softmax, None),
        ],
        head_size: 4,
        input_norm: InputNorm::default(),
    }
}

fn gradient_check() -> Check {
    let model = Model::new(micro_net(), SEED).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(SEED);
    let x = Array2::from_shape_simple_fn((12, 14), || rng.random_range(0.0f32..1.0));
    let label = 2;
    let loss = |m: &Model| {
        let mut g = Gradients::zeros_for(m);
        m.accumulate_gradient(x.view(), label, Mode::Eval, &mut g).unwrap().0
    };
    let mut grads = Gradients::zeros_for(&model);
    model.accumulate_gradient(x.view(), label, Mode::Eval, &mut grads).unwrap();
    let eps = 1e-6;
    let (mut checked, mut tries, mut worst) = (0, 0, 0.0f64);
    while checked < 20 {
        tries += 1;
        ensure(tries < 10_000, "could not find 20 parameters with a gradient")?;
        let slot = rng.random_range(0..model.params().len());
        let bias = rng.random_bool(0.25);
        let n = if bias { model.params()[slot].bias.len() } else { model.params()[slot].weight.len() };
        let i = rng.random_range(0..n);
        let nudge = |m: &mut Model, d: f64| {
            let p = &mut m.params_mut()[slot];
            if bias {
                p.bias[i] += d;
            } else {
                let cols = p.weight.ncols();
                p.weight[[i / cols, i % cols]] += d;
            }
        };
        let analytic = if bias {
            grads.0[slot].bias[i]
        } else {
            let cols = grads.0[slot].weight.ncols();
            grads.0[slot].weight[[i / cols, i % cols]]
        };
        if analytic.abs() < 1e-7 {
            // dead unit; nothing to compare
            continue;
        }
        let (mut plus, mut minus) = (model.clone(), model.clone());
        nudge(&mut plus, eps);
        nudge(&mut minus, -eps);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    ensure(worst < 1e-3, format!("worst relative error {worst:e}"))?;
    Ok(format!("20 parameters, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [(u8, &str, bool, fn() -> Check); 11] = [
        (1, "shape conformance", true, shapes),
        (2, "SNR fidelity", true, snr_fidelity),
        (3, "jitter invariant", true, jitter),
        (4, "cochleagram properties", true, cochleagram_props),
        (5, "early stopping", true, early_stopping),
        (6, "overfit oracle", true, overfit),
        (7, "probe chance control", true, chance_control),
        (8, "probe signal oracle", true, signal),
        (9, "determinism", true, determinism),
        (10, "directional smoke", false, directional),
        (11, "gradient check", true, gradient_check),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, gating, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match (&outcome, gating) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("LOGGED", d.clone()),
            (Err(d), true) => ("FAIL", d.clone()),
            (Err(d), false) => ("LOGGED", format!("did not run: {d}")),
        };
        println!("criterion {n:>2} {name:<24} {status:<6} [{secs:>6.1} s] {detail}");
        if status == "FAIL" {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criterion(s) failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all gating criteria passed");
}

