use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use duallex::lexicon::Lexicon;
use duallex::probes::{ProbeTask, Source};
use duallex::report::config::{Architecture, PipelineConfig};
use duallex::report::stages::{self, StageOutcome};
use duallex::synth::{build_corpus, demo_words, write_corpus, CorpusSpec};
use duallex::trainer::Task;

#[derive(Parser)]
#[command(name = "duallex", version, about = "Dorsal/ventral spoken-word networks and their probes")]
struct Cli {
    /// Pipeline config file.
    #[arg(short, long, global = true, default_value = "duallex.toml")]
    config: PathBuf,
    /// Override a config value, e.g. `--set dorsal.max_epochs=5`. Beats
    /// `DUALLEX_SECTION__KEY` environment variables, which beat the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut jittered noisy clips from the corpus and compute their cochleagrams.
    Prepare,
    /// Train the word (dorsal) or semantic-domain (ventral) network.
    Train {
        #[arg(long)]
        task: Task,
    },
    /// Extract penultimate-layer features for every clip.
    Extract(ExtractArgs),
    /// Fit and score a probe on extracted features.
    Probe {
        /// onset, syllable, animacy, concreteness or all.
        #[arg(long)]
        task: String,
        #[arg(long)]
        features: PathBuf,
    },
    /// Write metrics.json and the figures.
    Report,
    /// Re-check the lineage of every stage in the workdir.
    Verify,
    /// Run every stage in order.
    Run,
    /// Print the effective config after overrides.
    Config,
    /// Write a synthetic demo corpus and a small-scale config for it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Trained checkpoint; its task decides the feature source.
    #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Use a randomly initialised network instead (the control source).
    #[arg(long)]
    random_init: bool,
    /// Override the source name recorded with the features.
    #[arg(long)]
    source: Option<Source>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Minimum number of words in every probe class.
    #[arg(long, default_value_t = 2)]
    words_per_class: usize,
    #[arg(long, default_value_t = 2)]
    tokens_per_word: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(cli: &Cli) -> Result<PipelineConfig> {
    if !cli.config.exists() {
        bail!("config file {} does not exist (see `duallex synth` for a starting point)", cli.config.display());
    }
    Ok(PipelineConfig::load(&cli.config, std::env::vars(), &cli.sets)?)
}

fn show(o: &StageOutcome) {
    let state = if o.skipped { "skipped" } else { "done" };
    println!("{:<34} {:<8} {}", o.stage, state, o.summary);
}

fn probe_tasks(arg: &str) -> Result<Vec<ProbeTask>> {
    if arg == "all" {
        return Ok(ProbeTask::ALL.to_vec());
    }
    arg.parse::<ProbeTask>().map(|t| vec![t]).map_err(anyhow::Error::msg)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let lex = Lexicon::bundled();
    let words = demo_words(&lex, args.words_per_class, args.seed);
    let spec = CorpusSpec {
        tokens_per_word: args.tokens_per_word,
        seed: args.seed,
        ..CorpusSpec::default()
    };
    if spec.tokens_per_word < 2 {
        bail!("need at least 2 tokens per word for a train/validation split");
    }
    let corpus = build_corpus(&words, &spec);
    write_corpus(&args.out, &corpus, spec.sample_rate)?;

    let mut cfg = PipelineConfig::new(".", "work", args.seed);
    cfg.model.architecture = Architecture::Scaled;
    cfg.model.conv_widths = [8, 16, 16, 16, 16];
    cfg.model.dense_units = 64;
    for t in [&mut cfg.dorsal, &mut cfg.ventral] {
        t.batch_size = 16;
        t.learning_rate = 1e-3;
        t.max_epochs = 30;
        t.patience = 5;
    }
    // half of the smallest class, so whole words can go to each side
    let clips_per_word = spec.tokens_per_word * duallex::augment::CLIPS_PER_TOKEN;
    cfg.probe.exemplars_per_class = Some((args.words_per_class * clips_per_word / 2).max(2));
    let path = args.out.join("duallex.toml");
    std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} words x {} tokens written to {}; config in {}",
        words.len(),
        spec.tokens_per_word,
        args.out.display(),
        path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(args) => synth(args)?,
        Command::Config => print!("{}", load(cli)?.to_toml()),
        Command::Prepare => show(&stages::prepare(&load(cli)?)?),
        Command::Train { task } => show(&stages::train(&load(cli)?, *task)?),
        Command::Extract(a) => {
            let cfg = load(cli)?;
            let source = if a.random_init { Some(Source::RandomControl) } else { a.source };
            show(&stages::extract(&cfg, a.checkpoint.as_deref(), source)?);
        }
        Command::Probe { task, features } => {
            let cfg = load(cli)?;
            for t in probe_tasks(task)? {
                show(&stages::probe(&cfg, t, features)?);
            }
        }
        Command::Report => {
            let cfg = load(cli)?;
            let (o, m) = stages::report(&cfg)?;
            show(&o);
            for p in &m.probes {
                let r = &p.result;
                println!(
                    "  {:<14} {:<13} acc {:.3}  chance {:.3}  [{:.3}, {:.3}]",
                    r.source, r.task, r.accuracy, r.chance, p.chance_low, p.chance_high
                );
            }
        }
        Command::Verify => {
            let v = stages::verify(&load(cli)?)?;
            for p in &v.problems {
                println!("problem: {p}");
            }
            println!("{} stage(s) checked, {} problem(s)", v.stages.len(), v.problems.len());
            return Ok(v.problems.is_empty());
        }
        Command::Run => {
            for o in stages::run_all(&load(cli)?)? {
                show(&o);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
