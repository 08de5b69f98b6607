use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use jointex::commands::{self, DataPaths, RunConfig};
use jointex::formats::read_json;
use jointex_core::corpus::synth::SynthConfig;
use jointex_core::encoder::EncoderConfig;
use jointex_core::model::DecoderKind;
use jointex_core::trainer::TrainConfig;

#[derive(Parser)]
#[command(
    name = "jointex",
    version,
    about = "Joint entity and relation extraction from distantly supervised text"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted patterns and label noise.
    Synthesize(SynthArgs),
    /// Train a model, with self-adaptive selection unless disabled.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a corpus in quadruplet and triplet modes.
    Eval(EvalArgs),
    /// Dump attention, tag probabilities and logic distances for one instance.
    Inspect(InspectArgs),
    /// List patterns of a run with their average fitness.
    Patterns(PatternArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_sentences: Option<usize>,
    #[arg(long)]
    eval_sentences: Option<usize>,
    #[arg(long)]
    relation_noise: Option<f64>,
    #[arg(long)]
    entity_noise: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decoder {
    Crf,
    Fc,
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Directory written by `synthesize`; individual paths below override it.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Clean labels of the training sentences, for selection precision.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Run config (JSON, same shape as a run's config.json); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    decoder: Option<Decoder>,
    /// Drop the bag-of-words attention regularizer.
    #[arg(long)]
    no_br: bool,
    /// Drop the ontology logic penalty.
    #[arg(long)]
    no_olf: bool,
    /// Keep the first-loop subset instead of re-selecting each loop.
    #[arg(long)]
    no_sal: bool,
    /// Start from all instances instead of the pattern-based redistribution.
    #[arg(long)]
    no_idr: bool,
    /// Skip entity-selected negatives in later loops.
    #[arg(long)]
    no_es: bool,

    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_new_patterns: Option<usize>,
    #[arg(long)]
    top_percent: Option<f64>,
    #[arg(long)]
    first_loop_epochs: Option<usize>,
    #[arg(long)]
    later_loop_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_gain: Option<f64>,
    #[arg(long)]
    max_loops: Option<usize>,
    /// Clip the gradient norm per batch (off by default).
    #[arg(long)]
    clip_norm: Option<f64>,

    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Sentence id.
    #[arg(long)]
    sentence: String,
    /// Start position.
    #[arg(long, short)]
    p: usize,
}

#[derive(Args)]
struct PatternArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    json: bool,
    /// Only list patterns in the trusted set.
    #[arg(long)]
    trusted_only: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => {
            let dir = a.data.clone().unwrap_or_else(|| PathBuf::from("."));
            RunConfig {
                data: DataPaths::in_dir(&dir),
                model: EncoderConfig::default(),
                train: TrainConfig::default(),
            }
        }
    };
    if a.config.is_some() {
        if let Some(dir) = &a.data {
            cfg.data = DataPaths::in_dir(dir);
        }
    }
    set(&mut cfg.data.train, a.train.clone());
    set(&mut cfg.data.valid, a.valid.clone());
    set(&mut cfg.data.ontology, a.ontology.clone());
    set(&mut cfg.data.rules, a.rules.clone());
    if a.clean.is_some() {
        cfg.data.clean = a.clean.clone();
    }

    let t = &mut cfg.train;
    set(&mut t.seed, a.seed);
    set(
        &mut t.decoder,
        a.decoder.map(|d| match d {
            Decoder::Crf => DecoderKind::Crf,
            Decoder::Fc => DecoderKind::Fc,
        }),
    );
    t.use_br &= !a.no_br;
    t.use_olf &= !a.no_olf;
    t.use_sal &= !a.no_sal;
    t.use_idr &= !a.no_idr;
    t.use_es &= !a.no_es;
    set(&mut t.alpha, a.alpha);
    set(&mut t.beta, a.beta);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.dropout, a.dropout);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.tau, a.tau);
    set(&mut t.k_new_patterns, a.k_new_patterns);
    set(&mut t.top_percent, a.top_percent);
    set(&mut t.first_loop_epochs, a.first_loop_epochs);
    set(&mut t.later_loop_epochs, a.later_loop_epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.min_gain, a.min_gain);
    set(&mut t.max_loops, a.max_loops);
    if a.clip_norm.is_some() {
        t.clip_norm = a.clip_norm;
    }

    let m = &mut cfg.model;
    set(&mut m.d_model, a.d_model);
    set(&mut m.layers, a.layers);
    set(&mut m.heads, a.heads);
    set(&mut m.ffn, a.ffn);
    set(&mut m.max_len, a.max_len);
    m.dropout = cfg.train.dropout;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synthesize(a) => {
            let mut cfg = match &a.config {
                Some(p) => read_json::<SynthConfig>(p)?,
                None => SynthConfig::default(),
            };
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.n_sentences, a.n_sentences);
            set(&mut cfg.eval_sentences, a.eval_sentences);
            set(&mut cfg.relation_noise_rate, a.relation_noise);
            set(&mut cfg.entity_noise_rate, a.entity_noise);
            let s = commands::synthesize(&a.out, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let s = commands::train(&a.out, &cfg)?;
            println!(
                "{} loops, best loop {} with validation F1 {:.4}; run written to {}",
                s.loops,
                s.best_loop,
                s.best_valid.f1,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let out = commands::eval(&a.checkpoint, &a.corpus)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                print!("{}", commands::eval_table(&out));
            }
        }
        Command::Inspect(a) => {
            let dump = commands::inspect(&a.checkpoint, &a.corpus, &a.sentence, a.p)?;
            println!("{}", serde_json::to_string_pretty(&dump)?);
        }
        Command::Patterns(a) => {
            let mut rows = commands::patterns(&a.run)?;
            if a.trusted_only {
                rows.retain(|r| r.fitness.trusted);
            }
            if a.json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", commands::pattern_table(&rows));
            }
        }
    }
    Ok(())
}
