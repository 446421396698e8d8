use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use siamese_ctc::data::{generate_to, load_corpus, CorpusSpec};
use siamese_ctc::eval::{histogram_csv, traces_csv, write_json};
use siamese_ctc::exec::Execution;
use siamese_ctc::gradsuite;
use siamese_ctc::train::{analyze_split, load_for_eval, preset, preset_names, train, Analysis, ExperimentConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "siamctc", version, about = "Siamese CTC training on synthetic sequence data")]
struct Cli {
    /// Run on one thread even when built with the parallel feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenData),
    /// Train a model and write checkpoint.bin, config.txt, train.jsonl and timing.jsonl.
    Train(TrainArgs),
    /// Decode a split with dropout off and report error rates.
    Evaluate(EvalArgs),
    /// Spike histogram, traces and alignment/uniformity for a split.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks; fails if any suite exceeds 1e-5.
    Gradcheck,
    /// List the experiment presets.
    Presets,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Per-utterance prototype perturbation.
    #[arg(long)]
    proto_noise: Option<f64>,
    /// Per-frame noise on token frames.
    #[arg(long)]
    frame_noise: Option<f64>,
    /// Utterances per split as train,dev,test.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any other corpus field, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Baseline")]
    preset: String,
    /// key=value file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single overrides applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_dropout1: Option<u64>,
    #[arg(long)]
    seed_dropout2: Option<u64>,
    #[arg(long)]
    seed_data: Option<u64>,
    /// Skip decoding the dev split after each epoch.
    #[arg(long)]
    no_dev_eval: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    hist_bins: usize,
    /// Directory for report.json, histogram.csv and traces.csv.
    #[arg(long)]
    out: PathBuf,
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = CorpusSpec::default();
    let flags = [
        ("vocab", a.vocab.map(|v| v.to_string())),
        ("feature_dim", a.feature_dim.map(|v| v.to_string())),
        ("proto_noise", a.proto_noise.map(|v| v.to_string())),
        ("frame_noise", a.frame_noise.map(|v| v.to_string())),
        ("counts", a.counts),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            spec.set(k, &v)?;
        }
    }
    for s in &a.sets {
        let (k, v) = split_kv(s)?;
        spec.set(k, v)?;
    }
    let corpus = generate_to(&spec, &a.out)?;
    for (name, utts) in &corpus.splits {
        println!("{name}: {} utterances", utts.len());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn experiment(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for s in &a.sets {
        let (k, v) = split_kv(s)?;
        cfg.set(k, v)?;
    }
    let s = &mut cfg.seeds;
    for (slot, v) in [
        (&mut s.init, a.seed_init),
        (&mut s.dropout1, a.seed_dropout1),
        (&mut s.dropout2, a.seed_dropout2),
        (&mut s.data, a.seed_data),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let cfg = experiment(&a)?;
    let corpus = load_corpus(&a.corpus)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        exec,
        max_steps: a.max_steps,
        eval_dev: !a.no_dev_eval,
    };
    let out = train(cfg, &corpus, &opts)?;
    if let Some(e) = out.error {
        bail!("training stopped: {e} (see {})", a.out.join("train.jsonl").display());
    }
    if let Some(r) = out.reports.last() {
        println!("steps: {}", r.step);
        println!("final l_total: {:.6}", r.loss.l_total);
    }
    if let Some(d) = out.dev_error_rates.last() {
        println!("dev error rate: {d:.4}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn analysis(checkpoint: &Path, corpus: &Path, split: &str, bins: usize, exec: Execution) -> Result<Analysis> {
    let (cfg, model) = load_for_eval(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    if corpus.spec.feature_dim != model.config.input_dim || corpus.spec.vocab != model.config.vocab {
        bail!("corpus dimensions do not match the checkpoint's model");
    }
    Ok(analyze_split(&cfg, &model, corpus.split(split)?, bins, exec)?)
}

fn evaluate(a: EvalArgs, exec: Execution) -> Result<()> {
    let r = analysis(&a.checkpoint, &a.corpus, &a.split, 10, exec)?;
    match &a.report {
        Some(path) => {
            write_json(path, &r.scalars)?;
            println!("cer: {:.4}", r.scalars.cer);
            println!("wrote {}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&r.scalars)?),
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs, exec: Execution) -> Result<()> {
    let r = analysis(&a.checkpoint, &a.corpus, &a.split, a.hist_bins, exec)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &r.scalars)?;
    std::fs::write(a.out.join("histogram.csv"), histogram_csv(&r.histogram))?;
    std::fs::write(a.out.join("traces.csv"), traces_csv(&r.traces))?;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    println!("cer: {:.4}", r.scalars.cer);
    println!("spikes: {}", r.histogram.total_spikes);
    println!("spike mass >= 0.9: {}", opt(r.scalars.spike_mass_090));
    println!("alignment: {}", opt(r.scalars.alignment));
    println!("uniformity: {}", opt(r.scalars.uniformity));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck() -> Result<()> {
    let mut failed = Vec::new();
    for r in gradsuite::run_all()? {
        let ok = r.max_rel_error < 1e-5;
        println!(
            "{:<20} checks {:>5}  max rel error {:.3e}  {}",
            r.name,
            r.checks,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, exec),
        Command::Evaluate(a) => evaluate(a, exec),
        Command::Analyze(a) => analyze(a, exec),
        Command::Gradcheck => gradcheck(),
        Command::Presets => {
            preset_names().iter().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
