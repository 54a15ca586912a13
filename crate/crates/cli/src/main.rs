//! `attend-affect`: synthesize corpora, train and evaluate valence models,
//! and run the gradient and human-agreement checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attend_affect::dataset::{generate_synthetic, load_corpus, save_corpus, split_by_target, Partition, Split, SynthConfig};
use attend_affect::embedder::GateKind;
use attend_affect::metrics::{mean, std_dev, top_changes};
use attend_affect::models::{build_model, gradcheck_model, model_check_options, Model, ModelConfig, ModelKind};
use attend_affect::trainer::{evaluate, train, TrainConfig, TrainHistory};
use attend_affect::transformer::PositionalMode;
use attend_affect::windowing::WindowPlan;
use attend_affect::{Error, ErrorKind, ModalitySet};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "attend-affect", version, about = "Multimodal valence regression toolkit")]
struct Cli {
    /// TOML file with [synth], [model] and [train] tables; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Partition a corpus by target into train/val/test.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one partition.
    Eval(EvalArgs),
    /// Per-window predictions for one clip.
    Predict(PredictArgs),
    /// Finite-difference gradient checks for every model kind.
    Gradcheck(GradcheckArgs),
    /// Leave-one-out observer agreement per clip.
    BenchHuman(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    clips_per_target: Option<usize>,
    /// Mean clip length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    duration_jitter: Option<f64>,
    #[arg(long)]
    observers: Option<usize>,
    #[arg(long)]
    observer_noise: Option<f64>,
    #[arg(long)]
    observer_lag: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    /// Use the original extractor widths (1000/88/300).
    #[arg(long)]
    paper_dims: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, validation and test proportions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Checkpoint path; the history is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    positional: Option<PositionalArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PositionalArg {
    None,
    Sinusoidal,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "test")]
    partition: String,
    /// Add the leave-one-out human benchmark column.
    #[arg(long)]
    human: bool,
    /// Report path (JSON); a text table is written alongside with `.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    clip: String,
    /// Append the K largest window-to-window changes.
    #[arg(long)]
    top_changes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ModelSection {
    kind: Option<ModelKind>,
    modalities: Option<ModalitySet>,
    preset: Preset,
    positional: Option<PositionalMode>,
    gate: Option<GateKind>,
    causal: Option<bool>,
    n_blocks: Option<usize>,
    n_heads: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    synth: SynthConfig,
    model: ModelSection,
    train: TrainConfig,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, Error> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn comment_block(config: &serde_json::Value) -> String {
    format!("# config: {config}\n")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_synth(a: SynthArgs, file: FileConfig) -> Result<(), Error> {
    let mut cfg = file.synth;
    if let Some(v) = a.targets {
        cfg.targets = v;
    }
    if let Some(v) = a.clips_per_target {
        cfg.clips_per_target = v;
    }
    if let Some(v) = a.duration {
        cfg.duration_mean = v;
    }
    if let Some(v) = a.duration_jitter {
        cfg.duration_jitter = v;
    }
    if let Some(v) = a.observers {
        cfg.observers = v;
    }
    if let Some(v) = a.observer_noise {
        cfg.observer_noise = v;
    }
    if let Some(v) = a.observer_lag {
        cfg.observer_lag = v;
    }
    if let Some(v) = a.feature_noise {
        cfg.feature_noise = v;
    }
    if a.paper_dims {
        cfg.dims = SynthConfig::paper_dims();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = generate_synthetic(&cfg)?;
    save_corpus(&corpus, &a.out)?;
    eprintln!("wrote {} clips to {}", corpus.clips.len(), a.out.display());
    Ok(())
}

fn run_split(a: SplitArgs) -> Result<(), Error> {
    let corpus = load_corpus(&a.corpus)?;
    let ratios = [a.ratios[0], a.ratios[1], a.ratios[2]];
    let split = split_by_target(&corpus, ratios, a.seed)?;
    split.save(&a.out)?;
    eprintln!(
        "targets: {} train, {} val, {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    config: serde_json::Value,
    history: &'a TrainHistory,
}

fn run_train(a: TrainArgs, file: FileConfig) -> Result<(), Error> {
    let corpus = load_corpus(&a.corpus)?;
    let split = Split::load(&a.split)?;
    let section = file.model;
    let kind = match a.model {
        Some(s) => s.parse()?,
        None => section.kind.unwrap_or(ModelKind::Mft),
    };
    let modalities = match a.modalities {
        Some(s) => s.parse()?,
        None => section.modalities.unwrap_or_else(ModalitySet::all),
    };
    let preset = a.preset.unwrap_or(section.preset);
    let dims = corpus.meta.dims.clone();
    let mut mc = match preset {
        Preset::Desk => ModelConfig::desk(kind, modalities, dims),
        Preset::Paper => ModelConfig::paper(kind, modalities, dims),
    };
    if let Some(p) = section.positional {
        mc.positional = p;
    }
    if let Some(p) = a.positional {
        mc.positional = match p {
            PositionalArg::None => PositionalMode::None,
            PositionalArg::Sinusoidal => PositionalMode::Sinusoidal,
        };
    }
    if let Some(g) = section.gate {
        mc.gate = g;
    }
    if let Some(c) = section.causal {
        mc.causal = c;
    }
    if let Some(n) = section.n_blocks {
        mc.n_blocks = n;
    }
    if let Some(n) = section.n_heads {
        mc.n_heads = n;
    }
    let mut tc = file.train;
    if let Some(s) = section.seed {
        mc.seed = s;
        tc.seed = s;
    }
    if let Some(s) = a.seed {
        mc.seed = s;
        tc.seed = s;
    }
    if let Some(v) = a.epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.clip_norm {
        tc.clip_norm = v;
    }
    if a.time_budget.is_some() {
        tc.time_budget = a.time_budget;
    }

    let mut plan = WindowPlan::default();
    let train_clips = split.clips(&corpus, Partition::Train);
    plan.fit(train_clips.iter().map(|c| (&c.streams, c.duration)), mc.kernel)?;
    mc.window = plan;

    let mut model = build_model(mc)?;
    let mut history = train(&mut model, &corpus, &split, &tc)?;
    history.checkpoint = Some(a.out.display().to_string());
    model.save(&a.out)?;
    let artifact = TrainArtifact {
        config: json!({ "model": model.config, "train": tc, "split": split }),
        history: &history,
    };
    write_file(&with_suffix(&a.out, ".history.json"), &to_json(&artifact))?;
    eprintln!(
        "{} {}: best validation CCC {:.4} at epoch {} ({})",
        model.kind(),
        model.config.modalities,
        history.best_val_ccc,
        history.best_epoch,
        history.stop_reason
    );
    Ok(())
}

fn load_history(checkpoint: &Path) -> Result<Option<TrainHistory>, Error> {
    let path = with_suffix(checkpoint, ".history.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_value(v["history"].clone())
        .map(Some)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn run_eval(a: EvalArgs) -> Result<(), Error> {
    let model = Model::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let split = Split::load(&a.split)?;
    let partition: Partition = a.partition.parse()?;
    let history = load_history(&a.checkpoint)?;
    let mut report = evaluate(&model, &corpus, &split, partition, history.as_ref())?;
    if a.human {
        let human = report
            .clip_ids
            .iter()
            .map(|id| corpus.clip(id).expect("evaluated clip exists").human_benchmark())
            .collect::<Result<Vec<_>, _>>()?;
        report.human = Some(human);
    }
    report.config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "model": model.config,
        "split": split,
        "partition": partition,
        "human": a.human,
    });
    let text = report.to_text();
    match a.out {
        Some(path) => {
            write_file(&path, &to_json(&report))?;
            write_file(&path.with_extension("txt"), &text)?;
        }
        None => print!("{text}"),
    }
    eprintln!("{} {} {}: CCC {:.4} ± {:.4}", report.split, report.model, report.modalities, report.mean, report.std);
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<(), Error> {
    let model = Model::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let clip = corpus
        .clip(&a.clip)
        .ok_or_else(|| Error::Data(format!("no clip '{}' in {}", a.clip, a.corpus.display())))?;
    let pred = model.predict_clip(&clip.streams, clip.duration)?;
    let config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "clip": a.clip,
        "top_changes": a.top_changes,
        "model": model.config,
    });
    let mut out = comment_block(&config);
    out.push_str("window,start_s,value\n");
    for (i, v) in pred.values.iter().enumerate() {
        out.push_str(&format!("{i},{},{v}\n", pred.timestamp(i)));
    }
    if let Some(k) = a.top_changes {
        out.push_str("\nrank,window,start_s,delta\n");
        for (rank, (w, d)) in top_changes(&pred.values, k)?.into_iter().enumerate() {
            out.push_str(&format!("{},{w},{},{d}\n", rank + 1, pred.timestamp(w)));
        }
    }
    match a.out {
        Some(path) => write_file(&path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn run_gradcheck(a: GradcheckArgs) -> Result<(), Error> {
    println!("{}", comment_block(&json!({ "seed": a.seed, "seeds": a.seeds, "tolerance": a.tolerance })).trim_end());
    let mut worst_overall: f64 = 0.0;
    for kind in ModelKind::ALL {
        let mut worst: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for seed in a.seed..a.seed + a.seeds {
            let r = gradcheck_model(kind, ModalitySet::all(), seed, &model_check_options(seed))?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped_nonsmooth;
        }
        println!("{kind}: max rel. err {worst:.3e} over {checked} coordinates ({skipped} at branch points skipped)");
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall < a.tolerance {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check breach: {worst_overall:.3e} >= {:.1e}",
            a.tolerance
        )))
    }
}

fn run_bench(a: BenchArgs) -> Result<(), Error> {
    let corpus = load_corpus(&a.corpus)?;
    let mut out = comment_block(&json!({ "corpus": a.corpus.display().to_string(), "provenance": corpus.provenance() }));
    out.push_str("clip_id,human\n");
    let mut values = Vec::with_capacity(corpus.clips.len());
    for c in &corpus.clips {
        let h = c.human_benchmark()?;
        out.push_str(&format!("{},{h}\n", c.id));
        values.push(h);
    }
    out.push_str(&format!("mean,{}\nstd,{}\n", mean(&values), std_dev(&values)));
    match a.out {
        Some(path) => write_file(&path, &out)?,
        None => print!("{out}"),
    }
    eprintln!("human benchmark {:.4} ± {:.4}", mean(&values), std_dev(&values));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => run_synth(a, file),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a, file),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::BenchHuman(a) => run_bench(a),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
