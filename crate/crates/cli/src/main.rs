//! Experiment CLI: synthetic data generation, two-stage training,
//! evaluation under random-view attacks, ablations, and report aggregation.
//!
//! Every run writes `config_resolved.json` with the effective parameters;
//! feeding that file back through `--config` reproduces the run bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use evimix::attack::LossTarget;
use evimix::checkpoint::{Checkpoint, Stage};
use evimix::data::{generate_synthetic, load_dataset, write_dataset, SyntheticSpec};
use evimix::pipeline::{
    assemble_report, evaluate, pooled_uncertainty_histogram, pretrain, run_experiment, train,
    AblationFlags, EpochLoss, ExperimentConfig, RunRecord, RunReport,
};
use evimix::Error;

#[derive(Parser)]
#[command(name = "evimix", version, about = "Evidential multi-view classification under view adversarial attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset (manifest + CSVs).
    Synth(SynthArgs),
    /// Stage 1: perturbation-insensitive pretraining of the evidence extractor.
    Pretrain(RunArgs),
    /// Stage 2: disentangled training on top of a pretrain checkpoint.
    Train(TrainArgs),
    /// Evaluate a trained model and write the run report.
    Eval(EvalArgs),
    /// Run ablations end to end (one report per flag set).
    Ablate(AblateArgs),
    /// Aggregate run reports into a Markdown table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "out/synth")]
    out_dir: PathBuf,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Comma-separated per-view dimensions, e.g. 20,20,20.
    #[arg(long, value_delimiter = ',', default_value = "20,20,20")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 2.0)]
    class_separation: f64,
    /// Comma-separated per-view noise levels; a single value is broadcast.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    view_noise: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Config file plus flag overrides shared by the training commands.
#[derive(Args, Clone)]
struct ConfigOpts {
    /// JSON config file (an `ExperimentConfig` or a `config_resolved.json`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    train_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    anneal_epochs: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated seeds, one per run.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    attack_steps: Option<usize>,
    #[arg(long)]
    attack_step_size: Option<f64>,
    /// Number of views attacked per instance during training.
    #[arg(long)]
    attack_views: Option<usize>,
    /// Attack objective: pretrained_extractor or full_model.
    #[arg(long)]
    loss_target: Option<String>,
    /// Comma-separated attacked-view counts evaluated by `eval`.
    #[arg(long, value_delimiter = ',')]
    eval_attacked_views: Option<Vec<usize>>,
    /// Components to disable, e.g. disentangle,attention.
    #[arg(long, value_delimiter = ',')]
    disable: Option<Vec<String>>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value = "run")]
    run_name: String,
    #[command(flatten)]
    config: ConfigOpts,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Pretrain checkpoint directory or single checkpoint file.
    #[arg(long)]
    pretrain_checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Model checkpoint directory or single checkpoint file.
    #[arg(long)]
    model_checkpoint: PathBuf,
    /// Attacked-view counts to evaluate (defaults to 0..=V).
    #[arg(long, value_delimiter = ',')]
    attacked_views: Option<Vec<usize>>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Run the full suite: the complete model plus each single-component ablation.
    #[arg(long)]
    suite: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run-report JSON files to aggregate.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "report.md")]
    out: PathBuf,
}

/// Written to every run directory; accepted back through `--config`.
#[derive(Serialize, Deserialize)]
struct ResolvedInvocation {
    config: ExperimentConfig,
    ablation: AblationFlags,
}

/// Files created by this invocation; removed if the command fails.
struct ArtifactTracker {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl ArtifactTracker {
    fn new() -> Self {
        ArtifactTracker {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn write(&mut self, path: &Path, contents: &str) -> Result<(), Error> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.paths.push(path.to_path_buf());
        Ok(())
    }

    fn track(&mut self, path: PathBuf) {
        self.paths.push(path);
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for ArtifactTracker {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn worker_threads() -> usize {
    std::env::var("EVIMIX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

fn resolve_config(opts: &ConfigOpts) -> Result<(ExperimentConfig, AblationFlags), Error> {
    let (mut config, mut flags) = match &opts.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            if let Ok(resolved) = serde_json::from_str::<ResolvedInvocation>(&text) {
                (resolved.config, resolved.ablation)
            } else {
                let config: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                (config, AblationFlags::default())
            }
        }
        None => (ExperimentConfig::default(), AblationFlags::default()),
    };

    if let Some(v) = opts.gamma1 {
        config.gamma1 = v;
    }
    if let Some(v) = opts.gamma2 {
        config.gamma2 = v;
    }
    if let Some(v) = opts.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = opts.pretrain_epochs {
        config.pretrain_epochs = v;
    }
    if let Some(v) = opts.train_epochs {
        config.train_epochs = Some(v);
    }
    if let Some(v) = opts.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = opts.anneal_epochs {
        config.anneal_epochs = v;
    }
    if let Some(v) = opts.temperature {
        config.temperature = v;
    }
    if let Some(v) = opts.train_fraction {
        config.train_fraction = v;
    }
    if let Some(v) = opts.runs {
        config.runs = v;
        if opts.seeds.is_none() && config.seeds.len() != v {
            config.seeds = (1..=v as u64).collect();
        }
    }
    if let Some(v) = &opts.seeds {
        config.seeds = v.clone();
        if opts.runs.is_none() {
            config.runs = v.len();
        }
    }
    if let Some(v) = opts.epsilon {
        config.attack.epsilon = v;
    }
    if let Some(v) = opts.attack_steps {
        config.attack.steps = v;
    }
    if let Some(v) = opts.attack_step_size {
        config.attack.step_size = Some(v);
    }
    if let Some(v) = opts.attack_views {
        config.attack.views_to_attack = v;
    }
    if let Some(v) = &opts.loss_target {
        config.attack.loss_target = match v.as_str() {
            "pretrained_extractor" => LossTarget::PretrainedExtractor,
            "full_model" => LossTarget::FullModel,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss target {other:?}; expected pretrained_extractor or full_model"
                )))
            }
        };
    }
    if let Some(v) = &opts.eval_attacked_views {
        config.eval_attacked_views = Some(v.clone());
    }
    if let Some(names) = &opts.disable {
        for name in names {
            flags.disable_by_name(name)?;
        }
    }
    config.validate()?;
    Ok((config, flags))
}

fn run_dir(args: &RunArgs) -> PathBuf {
    args.out_dir.join(&args.run_name)
}

fn write_resolved(
    tracker: &mut ArtifactTracker,
    dir: &Path,
    config: &ExperimentConfig,
    flags: &AblationFlags,
) -> Result<(), Error> {
    let resolved = ResolvedInvocation {
        config: config.clone(),
        ablation: flags.clone(),
    };
    let json = serde_json::to_string_pretty(&resolved).map_err(|e| Error::Serde(e.to_string()))?;
    tracker.write(&dir.join("config_resolved.json"), &json)
}

fn curves_csv(curve: &[EpochLoss]) -> String {
    let mut out =
        String::from("epoch,fused,per_view,consistency,disentanglement,recalibration,total\n");
    for e in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.fused, e.per_view, e.consistency, e.disentanglement, e.recalibration, e.total
        ));
    }
    out
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let noise = if args.view_noise.len() == 1 {
        vec![args.view_noise[0]; args.views]
    } else {
        args.view_noise.clone()
    };
    let spec = SyntheticSpec {
        views: args.views,
        classes: args.classes,
        dims: args.dims.clone(),
        instances: args.n,
        class_separation: args.class_separation,
        view_noise: noise,
        seed: args.seed,
    };
    let batch = generate_synthetic::<f64>(&spec)?;
    let manifest_path = write_dataset(&args.out_dir, &args.name, &batch)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_pretrain(args: &RunArgs) -> Result<(), Error> {
    let (config, flags) = resolve_config(&args.config)?;
    let dataset = load_dataset::<f64>(&args.manifest)?;
    let dir = run_dir(args);
    let mut tracker = ArtifactTracker::new();
    write_resolved(&mut tracker, &dir, &config, &flags)?;

    for &seed in &config.seeds {
        let idx = evimix::data::split_indices(&dataset.batch, config.train_fraction, seed)?;
        let train_raw = dataset.batch.subset(&idx.train);
        let norm = evimix::data::Normalizer::fit(&train_raw);
        let train_batch = norm.apply(&train_raw, false);
        let (networks, curve) = pretrain(&config, &train_batch, seed, &flags)?;
        let ckpt = Checkpoint::from_networks(&networks, Stage::Pretrain, seed);
        let path = dir.join("checkpoints").join(format!("pretrain_seed{seed}.json"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        ckpt.save(&path)?;
        tracker.track(path.clone());
        tracker.write(
            &dir.join("curves").join(format!("pretrain_loss_seed{seed}.csv")),
            &curves_csv(&curve),
        )?;
        println!("pretrained seed {seed} -> {}", path.display());
    }
    tracker.commit();
    Ok(())
}

fn checkpoint_for_seed(base: &Path, prefix: &str, seed: u64) -> Result<Checkpoint, Error> {
    let path = if base.is_dir() {
        base.join(format!("{prefix}_seed{seed}.json"))
    } else {
        base.to_path_buf()
    };
    Checkpoint::load(&path)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let (config, flags) = resolve_config(&args.base.config)?;
    let dataset = load_dataset::<f64>(&args.base.manifest)?;
    let dir = run_dir(&args.base);
    let mut tracker = ArtifactTracker::new();
    write_resolved(&mut tracker, &dir, &config, &flags)?;

    for &seed in &config.seeds {
        let ckpt = checkpoint_for_seed(&args.pretrain_checkpoint, "pretrain", seed)?;
        if ckpt.header.stage != Stage::Pretrain {
            return Err(Error::Config(format!(
                "checkpoint for seed {seed} is not a pretrain checkpoint"
            )));
        }
        let pretrained = ckpt.to_networks::<f64>()?;
        let idx = evimix::data::split_indices(&dataset.batch, config.train_fraction, seed)?;
        let train_raw = dataset.batch.subset(&idx.train);
        let norm = evimix::data::Normalizer::fit(&train_raw);
        let train_batch = norm.apply(&train_raw, false);
        let (networks, curve) = train(&config, &pretrained, &train_batch, seed, &flags)?;
        let model = Checkpoint::from_networks(&networks, Stage::Train, seed);
        let path = dir.join("checkpoints").join(format!("model_seed{seed}.json"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        model.save(&path)?;
        tracker.track(path.clone());
        tracker.write(
            &dir.join("curves").join(format!("loss_seed{seed}.csv")),
            &curves_csv(&curve),
        )?;
        println!("trained seed {seed} -> {}", path.display());
    }
    tracker.commit();
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let (mut config, flags) = resolve_config(&args.base.config)?;
    if let Some(views) = &args.attacked_views {
        config.eval_attacked_views = Some(views.clone());
    }
    let dataset = load_dataset::<f64>(&args.base.manifest)?;
    let dir = run_dir(&args.base);
    let mut tracker = ArtifactTracker::new();
    write_resolved(&mut tracker, &dir, &config, &flags)?;

    let mut records = Vec::new();
    for &seed in &config.seeds {
        let ckpt = checkpoint_for_seed(&args.model_checkpoint, "model", seed)?;
        let networks = ckpt.to_networks::<f64>()?;
        let idx = evimix::data::split_indices(&dataset.batch, config.train_fraction, seed)?;
        let train_raw = dataset.batch.subset(&idx.train);
        let test_raw = dataset.batch.subset(&idx.test);
        let norm = evimix::data::Normalizer::fit(&train_raw);
        let test_batch = norm.apply(&test_raw, true);
        let counts: Vec<usize> = config
            .eval_attacked_views
            .clone()
            .unwrap_or_else(|| (0..=dataset.batch.num_views()).collect());
        let eval = evaluate(&config, &networks, &test_batch, &counts, seed, &flags)?;

        let mut attacked = BTreeMap::new();
        let mut mean_u = BTreeMap::new();
        let mut per_view_acc = BTreeMap::new();
        let mut uncertainties = BTreeMap::new();
        for (&a, slice) in &eval.slices {
            attacked.insert(a, slice.accuracy);
            mean_u.insert(a, slice.mean_uncertainty);
            per_view_acc.insert(a, slice.per_view_accuracy.clone());
            uncertainties.insert(a, slice.uncertainties.clone());
        }
        records.push(RunRecord {
            seed,
            clean_acc: eval.clean_accuracy().unwrap_or(f64::NAN),
            attacked,
            mean_u,
            per_view_acc,
            uncertainties,
        });
    }
    let report = assemble_report(&config, &flags, &args.base.run_name, &dataset.manifest.name, records);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    tracker.write(&dir.join("reports").join("report.json"), &json)?;
    let hist = pooled_uncertainty_histogram(&report.runs, 20);
    let mut csv = String::from("a,bin_left,bin_right,density\n");
    for (a, left, right, density) in hist {
        csv.push_str(&format!("{a},{left},{right},{density}\n"));
    }
    tracker.write(&dir.join("reports").join("uncertainty_hist.csv"), &csv)?;
    println!("evaluated {} seeds -> {}", config.seeds.len(), dir.join("reports/report.json").display());
    tracker.commit();
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), Error> {
    let (config, base_flags) = resolve_config(&args.base.config)?;
    let dataset = load_dataset::<f64>(&args.base.manifest)?;
    let dir = run_dir(&args.base);
    let mut tracker = ArtifactTracker::new();
    write_resolved(&mut tracker, &dir, &config, &base_flags)?;

    let mut flag_sets: Vec<(String, AblationFlags)> = Vec::new();
    if args.suite {
        flag_sets.push(("full".into(), AblationFlags::default()));
        for name in AblationFlags::NAMES {
            let mut flags = AblationFlags::default();
            flags.disable_by_name(name)?;
            flag_sets.push((format!("no_{}", name.replace('-', "_")), flags));
        }
    } else {
        let label = if base_flags.is_full_model() {
            "full".to_string()
        } else {
            "custom".to_string()
        };
        flag_sets.push((label, base_flags.clone()));
    }

    let workers = worker_threads();
    for (label, flags) in &flag_sets {
        let name = format!("{}_{label}", args.base.run_name);
        let report = run_experiment(&config, &dataset.batch, flags, &name, &dataset.manifest.name, workers)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
        tracker.write(&dir.join("reports").join(format!("ablation_{label}.json")), &json)?;
        println!(
            "ablation {label}: clean {:.4} attacked@1 {:.4}",
            report.aggregate.clean_acc.mean,
            report
                .aggregate
                .attacked
                .get(&1)
                .map(|m| m.mean)
                .unwrap_or(f64::NAN)
        );
    }
    tracker.commit();
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Error> {
    let mut reports: Vec<RunReport> = Vec::new();
    for path in &args.inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        reports.push(serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?);
    }
    let mut datasets: Vec<String> = reports.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();

    let mut md = String::new();
    for (title, metric) in [
        ("Clean accuracy", "clean"),
        ("Attacked accuracy (one random view)", "attacked"),
    ] {
        md.push_str(&format!("## {title}\n\n"));
        md.push_str(&format!("| Method | {} |\n", datasets.join(" | ")));
        md.push_str(&format!("|---|{}\n", "---|".repeat(datasets.len())));
        for report in &reports {
            let mut row = format!("| {} |", report.name);
            for ds in &datasets {
                if *ds == report.dataset {
                    let m = if metric == "clean" {
                        Some(&report.aggregate.clean_acc)
                    } else {
                        report.aggregate.attacked.get(&1)
                    };
                    match m {
                        Some(m) => row.push_str(&format!(
                            " {:.2} ± {:.2} |",
                            100.0 * m.mean,
                            100.0 * m.std
                        )),
                        None => row.push_str(" - |"),
                    }
                } else {
                    row.push_str(" - |");
                }
            }
            md.push_str(&row);
            md.push('\n');
        }
        md.push('\n');
    }
    fs::write(&args.out, md).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Domain(_) => 2,
        Error::Load { .. } | Error::Data(_) | Error::Io { .. } | Error::Serde(_) => 3,
        Error::Numeric { .. } | Error::Training { .. } | Error::TotalConflict { .. } => 4,
    }
}

fn error_class(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Contract(_) | Error::Domain(_) => "contract",
        Error::Load { .. } | Error::Data(_) => "data",
        Error::Io { .. } | Error::Serde(_) => "io",
        Error::Numeric { .. } | Error::Training { .. } => "numeric",
        Error::TotalConflict { .. } => "conflict",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", error_class(&err));
            ExitCode::from(exit_code_for(&err))
        }
    }
}
