//! `mmseg`: synthesize phantoms, train one arm, run the ablation grid and
//! render predictions.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmseg_core::checkpoint;
use mmseg_core::config::ExperimentConfig;
use mmseg_core::experiments::{render_table, run_ablation, AblationPlan};
use mmseg_core::io::{read_dataset, write_dataset};
use mmseg_core::metrics::{format_report, report_rows};
use mmseg_core::phantom::{generate_dataset, split_dataset, PhantomSpec, Split};
use mmseg_core::train::{evaluate, predict, MissingStrategy, Trainer};
use mmseg_core::viz::{default_slices, write_feature_mosaics, write_panels};
use mmseg_core::volume::preprocess;
use mmseg_core::{Case, Error, ModalityId, Shape3};

#[derive(Parser, Debug)]
#[command(name = "mmseg", version, about = "Missing-modality tumor segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with a manifest.
    SynthData(SynthArgs),
    /// Train one arm and write its checkpoint.
    Train(TrainArgs),
    /// Train and evaluate every arm under every missing modality.
    Ablate(AblateArgs),
    /// Render label overlays and feature mosaics for one case.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    cases: usize,
    /// One extent for a cube or three as `DxHxW`.
    #[arg(long, default_value = "32")]
    shape: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `section.key = value` file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// t1, t1c, t2, flair or random.
    #[arg(long)]
    missing: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint path; an existing file is resumed.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the report, table and per-run checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Train the generator arm once under random missing.
    #[arg(long)]
    shared_generator: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    data: PathBuf,
    /// Case id from the manifest.
    #[arg(long)]
    case: String,
    /// `LABEL=PATH` checkpoint per arm, in panel order.
    #[arg(long = "checkpoint", value_name = "LABEL=PATH", required = true)]
    checkpoints: Vec<String>,
    #[arg(long)]
    missing: String,
    #[arg(long, default_value_t = 3)]
    slices: usize,
    #[arg(long, default_value_t = 4)]
    scale: u32,
    #[arg(long)]
    out: PathBuf,
}

/// A failure and the exit code it maps to.
enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            _ if e.is_divergence() => Failure::Divergence(e.to_string()),
            Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownModality(_) | Error::ConditionIndex(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn parse_shape(text: &str) -> Result<Shape3, Failure> {
    let dims: Vec<usize> = text
        .split(['x', ',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Failure::Usage(format!("bad extent `{s}` in --shape"))))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [n] => Ok([n, n, n]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Failure::Usage(format!("--shape `{text}` needs one or three extents"))),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    if a.cases == 0 {
        return Err(Failure::Usage("--cases must be at least 1".into()));
    }
    let shape = parse_shape(&a.shape)?;
    let mut spec = PhantomSpec::new(shape, a.cases, a.seed);
    if let Some(n) = a.noise {
        spec.noise_std = n;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let cases = generate_dataset(&spec)?;
    write_dataset(&a.out, &cases)?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn resolve_config(c: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply(&text)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v).map_err(Failure::Usage)?;
    }
    Ok(cfg)
}

/// Read and normalize a dataset, adopting its shape and size into `cfg`.
fn load_cases(dir: &Path, cfg: &mut ExperimentConfig) -> Result<Split<Case>, Failure> {
    let cases = read_dataset(dir)?.iter().map(|c| preprocess(c, None)).collect::<Result<Vec<_>, _>>()?;
    cfg.data.shape = cases[0].shape();
    cfg.data.cases = cases.len();
    cfg.validate()?;
    Ok(split_dataset(&cases, cfg.data.train_fraction, cfg.data.seed)?)
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    }
    if let Some(m) = &a.missing {
        cfg.train.missing = m.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    }
    if a.dry_run {
        cfg.validate()?;
        print!("{}", cfg.render());
        return Ok(());
    }
    let data = a.data.as_ref().ok_or_else(|| Failure::Usage("--data is required unless --dry-run".into()))?;
    let split = load_cases(data, &mut cfg)?;
    let mut trainer = if a.out.exists() {
        let t = checkpoint::load(&a.out)?;
        if t.config != cfg {
            return Err(Failure::Usage(format!("{} belongs to a different configuration", a.out.display())));
        }
        println!("resuming from epoch {}", t.epoch);
        t
    } else {
        Trainer::new(cfg.clone())?
    };
    trainer.fit(&split.train, &split.val, |t| {
        let r = t.history.last().expect("epoch recorded");
        println!("epoch {:>3}  lr {:.2e}  train {:.5}  val {:.5}", r.epoch, r.lr, r.train.total, r.val_loss);
        checkpoint::save(t, &a.out)
    })?;
    let settings: Vec<ModalityId> = match cfg.train.missing {
        MissingStrategy::Fixed(m) => vec![m],
        MissingStrategy::UniformRandom => ModalityId::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for m in settings {
        let eval = evaluate(&trainer.model, &trainer.best_params, &split.test, m)?;
        rows.extend(report_rows(cfg.mode.label(), m.label(), &eval.mean));
    }
    print!("{}", format_report(&rows));
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let mut cfg = resolve_config(&a.config)?;
    let split = load_cases(&a.data, &mut cfg)?;
    let mut plan = AblationPlan::new(cfg);
    plan.shared_generator = a.shared_generator;
    fs::create_dir_all(&a.out)?;
    let result = run_ablation(&plan, &split.train, &split.val, &split.test, Some(&a.out.join("checkpoints")), |line| {
        println!("{line}")
    })?;
    fs::write(a.out.join("report.tsv"), format_report(&result.rows))?;
    let table = render_table(&result.rows);
    fs::write(a.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn viz(a: VizArgs) -> CliResult {
    let missing: ModalityId = a.missing.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    if a.slices == 0 {
        return Err(Failure::Usage("--slices must be at least 1".into()));
    }
    let cases = read_dataset(&a.data)?;
    let case = cases
        .iter()
        .find(|c| c.case_id == a.case)
        .ok_or_else(|| Failure::Data(format!("case `{}` is not in the manifest", a.case)))?;
    let case = preprocess(case, None)?;
    let mut predictions = Vec::new();
    let mut features = Vec::new();
    for spec in &a.checkpoints {
        let (label, path) =
            spec.split_once('=').ok_or_else(|| Failure::Usage(format!("--checkpoint expects LABEL=PATH, got `{spec}`")))?;
        let t = checkpoint::load(Path::new(path))?;
        let pred = predict(&t.model, &t.best_params, &case, missing)?;
        features.push((label.to_string(), pred.features));
        predictions.push((label.to_string(), pred.labels));
    }
    let mut slices = default_slices(case.labels(), a.slices);
    // tiny volumes may not have enough distinct slices; keep the count exact
    while slices.len() < a.slices {
        slices.push(slices[slices.len() - 1]);
    }
    let background = case.modality(ModalityId::Flair).or_else(|| case.modalities().values().next()).expect("case has modalities");
    let panels = write_panels(&a.out, background, case.labels(), &predictions, &slices, a.scale)?;
    let mut mosaics = 0;
    for (label, f) in &features {
        mosaics += write_feature_mosaics(&a.out.join("features"), label, f, a.scale)?.len();
    }
    println!("wrote {} panels and {} feature mosaics to {}", panels.len(), mosaics, a.out.display());
    Ok(())
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
    let outcome = match cli.command {
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Viz(a) => viz(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(m)) => {
            eprintln!("training diverged: {m}");
            ExitCode::from(3)
        }
    }
}
