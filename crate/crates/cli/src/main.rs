use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgnet::dataset::{
    generate_pairs, merge_weak_labels, parse_manifest, records_in_split, training_pairs, write_pairs_csv,
    FileImageSource, ImageRecord, Protocol, Source, Split,
};
use dgnet::evaluator::{
    roc_curve, run_ablation, score_pairs, write_ablation_report, AblationData, AblationEntry, MetricsReport, ScoreMode,
    DEFAULT_FAR_TARGETS,
};
use dgnet::gradcheck::{grad_check_piecewise, GradCheckOptions, SignedLossAndGrad};
use dgnet::losses::LossConfig;
use dgnet::network::{build_network, load_params, NetworkSpec, Profile};
use dgnet::trainer::{batch_loss_grads_signature, train, TrainConfig};
use dgnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

const THREADS_ENV: &str = "DGNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dgnet", version, about = "Siamese verification for disguised faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on the train split of a manifest.
    Train(TrainArgs),
    /// Score a protocol with a checkpoint and write metrics.json and roc.csv.
    Eval(EvalArgs),
    /// Write the verification pairs of a protocol as CSV.
    Pairs(PairsArgs),
    /// Finite-difference check of the network gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per grid entry.
    Ablate(AblateArgs),
}

/// Training options shared by `train` and `ablate`.
#[derive(Args, Debug)]
struct TrainFlags {
    /// JSON file with `profile` and `train` keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_balance: bool,
    #[arg(long)]
    no_lr_loss: bool,
    #[arg(long)]
    no_bce_loss: bool,
    /// Extra genuine images (JSON lines) merged into the training identities.
    #[arg(long)]
    web_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Write a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_protocol, default_value = "overall")]
    protocol: Protocol,
    #[arg(long, value_parser = parse_mode, default_value = "head")]
    mode: ScoreMode,
    /// Records to pair up: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PairsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Protocol,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_profile, default_value = "tiny")]
    profile: Profile,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 16)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// JSON array of grid entries.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_parser = parse_protocol, default_value = "overall")]
    protocol: Protocol,
    #[arg(long, value_parser = parse_mode, default_value = "head")]
    mode: ScoreMode,
    #[arg(long, default_value = "test")]
    split: String,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: dgnet::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: dgnet::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse().map_err(|e: dgnet::Error| e.to_string())
}

/// Contents of `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    profile: Profile,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Tiny,
            train: TrainConfig::default(),
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dgnet::Error> for Failure {
    fn from(e: dgnet::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn resolve(flags: &TrainFlags) -> Outcome<RunConfig> {
    let mut rc = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let t = &mut rc.train;
    if let Some(p) = flags.profile {
        rc.profile = p;
    }
    if let Some(v) = flags.margin {
        t.loss.margin = v;
    }
    if let Some(v) = flags.lr {
        t.lr = v;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.seed {
        t.seed = v;
    }
    if flags.no_balance {
        t.class_balance = false;
    }
    if flags.no_lr_loss {
        t.loss.enable_lr = false;
    }
    if flags.no_bce_loss {
        t.loss.enable_bce = false;
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        t.loader_threads = v
            .parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    }
    t.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(rc)
}

fn parse_split(s: &str) -> Outcome<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other
            .parse()
            .map(Some)
            .map_err(|e: dgnet::Error| Failure::Usage(e.to_string())),
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a manifest and rewrites its image paths relative to `base`.
fn load_relative(manifest: &Path, base: &Path) -> Outcome<Vec<ImageRecord>> {
    let mut records = parse_manifest(manifest)?;
    let own = base_dir(manifest);
    if own != base {
        for r in &mut records {
            r.path = own.join(&r.path).to_string_lossy().into_owned();
        }
    }
    Ok(records)
}

/// Train-split DFW records and all web records (manifest plus `--web-manifest`).
fn training_records(manifest: &Path, web: Option<&Path>) -> Outcome<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let base = base_dir(manifest);
    let all = load_relative(manifest, &base)?;
    let (mut web_records, dfw): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.source == Source::Web);
    if let Some(w) = web {
        web_records.extend(load_relative(w, &base)?);
    }
    Ok((records_in_split(&dfw, Split::Train), web_records))
}

fn eval_records(manifest: &Path, split: Option<Split>) -> Outcome<Vec<ImageRecord>> {
    let all: Vec<ImageRecord> = parse_manifest(manifest)?
        .into_iter()
        .filter(|r| r.source != Source::Web)
        .collect();
    Ok(match split {
        Some(s) => records_in_split(&all, s),
        None => all,
    })
}

fn create_out(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_config(dir: &Path, value: &serde_json::Value) -> Outcome<()> {
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> Outcome<()> {
    let mut rc = resolve(&a.flags)?;
    if let Some(n) = a.checkpoint_every {
        rc.train.checkpoint_every = n;
    }
    create_out(&a.out)?;
    write_config(
        &a.out,
        &json!({
            "command": "train",
            "manifest": a.manifest,
            "web_manifest": a.flags.web_manifest,
            "profile": rc.profile,
            "train": rc.train,
        }),
    )?;
    let (train_records, web) = training_records(&a.manifest, a.flags.web_manifest.as_deref())?;
    let records = if web.is_empty() {
        train_records
    } else {
        merge_weak_labels(&train_records, &web)?
    };
    let pairs = training_pairs(&records);
    let spec = NetworkSpec::for_profile(rc.profile);
    let source = FileImageSource::new(base_dir(&a.manifest), spec.input);
    let params = build_network(&spec, rc.train.seed)?;
    println!("training on {} pairs from {} images", pairs.len(), records.len());
    let outcome = train(params, &pairs, &source, &rc.train, Some(&a.out))?;
    if let Some(last) = outcome.log.rows.last() {
        println!(
            "epoch {}: loss {:.6} (contrastive {:.6}, regression {:.6}, bce {:.6}), train acc {:.4}",
            last.epoch, last.l_total, last.l_c, last.l_r, last.l_bce, last.train_acc
        );
    }
    println!("wrote {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome<()> {
    let split = parse_split(&a.split)?;
    create_out(&a.out)?;
    write_config(
        &a.out,
        &json!({
            "command": "eval",
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "protocol": a.protocol,
            "mode": a.mode,
            "split": a.split,
        }),
    )?;
    let params = load_params(&a.checkpoint)?;
    let records = eval_records(&a.manifest, split)?;
    let pairs = generate_pairs(&records, a.protocol);
    let source = FileImageSource::new(base_dir(&a.manifest), params.spec().input);
    let scores = score_pairs(&params, &pairs, &source, a.mode)?;
    let report = MetricsReport::compute(a.mode, &scores, &DEFAULT_FAR_TARGETS)?;
    report.write_json(a.out.join("metrics.json"))?;
    roc_curve(&scores)?.write_csv(a.out.join("roc.csv"))?;
    println!(
        "{} pairs ({} genuine, {} impostor), {} scores",
        scores.len(),
        report.n_genuine,
        report.n_impostor,
        a.mode.as_str()
    );
    for (far, gar) in &report.gar_at {
        println!("GAR@FAR={far}: {gar:.4}");
    }
    println!(
        "best accuracy {:.4}, accuracy at 0.5 {:.4}",
        report.best_accuracy, report.acc_at_half
    );
    Ok(())
}

fn cmd_pairs(a: PairsArgs) -> Outcome<()> {
    let records = parse_manifest(&a.manifest)?;
    let pairs = generate_pairs(&records, a.protocol);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    write_pairs_csv(&pairs, &a.out)?;
    let positives = pairs.iter().filter(|p| p.y == 1).count();
    println!(
        "{} pairs ({} positive, {} negative)",
        pairs.len(),
        positives,
        pairs.len() - positives
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome<()> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(Failure::Usage(format!("--tol must be positive, got {}", a.tol)));
    }
    let spec = NetworkSpec::for_profile(a.profile);
    let params = build_network(&spec, a.seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(a.seed);
    let mut image = || {
        let data = (0..spec.input.iter().product())
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        Tensor::new(spec.input.to_vec(), data)
    };
    let batch = vec![(image()?, image()?), (image()?, image()?)];
    let y = [1u8, 0];
    let cfg = LossConfig::default();
    let f = |ts: &[Tensor]| -> dgnet::Result<SignedLossAndGrad> {
        let p = params.with_tensors(ts.to_vec())?;
        let (b, g, sig) = batch_loss_grads_signature(&p, &batch, &y, &cfg)?;
        Ok((b.l_total, g, sig))
    };
    let opts = GradCheckOptions {
        eps: a.eps,
        max_coords_per_tensor: Some(a.coords),
        seed: a.seed,
    };
    let report = grad_check_piecewise(f, params.tensors(), &opts).map_err(|e| match e {
        dgnet::Error::Config(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    println!(
        "max relative error: {:e} ({} coordinates, {} skipped at kinks)",
        report.max_relative_error, report.coords_checked, report.skipped
    );
    if report.max_relative_error > a.tol {
        return Err(Failure::Runtime(format!(
            "relative error {:e} exceeds tolerance {:e}",
            report.max_relative_error, a.tol
        )));
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Outcome<()> {
    let rc = resolve(&a.flags)?;
    let split = parse_split(&a.split)?;
    let text = fs::read_to_string(&a.grid)
        .map_err(|e| Failure::Usage(format!("cannot read grid {}: {e}", a.grid.display())))?;
    let grid: Vec<AblationEntry> =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid grid {}: {e}", a.grid.display())))?;
    create_out(&a.out)?;
    write_config(
        &a.out,
        &json!({
            "command": "ablate",
            "grid": grid,
            "manifest": a.manifest,
            "web_manifest": a.flags.web_manifest,
            "protocol": a.protocol,
            "mode": a.mode,
            "split": a.split,
            "profile": rc.profile,
            "train": rc.train,
        }),
    )?;
    let (train_records, web_records) = training_records(&a.manifest, a.flags.web_manifest.as_deref())?;
    let eval_pairs = generate_pairs(&eval_records(&a.manifest, split)?, a.protocol);
    let spec = NetworkSpec::for_profile(rc.profile);
    let source = FileImageSource::new(base_dir(&a.manifest), spec.input);
    let data = AblationData {
        spec,
        train_records,
        web_records,
        eval_pairs,
        source: &source,
        mode: a.mode,
    };
    let rows = run_ablation(&grid, &data, &rc.train);
    write_ablation_report(&rows, &a.out)?;
    let mut failed = 0;
    for row in &rows {
        match (&row.error, row.best_accuracy) {
            (Some(e), _) => {
                failed += 1;
                println!("{}: error: {e}", row.name);
            }
            (None, Some(acc)) => println!("{}: best accuracy {acc:.4}", row.name),
            (None, None) => println!("{}: no metrics", row.name),
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} of {} grid entries failed",
            rows.len()
        )));
    }
    Ok(())
}
