//! Command implementations for the `c2c` binary.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use c2c_core::checks;
use c2c_core::config::RunConfig;
use c2c_core::data::{encode_ppm, generate_layout, generate_sample, split_dataset, Dataset};
use c2c_core::metrics::{
    boundary_means, evaluate, predict_dataset, shot_group, triviality_report, write_features_csv,
    write_metrics_csv, write_triviality_csvs, MetricsReport, ShotGroup,
};
use c2c_core::model::Cblnet;
use c2c_core::tensor::OpKind;
use c2c_core::train::{Checkpoint, LossMode, TrainState, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub mod error;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "c2c", version, about = "Crop-box regression with contrastive boundary features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Describe (and optionally render) the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write PPM images and a loadable manifest.
        #[arg(long)]
        images: bool,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue the run in `--out` from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint per shot group.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Triviality diagnostics and pooled features of a checkpoint.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Finite-difference check of every operator and the training objective.
    GradCheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupt the backward rule of this operator.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub loss_mode: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Override any config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replace the contents of an existing output directory.
    #[arg(long)]
    pub force: bool,
}

impl CommonArgs {
    fn has_overrides(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.loss_mode.is_some()
            || self.beta.is_some()
            || self.gamma.is_some()
            || !self.overrides.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Parse `args` (program name first) and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, images } => gen_data(&common, images),
        Command::Train { common, resume } => train(&common, resume),
        Command::Eval { common, checkpoint, split } => eval(&common, &checkpoint, split),
        Command::Analyze { common, checkpoint, split } => analyze(&common, &checkpoint, split),
        Command::GradCheck { inject_fault, .. } => grad_check(inject_fault.as_deref()),
    }
}

/// Config file (or `fallback`, or defaults) with flag overrides applied.
pub fn resolve_config(common: &CommonArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(mode) = &common.loss_mode {
        let mode: LossMode = mode.parse()?;
        pairs.push(("train.loss_mode".into(), mode.name().into()));
    }
    if let Some(beta) = common.beta {
        pairs.push(("train.loss.beta".into(), beta.to_string()));
    }
    if let Some(gamma) = common.gamma {
        pairs.push(("train.loss.gamma".into(), gamma.to_string()));
    }
    let refs: Vec<(&str, &str)> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    cfg.set_all(&refs)?;
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))
}

/// Create `dir`, refusing to touch a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; use a fresh directory or --force",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

// ---- gen-data ------------------------------------------------------------

#[derive(Serialize)]
struct DescriptionRecord {
    index: usize,
    split: &'static str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    size_ratio: f64,
    group: &'static str,
}

/// Size-ratio histogram and shot-group counts of both splits.
pub fn dataset_stats(cfg: &RunConfig) -> String {
    let (train, val) = split_dataset(&cfg.data);
    let ratios = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| generate_layout(&cfg.data, i).gt_box.area()).collect() };
    let (train_r, val_r) = (ratios(&train), ratios(&val));

    let mut out = format!("samples {} (train {}, val {})\n", cfg.data.size, train.len(), val.len());
    out.push_str("size ratio histogram\n");
    let mut bins = [0usize; 10];
    for &r in train_r.iter().chain(&val_r) {
        bins[((r * 10.0) as usize).min(9)] += 1;
    }
    let peak = bins.iter().copied().max().unwrap_or(0).max(1);
    for (i, &n) in bins.iter().enumerate() {
        let bar = "#".repeat(n * 40 / peak);
        out.push_str(&format!("  [{:.1}, {:.1}) {:>6} {bar}\n", i as f64 / 10.0, (i + 1) as f64 / 10.0, n));
    }
    out.push_str(&format!("{:<8}{:>8}{:>8}{:>8}\n", "", "Many", "Med.", "Few"));
    for (name, r) in [("train", &train_r), ("val", &val_r)] {
        let count = |g: ShotGroup| r.iter().filter(|&&x| shot_group(x) == g).count();
        out.push_str(&format!(
            "{name:<8}{:>8}{:>8}{:>8}\n",
            count(ShotGroup::Many),
            count(ShotGroup::Medium),
            count(ShotGroup::Few)
        ));
    }
    out
}

fn gen_data(common: &CommonArgs, images: bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let dir = out_dir(common, &cfg)?;
    prepare_dir(&dir, common.force)?;
    write_file(&dir.join("config.json"), cfg.to_json()? + "\n")?;

    let (_, val) = split_dataset(&cfg.data);
    let mut description = String::new();
    for i in 0..cfg.data.size {
        let b = generate_layout(&cfg.data, i).gt_box;
        let record = DescriptionRecord {
            index: i,
            split: if val.binary_search(&i).is_ok() { "val" } else { "train" },
            bbox: [b.left, b.top, b.right, b.bottom],
            size_ratio: b.area(),
            group: shot_group(b.area()).name(),
        };
        description.push_str(&serde_json::to_string(&record).map_err(c2c_core::Error::from)?);
        description.push('\n');
    }
    write_file(&dir.join("dataset.jsonl"), description)?;

    if images {
        let image_dir = dir.join("images");
        fs::create_dir_all(&image_dir).map_err(|e| CliError::io(&image_dir, e))?;
        let mut manifest = String::new();
        for i in 0..cfg.data.size {
            let sample = generate_sample(&cfg.data, i);
            let name = format!("images/{i:06}.ppm");
            let image = sample.image.as_ref().expect("generated samples carry images");
            write_file(&dir.join(&name), encode_ppm(image))?;
            let b = sample.gt_box;
            manifest.push_str(&format!(
                "{}\n",
                serde_json::json!({ "image": name, "box": [b.left, b.top, b.right, b.bottom] })
            ));
        }
        write_file(&dir.join("manifest.jsonl"), manifest)?;
    }

    let stats = dataset_stats(&cfg);
    write_file(&dir.join("stats.txt"), &stats)?;
    print!("{stats}");
    Ok(())
}

// ---- train ---------------------------------------------------------------

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn best_checkpoint(model: &Cblnet, cfg: &RunConfig, state: &TrainState) -> Option<Checkpoint> {
    let best = state.best.as_ref()?;
    let mut ckpt = Checkpoint::weights(model, best.params.clone(), cfg.train.loss_mode, cfg.train.seed);
    ckpt.meta.stage = best.stage;
    ckpt.meta.epoch = best.epoch + 1;
    ckpt.meta.best_val_iou = Some(best.val_iou);
    ckpt.meta.best_stage = Some(best.stage);
    ckpt.meta.best_epoch = Some(best.epoch);
    Some(ckpt)
}

fn train(common: &CommonArgs, resume: bool) -> Result<()> {
    let (cfg, dir) = if resume {
        let dir = common
            .out
            .clone()
            .ok_or_else(|| CliError::Usage("--resume needs --out <run directory>".into()))?;
        if common.has_overrides() || common.force {
            return Err(CliError::Usage("--resume takes its configuration from the run directory".into()));
        }
        (RunConfig::load(&dir.join(CONFIG_FILE))?, dir)
    } else {
        let cfg = resolve_config(common, None)?;
        let dir = out_dir(common, &cfg)?;
        prepare_dir(&dir, common.force)?;
        write_file(&dir.join(CONFIG_FILE), cfg.to_json()? + "\n")?;
        (cfg, dir)
    };

    let model = Cblnet::new(cfg.model.clone())?;
    let (train_set, val_set) = cfg.datasets()?;
    let state = if resume {
        let best = match Checkpoint::load(&dir.join(BEST_CHECKPOINT)) {
            Ok(ckpt) => Some(ckpt.params),
            Err(_) => None,
        };
        Checkpoint::load(&dir.join(LAST_CHECKPOINT))?.into_state(best)?
    } else {
        TrainState::fresh(&model, cfg.train.seed)
    };
    println!(
        "training {} on {} samples ({} val), {} parameters",
        cfg.train.loss_mode,
        train_set.len(),
        val_set.len(),
        model.init_params(0).num_scalars()
    );

    let trainer = Trainer {
        model: &model,
        config: &cfg.train,
        train: &train_set,
        val: &val_set,
    };
    let log_path = dir.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let started = Instant::now();
    let io = |path: &Path, e| c2c_core::Error::io(path.display().to_string(), e);
    let state = trainer.run(state, |log, state| {
        writeln!(log_file, "{}", serde_json::to_string(log)?).map_err(|e| io(&log_path, e))?;
        Checkpoint::from_state(&model, &cfg.train, state).save(&dir.join(LAST_CHECKPOINT))?;
        let improved = state.best.as_ref().is_some_and(|b| b.stage == log.stage && b.epoch == log.epoch);
        if improved {
            if let Some(ckpt) = best_checkpoint(&model, &cfg, state) {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if cfg.train.loss_mode == LossMode::RrtInv && log.stage == 1 && state.epoch == cfg.train.epochs {
            Checkpoint::from_state(&model, &cfg.train, state).save(&dir.join(STAGE1_CHECKPOINT))?;
        }
        let few = log.val.few.iou.map_or("-".into(), |v| format!("{v:.4}"));
        println!(
            "stage {} epoch {:>3}  loss {:.5} (l1 {:.5})  val iou {:.4} few {}  {:.1}s",
            log.stage,
            log.epoch,
            log.train.total,
            log.train.l1,
            log.val.all.iou.unwrap_or(f64::NAN),
            few,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })?;

    if state.best.is_none() {
        // Zero epochs: the initial weights are the result.
        Checkpoint::weights(&model, state.params.clone(), cfg.train.loss_mode, cfg.train.seed).save(&dir.join(BEST_CHECKPOINT))?;
        Checkpoint::from_state(&model, &cfg.train, &state).save(&dir.join(LAST_CHECKPOINT))?;
    }
    let (report, _) = evaluate(&model, state.best_params(), &val_set, cfg.train.eval_batch_size)?;
    write_metrics_csv(&report, &dir.join(METRICS_FILE))?;
    print!("{}", report.table());
    Ok(())
}

// ---- eval / analyze ------------------------------------------------------

struct Loaded {
    cfg: RunConfig,
    model: Cblnet,
    checkpoint: Checkpoint,
    train: Dataset,
    val: Dataset,
}

impl Loaded {
    fn dataset(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Checkpoint plus datasets. Without `--config`, a `config.json` next to the
/// checkpoint is used when present.
fn load_checkpoint(common: &CommonArgs, path: &Path) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(path)?;
    let sibling = path.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.is_file());
    let cfg = resolve_config(common, sibling.as_deref())?;
    if checkpoint.meta.encoder.image_size != cfg.data.image_size {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}px images, data config has {}px",
            checkpoint.meta.encoder.image_size, cfg.data.image_size
        )));
    }
    let model = Cblnet::new(checkpoint.meta.encoder.clone())?;
    let (train, val) = cfg.datasets()?;
    Ok(Loaded {
        cfg,
        model,
        checkpoint,
        train,
        val,
    })
}

fn default_out(common: &CommonArgs, checkpoint: &Path, name: String) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf())
        .join(name)
}

fn eval(common: &CommonArgs, checkpoint: &Path, split: Split) -> Result<()> {
    let loaded = load_checkpoint(common, checkpoint)?;
    let (report, _): (MetricsReport, _) = evaluate(
        &loaded.model,
        &loaded.checkpoint.params,
        loaded.dataset(split),
        loaded.cfg.train.eval_batch_size,
    )?;
    let path = default_out(common, checkpoint, format!("eval_{}.csv", split.name()));
    if path.exists() && !common.force {
        return Err(CliError::Usage(format!("{} exists; pass --force to replace it", path.display())));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_metrics_csv(&report, &path)?;
    print!("{}", report.table());
    Ok(())
}

fn analyze(common: &CommonArgs, checkpoint: &Path, split: Split) -> Result<()> {
    let loaded = load_checkpoint(common, checkpoint)?;
    let dataset = loaded.dataset(split);
    let dir = default_out(common, checkpoint, format!("analysis_{}", split.name()));
    prepare_dir(&dir, common.force)?;

    let preds = predict_dataset(&loaded.model, &loaded.checkpoint.params, dataset, loaded.cfg.train.eval_batch_size)?;
    let targets = dataset.targets();
    let train_mean = boundary_means(&loaded.train.targets());
    let report = triviality_report(&preds.predictions, &targets, train_mean);
    write_triviality_csvs(&report, &dir)?;
    write_features_csv(&preds.features, &targets, &dir.join("features.csv"))?;

    println!("{:<8}{:>10}{:>12}{:>12}{:>10}", "", "score", "model MAE", "mean MAE", "gap");
    for s in report.summaries() {
        let score = match (s.score, s.zero_variance) {
            (_, true) => "undefined".to_string(),
            (Some(v), false) => format!("{v:.4}"),
            (None, false) => "-".to_string(),
        };
        println!(
            "{:<8}{:>10}{:>12.5}{:>12.5}{:>10.5}",
            s.boundary.name(),
            score,
            s.model_mae,
            s.trivial_mae,
            s.mae_gap
        );
    }
    Ok(())
}

// ---- grad-check ----------------------------------------------------------

fn grad_check(fault: Option<&str>) -> Result<()> {
    let fault = fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown op {name:?}"))))
        .transpose()?;
    let started = Instant::now();
    let reports = checks::run_suite(fault)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{:<20} max rel err {:>10.3e}  (tol {:.0e}, {} components)  {status}",
            r.name, r.max_rel_error, r.tolerance, r.components
        );
    }
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::CheckFailed(failed));
    }
    Ok(())
}
