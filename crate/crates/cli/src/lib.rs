//! Command-line front end: train, fuse, decompose, eval, grid and sweep.

pub mod montage;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use retifuse::fsutil::{create_dir_all, write_atomic};
use retifuse::imgio::{list_images, load_image, rgb_to_ycbcr, save_image, scan_dataset, ycbcr_to_rgb, ImagePlane};
use retifuse::metrics::{evaluate_directory, MetricInput};
use retifuse::nets::{load_checkpoint, read_manifest, ModelBundle};
use retifuse::pipeline::{decompose_visible, fuse_images, DecomposeInput, PipelineOptions};
use retifuse::trainer::{
    ablation_sweep, sweep_csv, train, SweepGrid, SweepOptions, TrainConfig, TrainOptions, FINAL_CHECKPOINT, LOG_FILE,
};
use retifuse::{Error, Result};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for errors raised by data, files or numerics.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit code for bad flags, arguments or configuration.
pub const EXIT_USAGE: i32 = 2;

/// Sweep report written under `--out`.
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Parser, Debug)]
#[command(
    name = "retifuse",
    version,
    about = "Infrared/visible image fusion by Retinex decomposition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model bundle on an `ir/` + `vis/` dataset.
    Train(TrainArgs),
    /// Fuse one registered infrared/visible pair.
    Fuse(FuseArgs),
    /// Write the illumination/reflectance decomposition of a visible image.
    Decompose(DecomposeArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
    /// Build a labeled comparison montage from several result directories.
    Grid(GridArgs),
    /// Train and score one model per cell of a gamma2 × wi grid.
    Sweep(SweepArgs),
}

/// Flags that override config-file values.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl Overrides {
    /// Applies every given flag and returns the config keys it set.
    pub fn apply(&self, c: &mut TrainConfig) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        let mut mark = |k: &str| {
            set.insert(k.to_string());
        };
        if let Some(v) = self.seed {
            c.seed = v;
            mark("seed");
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
            mark("learning_rate");
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
            mark("batch_size");
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
            mark("epochs");
        }
        if let Some(v) = self.max_steps {
            c.max_steps = Some(v);
            mark("max_steps");
        }
        if let Some(v) = self.crop {
            c.crop = v;
            mark("crop");
        }
        if let Some(v) = self.max_pairs {
            c.max_pairs = Some(v);
            mark("max_pairs");
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
            mark("checkpoint_every");
        }
        set
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML or JSON config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `ir/` and `vis/`.
    #[arg(long)]
    pub data_root: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint, including optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColorMode {
    /// Fuse the luminance of the visible image; gray output.
    Gray,
    /// Fuse the Y channel and reattach the source chroma.
    Ycbcr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecomposeFrom {
    Raw,
    Projected,
}

impl From<DecomposeFrom> for DecomposeInput {
    fn from(d: DecomposeFrom) -> Self {
        match d {
            DecomposeFrom::Raw => DecomposeInput::Raw,
            DecomposeFrom::Projected => DecomposeInput::Projected,
        }
    }
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub ir: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "gray")]
    pub color_mode: ColorMode,
    /// Min-max stretch the fused image instead of clamping it.
    #[arg(long)]
    pub stretch: bool,
    /// Overrides the decomposition input recorded in the checkpoint.
    #[arg(long, value_enum)]
    pub decompose_input: Option<DecomposeFrom>,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    /// Receives `L.png`, `R.png`, `i.png` and `LxR.png`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub decompose_input: Option<DecomposeFrom>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricScale {
    /// Round to 8 bits before scoring.
    Eightbit,
    /// Score the unrounded 0–255 values.
    Float,
}

impl From<MetricScale> for MetricInput {
    fn from(m: MetricScale) -> Self {
        match m {
            MetricScale::Eightbit => MetricInput::EightBit,
            MetricScale::Float => MetricInput::Float,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub fused_dir: PathBuf,
    #[arg(long)]
    pub vis_dir: PathBuf,
    #[arg(long)]
    pub ir_dir: PathBuf,
    /// CSV report with one row per image and a MEAN row.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "eightbit")]
    pub metric_input: MetricScale,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    /// Comma-separated result directories, one montage column each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dirs: Vec<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated column labels; directory names when absent.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// For example `gamma2=1,2.5;wi=1,2`.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset root holding `ir/` and `vis/`.
    #[arg(long)]
    pub data_root: PathBuf,
    /// Evaluation dataset root; the training root when absent.
    #[arg(long)]
    pub eval_root: Option<PathBuf>,
    /// Resize evaluation pairs to `N × N`; native size when absent.
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long, value_enum, default_value = "eightbit")]
    pub metric_input: MetricScale,
    /// Output directory for `sweep.csv` and per-cell runs.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.to_string());
        }
    }
}

fn file_keys(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    let value: serde_json::Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))?
    };
    let mut keys = BTreeMap::new();
    flatten("", &value, &mut keys);
    Ok(keys.into_keys().collect())
}

/// Resolves flag > config file > default and returns the config with one
/// `key = value (source)` line per setting.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<(TrainConfig, Vec<String>)> {
    let (mut config, from_file) = match path {
        Some(p) => (TrainConfig::from_file(p)?, file_keys(p)?),
        None => (TrainConfig::default(), BTreeSet::new()),
    };
    let from_flags = overrides.apply(&mut config);
    let value = serde_json::to_value(&config).map_err(|e| Error::Config(e.to_string()))?;
    let mut leaves = BTreeMap::new();
    flatten("", &value, &mut leaves);
    let lines = leaves
        .into_iter()
        .map(|(k, v)| {
            let source = if from_flags.contains(&k) {
                "flag"
            } else if from_file.contains(&k) {
                "config file"
            } else {
                "default"
            };
            format!("{k} = {v} ({source})")
        })
        .collect();
    Ok((config, lines))
}

fn print_config(lines: &[String]) {
    eprintln!("configuration (flag > config file > default):");
    for l in lines {
        eprintln!("  {l}");
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (config, lines) = resolve_config(a.config.as_deref(), &a.overrides)?;
    print_config(&lines);
    config.validate()?;
    let manifest = scan_dataset(&a.data_root)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let outcome = train(
        &config,
        &manifest,
        &TrainOptions {
            out_dir: Some(a.out.clone()),
            resume: a.resume.clone(),
        },
    )?;
    let totals = outcome.log.totals();
    if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
        println!("loss {first:.6} -> {last:.6} over {} steps", outcome.steps);
    }
    if let Some(p) = &outcome.checkpoint {
        println!("checkpoint {}", p.display());
    }
    println!("log {}", a.out.join(LOG_FILE).display());
    Ok(())
}

/// Loads a checkpoint and the pipeline options recorded with it.
pub fn load_model(path: &Path) -> Result<(ModelBundle, PipelineOptions)> {
    let manifest = read_manifest(path)?;
    let bundle = load_checkpoint(path, &manifest.spec)?;
    let pipeline = manifest
        .extra
        .get("pipeline")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    Ok((bundle, pipeline))
}

fn pipeline_for(recorded: PipelineOptions, flag: Option<DecomposeFrom>) -> PipelineOptions {
    match flag {
        Some(d) => PipelineOptions {
            decompose_input: d.into(),
        },
        None => recorded,
    }
}

fn with_channels(img: ImagePlane, channels: usize) -> Result<ImagePlane> {
    if img.channels() == channels {
        return Ok(img);
    }
    match channels {
        1 => Ok(img.to_gray()),
        _ => ImagePlane::from_fn(img.height(), img.width(), channels, |y, x, _| img.get(y, x, 0)),
    }
}

pub fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let (bundle, recorded) = load_model(&a.ckpt)?;
    let pipeline = pipeline_for(recorded, a.decompose_input);
    let channels = bundle.spec().channels;
    if channels == 3 && a.color_mode == ColorMode::Ycbcr {
        return Err(Error::InvalidArgument(
            "--color-mode ycbcr needs a single-channel checkpoint; this one fuses RGB directly".into(),
        ));
    }
    let ir = load_image(&a.ir, true)?;
    let vis = load_image(&a.vis, a.color_mode == ColorMode::Gray && channels == 1)?;
    let finish = |img: ImagePlane| if a.stretch { img.stretched() } else { img.clamped() };
    let out = if channels == 1 && vis.channels() == 3 {
        let (y, cb, cr) = rgb_to_ycbcr(&vis)?;
        let fused_y = finish(fuse_images(&bundle, &y, &ir, pipeline)?);
        ycbcr_to_rgb(&fused_y, &cb, &cr)?.clamped()
    } else {
        if a.color_mode == ColorMode::Ycbcr {
            eprintln!("note: {} has no chroma; writing a gray result", a.vis.display());
        }
        let vis = with_channels(vis, channels)?;
        finish(fuse_images(&bundle, &vis, &ir, pipeline)?)
    };
    save_image(&out, &a.out)?;
    println!(
        "wrote {} ({}x{}, {} channel{})",
        a.out.display(),
        out.width(),
        out.height(),
        out.channels(),
        if out.channels() == 1 { "" } else { "s" }
    );
    Ok(())
}

/// File names written by `decompose`.
pub const DECOMPOSE_FILES: [&str; 4] = ["L.png", "R.png", "i.png", "LxR.png"];

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<()> {
    let (bundle, recorded) = load_model(&a.ckpt)?;
    let pipeline = pipeline_for(recorded, a.decompose_input);
    let channels = bundle.spec().channels;
    let vis = with_channels(load_image(&a.vis, channels == 1)?, channels)?;
    let input = vis.to_tensor(bundle.device(), bundle.dtype())?;
    let d = decompose_visible(&bundle, &input, pipeline)?;
    let recon = d.illumination.broadcast_mul(&d.reflectance)?;
    let mean_abs = (&recon - &d.projected)?
        .abs()?
        .mean_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    let relative = d.relative_reconstruction_error()?[0];

    create_dir_all(&a.out_dir)?;
    for (name, t) in DECOMPOSE_FILES
        .iter()
        .zip([&d.illumination, &d.reflectance, &d.projected, &recon])
    {
        let plane = ImagePlane::from_tensor(t)?.remove(0).clamped();
        save_image(&plane, &a.out_dir.join(name))?;
    }
    println!("mean |LxR - i| = {mean_abs:.6}");
    println!("relative reconstruction error = {relative:.6}");
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = evaluate_directory(&a.fused_dir, &a.vis_dir, &a.ir_dir, a.metric_input.into())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_atomic(&a.report, report.to_csv().as_bytes())?;
    let m = &report.aggregate;
    println!(
        "{} images: en {:.4} sd {:.4} mi {:.4} nabf {:.4}",
        report.len(),
        m.en,
        m.sd,
        m.mi,
        m.nabf
    );
    Ok(())
}

pub fn cmd_grid(a: &GridArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.dirs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels given for {} directories",
            a.labels.len(),
            a.dirs.len()
        )));
    }
    let mut listings = Vec::new();
    for dir in &a.dirs {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.clone()));
        }
        let (images, warnings) = list_images(dir)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset(format!("no images in {}", dir.display())));
        }
        listings.push(images);
    }
    let stems: BTreeSet<&String> = listings.iter().flat_map(|m| m.keys()).collect();
    let mut cells = Vec::new();
    for stem in &stems {
        let mut row = Vec::new();
        for (dir, images) in a.dirs.iter().zip(&listings) {
            match images.get(*stem) {
                Some(p) => row.push(Some(load_image(p, false)?)),
                None => {
                    eprintln!("warning: {} has no image `{stem}`", dir.display());
                    row.push(None);
                }
            }
        }
        cells.push(row);
    }
    let labels: Vec<String> = if a.labels.is_empty() {
        a.dirs
            .iter()
            .map(|d| {
                d.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| d.display().to_string())
            })
            .collect()
    } else {
        a.labels.clone()
    };
    let img = montage::montage(&cells, &labels)?;
    save_image(&img, &a.out)?;
    println!(
        "wrote {} ({} rows x {} columns, {}x{})",
        a.out.display(),
        cells.len(),
        labels.len(),
        img.width(),
        img.height()
    );
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let grid = SweepGrid::parse(&a.grid)?;
    let (config, lines) = resolve_config(a.config.as_deref(), &a.overrides)?;
    print_config(&lines);
    eprintln!("  loss_weights.d2s.gamma2 and loss_weights.d2s.w_i are set per cell by --grid");
    config.validate()?;
    let train_set = scan_dataset(&a.data_root)?;
    let eval_set = match &a.eval_root {
        Some(root) => scan_dataset(root)?,
        None => train_set.clone(),
    };
    create_dir_all(&a.out)?;
    let rows = ablation_sweep(
        &grid,
        &config,
        &train_set,
        &eval_set,
        &SweepOptions {
            out_dir: Some(a.out.clone()),
            eval_size: a.eval_size.map(|s| (s, s)),
            metric_input: a.metric_input.into(),
        },
    )?;
    let csv = sweep_csv(&rows);
    let path = a.out.join(SWEEP_FILE);
    write_atomic(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", path.display());
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed == rows.len() {
        return Err(Error::Numeric(format!("all {failed} sweep cells failed")));
    }
    Ok(())
}

/// Final checkpoint path under a training output directory.
pub fn final_checkpoint(out: &Path) -> PathBuf {
    out.join(FINAL_CHECKPOINT)
}
