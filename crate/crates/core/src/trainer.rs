//! Training loop, configuration, evaluation of trained bundles and the
//! γ₂ × w_i ablation sweep.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BackboneSource, FeatureExtractor};
use crate::fsutil::{create_dir_all, write_atomic};
use crate::imgio::{resize, DatasetManifest, ImagePair, ImagePlane, PairLoadOptions};
use crate::loss_d2s::{d2s_loss, total_loss, D2SBreakdown, D2SWeights};
use crate::loss_decomp::{decomposition_loss, DecompLossWeights, LossBreakdown, Reduction};
use crate::metrics::{Gray, MetricInput, MetricReport, MetricRow};
use crate::nets::{
    load_checkpoint_full, save_checkpoint_with, BundleSpec, CheckpointManifest, ModelBundle, Precision, DEFAULT_HIDDEN,
    DEFAULT_LAYERS,
};
use crate::pipeline::{
    decompose_infrared, decompose_visible, fuse, fuse_images, DecompositionResult, FusionOutput, PipelineOptions,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const FINAL_CHECKPOINT: &str = "model.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    #[default]
    Cpu,
    Accelerator,
}

impl DeviceKind {
    pub fn device(self) -> Result<Device> {
        match self {
            DeviceKind::Cpu => Ok(Device::Cpu),
            DeviceKind::Accelerator => Err(Error::Config(
                "this build has no accelerator backend; use device = \"cpu\"".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub reduction: Reduction,
    pub decomp: DecompLossWeights,
    pub d2s: D2SWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1000.0,
            reduction: Reduction::Mean,
            decomp: DecompLossWeights::default(),
            d2s: D2SWeights::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        self.decomp.validate()?;
        self.d2s.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 1,
            hidden: DEFAULT_HIDDEN,
            num_layers: DEFAULT_LAYERS,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> BundleSpec {
        BundleSpec {
            channels: self.channels,
            hidden: self.hidden,
            num_layers: self.num_layers,
            precision: self.precision,
        }
    }
}

/// Everything that determines a training run. Serialized as TOML or JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Training images are resized to `crop × crop`.
    pub crop: usize,
    /// Take a random `crop × crop` window instead of resizing.
    pub random_crop: bool,
    pub seed: u64,
    /// Seeded subset of the manifest, fixed before training starts.
    pub max_pairs: Option<usize>,
    /// Saves `checkpoints/step_NNNNNN.safetensors` every this many steps;
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub device: DeviceKind,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub pipeline: PipelineOptions,
    pub backbone: BackboneSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 4,
            max_steps: None,
            crop: 128,
            random_crop: false,
            seed: 0,
            max_pairs: None,
            checkpoint_every: 1000,
            grad_clip: None,
            device: DeviceKind::Cpu,
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            pipeline: PipelineOptions::default(),
            backbone: BackboneSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.crop < 16 {
            return Err(Error::Config(format!("crop must be ≥ 16, got {}", self.crop)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be ≥ 1".into()));
        }
        if self.max_pairs == Some(0) {
            return Err(Error::Config("max_pairs must be ≥ 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.model.spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss_weights.validate()?;
        self.device.device()?;
        Ok(())
    }

    /// Reads `.toml` or `.json`; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
        match ext.as_str() {
            "toml" => toml::from_str(&text).map_err(|e| bad(e.to_string())),
            "json" => serde_json::from_str(&text).map_err(|e| bad(e.to_string())),
            _ => Err(bad("config files must end in .toml or .json".into())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Total optimizer steps for a dataset of `n` pairs.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * steps_per_epoch(n, self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Pair order of one epoch; depends only on the seed and the epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Seeded subset of at most `max` pairs, kept in manifest order.
pub fn select_subset(manifest: &DatasetManifest, max: usize, seed: u64) -> DatasetManifest {
    let mut out = manifest.clone();
    if manifest.len() <= max {
        return out;
    }
    let mut idx = epoch_order(manifest.len(), seed, usize::MAX);
    idx.truncate(max);
    idx.sort_unstable();
    out.pairs = idx.into_iter().map(|i| manifest.pairs[i].clone()).collect();
    out
}

/// Adaptive-moment optimizer over named variables.
pub struct Adam {
    pub learning_rate: f64,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, learning_rate: f64) -> Result<Self> {
        let zeros = |p: &Var| p.as_tensor().zeros_like();
        let m = params
            .iter()
            .map(|(_, p)| zeros(p))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = params
            .iter()
            .map(|(_, p)| zeros(p))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            learning_rate,
            params,
            m,
            v,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<()> {
        let grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|(_, p)| match grads.get(p.as_tensor()) {
                Some(g) => Ok(g.clone()),
                None => Ok(p.as_tensor().zeros_like()?),
            })
            .collect::<Result<_>>()?;
        let scale = match clip {
            Some(max_norm) => {
                let mut sq = 0.0;
                for g in &grads {
                    sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let g = if scale == 1.0 {
                grads[i].clone()
            } else {
                grads[i].affine(scale, 0.0)?
            };
            let m = ((&self.m[i] * ADAM_BETA1)? + (&g * (1.0 - ADAM_BETA1))?)?;
            let v = ((&self.v[i] * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + ADAM_EPS)?;
            let update = ((&m / bc1)? / denom)?;
            p.set(&(p.as_tensor() - (update * self.learning_rate)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`, plus the
    /// step counter as `adam.t`.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut s = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            s.insert(format!("adam.m.{name}"), self.m[i].clone());
            s.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
        s.insert("adam.t".into(), Tensor::new(&[self.t as f64], &Device::Cpu)?);
        Ok(s)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = |k: &str| Error::IncompatibleCheckpoint(format!("optimizer state lacks {k}"));
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (key, slot) in [
                (format!("adam.m.{name}"), &mut self.m[i]),
                (format!("adam.v.{name}"), &mut self.v[i]),
            ] {
                let t = state.get(&key).ok_or_else(|| missing(&key))?;
                if t.dims() != p.dims() {
                    return Err(Error::IncompatibleCheckpoint(format!("{key} has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(p.dtype())?.to_device(p.device())?;
            }
        }
        let t = state.get("adam.t").ok_or_else(|| missing("adam.t"))?;
        self.t = t.to_dtype(DType::F64)?.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}

pub struct Batch {
    pub ids: Vec<String>,
    pub visible: Tensor,
    pub infrared: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[ImagePair], device: &Device, dtype: DType) -> Result<Self> {
        let vis: Vec<ImagePlane> = pairs.iter().map(|p| p.visible.clone()).collect();
        let ir: Vec<ImagePlane> = pairs.iter().map(|p| p.infrared.clone()).collect();
        Ok(Batch {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            visible: ImagePlane::batch_to_tensor(&vis, device, dtype)?,
            infrared: ImagePlane::batch_to_tensor(&ir, device, dtype)?,
        })
    }
}

/// Differentiable objective of one batch with its host-side breakdown.
pub struct StepLoss {
    pub total: Tensor,
    pub decomp: LossBreakdown,
    pub d2s: D2SBreakdown,
    /// `λ·decomp_total + d2s_total`, recomputed from the breakdowns.
    pub total_value: f64,
    pub fusion: FusionOutput,
    pub visible: DecompositionResult,
}

pub fn objective(
    bundle: &ModelBundle,
    fx: &FeatureExtractor,
    batch: &Batch,
    w: &LossWeights,
    opts: PipelineOptions,
) -> Result<StepLoss> {
    let vis = decompose_visible(bundle, &batch.visible, opts)?;
    let ir = decompose_infrared(bundle, &batch.infrared, opts)?;
    let fusion = fuse(&vis, &ir)?;
    let dl = decomposition_loss(&batch.visible, &vis, &ir, &w.decomp, w.reduction)?;
    let sl = d2s_loss(fx, &fusion.fused, &batch.visible, &batch.infrared, &w.d2s, w.reduction)?;
    let total = ((&dl.total * w.lambda)? + &sl.total)?;
    let decomp = dl.breakdown(&w.decomp)?;
    let d2s = sl.breakdown(&w.d2s)?;
    Ok(StepLoss {
        total,
        total_value: total_loss(&decomp, &d2s, w.lambda),
        decomp,
        d2s,
        fusion,
        visible: vis,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step; the loss is measured before its update.
    pub step: usize,
    pub epoch: usize,
    pub decomp: LossBreakdown,
    pub d2s: D2SBreakdown,
    pub total: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

/// Serves batches in seeded order, caching decoded pairs.
struct Loader<'a> {
    manifest: &'a DatasetManifest,
    config: &'a TrainConfig,
    cache: Vec<Option<ImagePair>>,
    device: Device,
}

impl<'a> Loader<'a> {
    fn new(manifest: &'a DatasetManifest, config: &'a TrainConfig, device: Device) -> Self {
        Loader {
            manifest,
            config,
            cache: vec![None; manifest.len()],
            device,
        }
    }

    fn pair(&mut self, i: usize) -> Result<&ImagePair> {
        if self.cache[i].is_none() {
            let c = self.config.crop;
            let opts = PairLoadOptions {
                gray_visible: self.config.model.channels == 1,
                size: if self.config.random_crop { None } else { Some((c, c)) },
            };
            self.cache[i] = Some(self.manifest.load_pair(i, opts)?);
        }
        Ok(self.cache[i].as_ref().expect("filled above"))
    }

    fn batch(&mut self, indices: &[usize], step: usize) -> Result<Batch> {
        let c = self.config.crop;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_c0de);
        rng.set_stream(step as u64);
        let random_crop = self.config.random_crop;
        let mut pairs = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.pair(i)?.clone();
            pairs.push(if random_crop {
                random_window(&p, c, &mut rng)?
            } else {
                p
            });
        }
        Batch::from_pairs(&pairs, &self.device, self.config.model.precision.dtype())
    }
}

fn random_window(p: &ImagePair, c: usize, rng: &mut ChaCha8Rng) -> Result<ImagePair> {
    let (h, w) = (p.visible.height(), p.visible.width());
    if h < c || w < c {
        return Ok(ImagePair {
            id: p.id.clone(),
            visible: resize(&p.visible, c, c)?,
            infrared: resize(&p.infrared, c, c)?,
        });
    }
    let (y0, x0) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
    let window = |img: &ImagePlane| ImagePlane::from_fn(c, c, img.channels(), |y, x, ch| img.get(y0 + y, x0 + x, ch));
    Ok(ImagePair {
        id: p.id.clone(),
        visible: window(&p.visible)?,
        infrared: window(&p.infrared)?,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints, the log and numeric dumps go; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint, including optimizer state.
    pub resume: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainLog,
    pub checkpoint: Option<PathBuf>,
    /// Backbone checksums before and after training.
    pub backbone_checksum: (String, String),
    pub steps: usize,
}

fn checkpoint_manifest(
    config: &TrainConfig,
    adam: &Adam,
    checksum: &str,
    epoch: usize,
    step: usize,
) -> CheckpointManifest {
    let mut m = CheckpointManifest::for_spec(&config.model.spec());
    m.epoch = epoch;
    m.step = step;
    m.loss_weights = serde_json::to_value(config.loss_weights).expect("weights serialize");
    m.extra = serde_json::json!({
        "learning_rate": config.learning_rate,
        "seed": config.seed,
        "optimizer_steps": adam.steps_taken(),
        "backbone_checksum": checksum,
        "pipeline": config.pipeline,
    });
    m
}

fn dump_numeric_failure(
    dir: &Path,
    step: usize,
    bundle: &ModelBundle,
    batch: &Batch,
    opts: PipelineOptions,
) -> Result<PathBuf> {
    let mut t: BTreeMap<String, Tensor> = bundle
        .named_parameters()
        .into_iter()
        .map(|(n, v)| (format!("param.{n}"), v.as_tensor().detach()))
        .collect();
    t.insert("input.visible".into(), batch.visible.clone());
    t.insert("input.infrared".into(), batch.infrared.clone());
    if let Ok(vis) = decompose_visible(bundle, &batch.visible, opts) {
        t.insert("visible.projected".into(), vis.projected.detach());
        t.insert("visible.illumination".into(), vis.illumination.detach());
        t.insert("visible.reflectance".into(), vis.reflectance.detach());
        if let Ok(ir) = decompose_infrared(bundle, &batch.infrared, opts) {
            t.insert("infrared.illumination".into(), ir.illumination.detach());
            t.insert("infrared.reflectance".into(), ir.reflectance.detach());
            if let Ok(f) = fuse(&vis, &ir) {
                t.insert("fused".into(), f.fused.detach());
            }
        }
    }
    let path = dir.join(format!("numeric_dump_step_{step:06}.safetensors"));
    let meta = std::collections::HashMap::from([("ids".to_string(), batch.ids.join(","))]);
    crate::archive::save(&path, &t, meta)?;
    Ok(path)
}

/// Jointly optimizes all five networks against the frozen backbone.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no pairs under {}",
            manifest.root.display()
        )));
    }
    let manifest = match config.max_pairs {
        Some(k) => select_subset(manifest, k, config.seed),
        None => manifest.clone(),
    };
    let device = config.device.device()?;
    let spec = config.model.spec();
    let dtype = spec.precision.dtype();
    let fx = FeatureExtractor::load(&config.backbone, &device, dtype)?;
    let checksum_before = fx.checksum()?;

    let (bundle, resume_state, start_step) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint_full(path, &spec, &device)?;
            (ck.bundle, Some(ck.state), ck.manifest.step)
        }
        None => (ModelBundle::build(spec, config.seed, &device)?, None, 0),
    };
    let mut adam = Adam::new(bundle.named_parameters(), config.learning_rate)?;
    if let Some(state) = &resume_state {
        adam.load_state(state)?;
    }

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(start_step > 0)
                .truncate(start_step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let n = manifest.len();
    let spe = steps_per_epoch(n, config.batch_size);
    let total_steps = config.total_steps(n);
    let mut loader = Loader::new(&manifest, config, device.clone());
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    let mut last_checkpoint = None;

    for s in start_step..total_steps {
        let epoch = s / spe;
        if epoch != order_epoch {
            order = epoch_order(n, config.seed, epoch);
            order_epoch = epoch;
        }
        let pos = s % spe;
        let indices = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(n)];
        let batch = loader.batch(indices, s)?;

        let loss = match objective(&bundle, &fx, &batch, &config.loss_weights, config.pipeline) {
            Ok(l) if l.total_value.is_finite() => l,
            outcome => {
                let reason = match outcome {
                    Ok(l) => format!("total loss {} at step {}", l.total_value, s + 1),
                    Err(e) => format!("{e} at step {}", s + 1),
                };
                let dumped = match &opts.out_dir {
                    Some(dir) => match dump_numeric_failure(dir, s + 1, &bundle, &batch, config.pipeline) {
                        Ok(p) => format!("; tensors dumped to {}", p.display()),
                        Err(e) => format!("; dump failed: {e}"),
                    },
                    None => String::new(),
                };
                return Err(Error::Numeric(format!("{reason}{dumped}")));
            }
        };
        let record = StepRecord {
            step: s + 1,
            epoch,
            decomp: loss.decomp,
            d2s: loss.d2s,
            total: loss.total_value,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = &mut log_file {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::debug!("step {} total {:.6}", record.step, record.total);
        log.records.push(record);

        let grads = loss.total.backward()?;
        adam.step(&grads, config.grad_clip)?;

        let done = s + 1;
        if let Some(dir) = &opts.out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < total_steps {
                let ckdir = dir.join("checkpoints");
                create_dir_all(&ckdir)?;
                let path = ckdir.join(format!("step_{done:06}.safetensors"));
                let m = checkpoint_manifest(config, &adam, &checksum_before, done / spe, done);
                save_checkpoint_with(&bundle, &path, &m, &adam.state()?)?;
                last_checkpoint = Some(path);
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        let steps = total_steps.max(start_step);
        let m = checkpoint_manifest(config, &adam, &checksum_before, steps / spe, steps);
        save_checkpoint_with(&bundle, &path, &m, &adam.state()?)?;
        write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
        last_checkpoint = Some(path);
    }
    let checksum_after = fx.checksum()?;
    Ok(TrainOutcome {
        bundle,
        log,
        checkpoint: last_checkpoint,
        backbone_checksum: (checksum_before, checksum_after),
        steps: total_steps.max(start_step),
    })
}

/// Fuses every pair of `manifest` and scores the clamped result. `size`
/// resizes pairs first; `None` evaluates at native resolution.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    pipeline: PipelineOptions,
    input: MetricInput,
    size: Option<(usize, usize)>,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no pairs under {}",
            manifest.root.display()
        )));
    }
    let mut rows = BTreeMap::new();
    for i in 0..manifest.len() {
        let pair = manifest.load_pair(
            i,
            PairLoadOptions {
                gray_visible: bundle.spec().channels == 1,
                size,
            },
        )?;
        let fused = fuse_images(bundle, &pair.visible, &pair.infrared, pipeline)?.clamped();
        let row = MetricRow::compute(
            &Gray::from_plane(&pair.visible, input),
            &Gray::from_plane(&pair.infrared, input),
            &Gray::from_plane(&fused, input),
        )?;
        rows.insert(pair.id, row);
    }
    Ok(MetricReport::from_rows(rows, Vec::new()))
}

/// `γ₂ × w_i` grid of the ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub gamma2: Vec<f64>,
    pub w_i: Vec<f64>,
}

impl SweepGrid {
    /// Parses `gamma2=0.5,2.5,wi=2,3`; `;` may separate the two lists.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("grid `{spec}`: {m}"));
        // lists[0]: gamma2, lists[1]: w_i
        let mut lists: [Option<Vec<f64>>; 2] = [None, None];
        let mut current = None;
        for token in spec.split([',', ';']).map(str::trim).filter(|t| !t.is_empty()) {
            let value = match token.split_once('=') {
                Some((key, value)) => {
                    let k = match key.trim().to_ascii_lowercase().as_str() {
                        "gamma2" | "g2" => 0,
                        "wi" | "w_i" => 1,
                        k => return Err(bad(format!("unknown key `{k}` (expected gamma2 or wi)"))),
                    };
                    if lists[k].is_some() {
                        return Err(bad(format!("key `{}` given twice", key.trim())));
                    }
                    lists[k] = Some(Vec::new());
                    current = Some(k);
                    value.trim()
                }
                None => token,
            };
            let k = current.ok_or_else(|| bad("values must follow `gamma2=` or `wi=`".into()))?;
            let v: f64 = value.parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("weights must be finite and ≥ 0, got {v}")));
            }
            lists[k].as_mut().expect("opened by its key").push(v);
        }
        let [gamma2, w_i] = lists.map(Option::unwrap_or_default);
        if gamma2.is_empty() || w_i.is_empty() {
            return Err(bad("both gamma2 and wi need at least one value".into()));
        }
        Ok(SweepGrid { gamma2, w_i })
    }

    /// Cells in γ₂-major order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.gamma2
            .iter()
            .flat_map(|&g| self.w_i.iter().map(move |&w| (g, w)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma2: f64,
    pub w_i: f64,
    pub metrics: Option<MetricRow>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Each cell trains into `out_dir/cell_<γ₂>_<w_i>/`.
    pub out_dir: Option<PathBuf>,
    pub eval_size: Option<(usize, usize)>,
    pub metric_input: MetricInput,
}

/// Trains one bundle per cell from the same seed and scores it on
/// `eval`. Failed cells are recorded and skipped.
pub fn ablation_sweep(
    grid: &SweepGrid,
    config: &TrainConfig,
    train_set: &DatasetManifest,
    eval: &DatasetManifest,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for (gamma2, w_i) in grid.cells() {
        let mut cfg = config.clone();
        cfg.loss_weights.d2s.gamma2 = gamma2;
        cfg.loss_weights.d2s.w_i = w_i;
        let cell_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("cell_{gamma2}_{w_i}"))),
            resume: None,
        };
        let result = train(&cfg, train_set, &cell_opts)
            .and_then(|o| evaluate_bundle(&o.bundle, eval, cfg.pipeline, opts.metric_input, opts.eval_size));
        let row = match result {
            Ok(report) => SweepRow {
                gamma2,
                w_i,
                metrics: Some(report.aggregate),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep cell gamma2={gamma2} w_i={w_i} failed: {e}");
                SweepRow {
                    gamma2,
                    w_i,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// `gamma2,w_i,en,sd,mi,nabf,error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma2,w_i,en,sd,mi,nabf,error\n");
    for r in rows {
        match (&r.metrics, &r.error) {
            (Some(m), _) => out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},\n",
                r.gamma2, r.w_i, m.en, m.sd, m.mi, m.nabf
            )),
            (None, e) => {
                let msg = e.as_deref().unwrap_or("failed").replace(['"', '\n'], " ");
                out.push_str(&format!("{},{},,,,,\"{msg}\"\n", r.gamma2, r.w_i));
            }
        }
    }
    out
}
