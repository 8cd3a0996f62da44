//! Resolution-preserving plain CNNs and the five-network bundle.
//!
//! Every network is a stack of 3×3 stride-1 convolutions with replicate
//! padding: ReLU after each hidden layer, a sigmoid on the last.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::conv::conv3x3_replicate;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 5;
pub const KERNEL: usize = 3;

/// Keeps the sigmoid strictly inside (0, 1) even when single-precision
/// rounding would saturate it.
const SIGMOID_MARGIN: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainCnnSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_channels: usize,
    pub num_layers: usize,
}

impl PlainCnnSpec {
    fn channel_plan(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.hidden_channels };
                let cout = if i + 1 == self.num_layers {
                    self.out_channels
                } else {
                    self.hidden_channels
                };
                (cin, cout)
            })
            .collect()
    }

    /// Weights plus biases over all layers.
    pub fn parameter_count(&self) -> usize {
        let k2 = KERNEL * KERNEL;
        let (i, h, o, n) = (
            self.in_channels,
            self.hidden_channels,
            self.out_channels,
            self.num_layers,
        );
        if n == 1 {
            return i * o * k2 + o;
        }
        (i * h * k2 + h) + (n - 2) * (h * h * k2 + h) + (h * o * k2 + o)
    }
}

struct ConvLayer {
    weight: Var,
    bias: Var,
}

pub struct PlainCnn {
    spec: PlainCnnSpec,
    layers: Vec<ConvLayer>,
}

impl PlainCnn {
    fn new(spec: PlainCnnSpec, rng: &mut ChaCha8Rng, device: &Device, dtype: DType) -> Result<Self> {
        if spec.num_layers == 0 || spec.hidden_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "network needs at least one layer and one hidden channel, got {spec:?}"
            )));
        }
        let plan = spec.channel_plan();
        let last = plan.len() - 1;
        let mut layers = Vec::with_capacity(plan.len());
        for (idx, (cin, cout)) in plan.into_iter().enumerate() {
            let fan_in = (cin * KERNEL * KERNEL) as f64;
            // He-style bound ahead of a ReLU, LeCun-style ahead of the sigmoid.
            let gain = if idx == last { 3.0 } else { 6.0 };
            let wb = (gain / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            let w: Vec<f64> = (0..cout * cin * KERNEL * KERNEL)
                .map(|_| rng.random_range(-wb..wb))
                .collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-bb..bb)).collect();
            let weight = Tensor::from_vec(w, (cout, cin, KERNEL, KERNEL), device)?.to_dtype(dtype)?;
            let bias = Tensor::from_vec(b, cout, device)?.to_dtype(dtype)?;
            layers.push(ConvLayer {
                weight: Var::from_tensor(&weight)?,
                bias: Var::from_tensor(&bias)?,
            });
        }
        Ok(PlainCnn { spec, layers })
    }

    pub fn spec(&self) -> &PlainCnnSpec {
        &self.spec
    }

    /// `N×C_in×H×W → N×C_out×H×W`, values strictly in (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| Error::shape(format!("network input must be N×C×H×W, got {:?}", x.dims())))?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("empty spatial extent"));
        }
        let last = self.layers.len() - 1;
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let conv = conv3x3_replicate(&y, layer.weight.as_tensor(), layer.bias.as_tensor())?;
            y = if i == last {
                squeezed_sigmoid(&conv)?
            } else {
                conv.relu()?
            };
        }
        Ok(y)
    }

    fn named_vars(&self, prefix: &str) -> Vec<(String, Var)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.conv{}.weight", i + 1), l.weight.clone()),
                    (format!("{prefix}.conv{}.bias", i + 1), l.bias.clone()),
                ]
            })
            .collect()
    }
}

/// `0.5 + (0.5 - m)·tanh(x/2)`: the logistic function pulled in by `m` at
/// both ends.
fn squeezed_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * (0.5 - SIGMOID_MARGIN))?.affine(1.0, 0.5)?)
}

/// Architecture of the five networks; hashed into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSpec {
    /// Pipeline channel count (visible image and reflectance).
    pub channels: usize,
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn default_layers() -> usize {
    DEFAULT_LAYERS
}

impl BundleSpec {
    pub fn new(channels: usize, hidden: usize) -> Self {
        BundleSpec {
            channels,
            hidden,
            num_layers: DEFAULT_LAYERS,
            precision: Precision::F32,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "pipeline channel count must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be at least 1".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidArgument("networks need at least one layer".into()));
        }
        Ok(())
    }

    /// Architecture fingerprint; precision is excluded because archives
    /// carry their own dtype tags.
    pub fn config_hash(&self) -> String {
        let canonical = format!(
            "retifuse-bundle/v1;channels={};hidden={};layers={};kernel={KERNEL};padding=replicate",
            self.channels, self.hidden, self.num_layers
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn net_specs(&self) -> [(&'static str, PlainCnnSpec); 5] {
        let net = |i, o| PlainCnnSpec {
            in_channels: i,
            out_channels: o,
            hidden_channels: self.hidden,
            num_layers: self.num_layers,
        };
        let c = self.channels;
        [
            ("p_net_vis", net(c, c)),
            ("ill_vis", net(c, 1)),
            ("ref_vis", net(c, c)),
            ("ill_ir", net(1, 1)),
            ("ref_ir", net(1, c)),
        ]
    }
}

/// The trainable networks: visible projection, illumination and
/// reflectance, plus the infrared illumination and reflectance branches.
pub struct ModelBundle {
    spec: BundleSpec,
    device: Device,
    pub p_net_vis: PlainCnn,
    pub ill_vis: PlainCnn,
    pub ref_vis: PlainCnn,
    pub ill_ir: PlainCnn,
    pub ref_ir: PlainCnn,
}

/// Single-precision bundle on the CPU with the default depth.
pub fn build_bundle(channels: usize, hidden: usize, seed: u64) -> Result<ModelBundle> {
    ModelBundle::build(BundleSpec::new(channels, hidden), seed, &Device::Cpu)
}

impl ModelBundle {
    pub fn build(spec: BundleSpec, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        let dtype = spec.precision.dtype();
        let mut nets = Vec::with_capacity(5);
        for (stream, (_, net_spec)) in spec.net_specs().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            nets.push(PlainCnn::new(net_spec, &mut rng, device, dtype)?);
        }
        let mut it = nets.into_iter();
        let mut next = || it.next().expect("five networks");
        Ok(ModelBundle {
            spec,
            device: device.clone(),
            p_net_vis: next(),
            ill_vis: next(),
            ref_vis: next(),
            ill_ir: next(),
            ref_ir: next(),
        })
    }

    pub fn spec(&self) -> &BundleSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.spec.precision.dtype()
    }

    pub fn networks(&self) -> [(&'static str, &PlainCnn); 5] {
        [
            ("p_net_vis", &self.p_net_vis),
            ("ill_vis", &self.ill_vis),
            ("ref_vis", &self.ref_vis),
            ("ill_ir", &self.ill_ir),
            ("ref_ir", &self.ref_ir),
        ]
    }

    /// Every trainable variable under its qualified name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        self.networks()
            .iter()
            .flat_map(|(name, net)| net.named_vars(name))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.spec.parameter_count()).sum()
    }

    /// Copies parameter values into fresh variables.
    pub fn deep_clone(&self) -> Result<ModelBundle> {
        let copy = ModelBundle::build(self.spec, 0, &self.device)?;
        for ((_, src), (_, dst)) in self.named_parameters().iter().zip(copy.named_parameters()) {
            dst.set(&src.as_tensor().copy()?)?;
        }
        Ok(copy)
    }

    /// Largest absolute difference between corresponding parameters.
    pub fn max_abs_diff(&self, other: &ModelBundle) -> Result<f64> {
        let mut worst = 0f64;
        for ((na, a), (nb, b)) in self.named_parameters().iter().zip(other.named_parameters()) {
            if na != &nb || a.dims() != b.dims() {
                return Err(Error::shape(format!("parameter {na} does not match {nb}")));
            }
            let d = (a.as_tensor().to_dtype(DType::F64)? - b.as_tensor().to_dtype(DType::F64)?)?
                .abs()?
                .max_all()?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

pub const CHECKPOINT_FORMAT: &str = "retifuse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";
/// Archive entries under this prefix hold training state, not parameters.
pub const STATE_PREFIX: &str = "state.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub spec: BundleSpec,
    pub epoch: usize,
    pub step: usize,
    #[serde(default)]
    pub loss_weights: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointManifest {
    pub fn for_spec(spec: &BundleSpec) -> Self {
        CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: spec.config_hash(),
            spec: *spec,
            epoch: 0,
            step: 0,
            loss_weights: serde_json::Value::Null,
            extra: serde_json::Value::Null,
        }
    }
}

/// `model.safetensors` → `model.safetensors.json`.
pub fn manifest_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    save_checkpoint_with(
        bundle,
        path,
        &CheckpointManifest::for_spec(bundle.spec()),
        &BTreeMap::new(),
    )
}

/// Writes parameters plus optional `state.*` tensors; the manifest is
/// embedded in the archive and mirrored to a JSON sidecar.
pub fn save_checkpoint_with(
    bundle: &ModelBundle,
    path: &Path,
    manifest: &CheckpointManifest,
    state: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = bundle
        .named_parameters()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    for (k, t) in state {
        tensors.insert(format!("{STATE_PREFIX}{k}"), t.clone());
    }
    let manifest_json =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest_json.clone())]);
    archive::save(path, &tensors, meta)?;
    crate::fsutil::write_atomic(&manifest_sidecar(path), manifest_json.as_bytes())
}

pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub manifest: CheckpointManifest,
    /// Training state with the `state.` prefix stripped.
    pub state: BTreeMap<String, Tensor>,
}

/// Reads only the embedded manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let archive = archive::load(path, &Device::Cpu)?;
    parse_manifest(&archive.metadata, path)
}

fn parse_manifest(meta: &HashMap<String, String>, path: &Path) -> Result<CheckpointManifest> {
    let raw = meta.get(MANIFEST_KEY).ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "archive carries no manifest".into(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(raw).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: format!("bad manifest: {e}"),
    })?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: format {} v{} is not {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path, spec: &BundleSpec) -> Result<ModelBundle> {
    Ok(load_checkpoint_full(path, spec, &Device::Cpu)?.bundle)
}

pub fn load_checkpoint_full(path: &Path, spec: &BundleSpec, device: &Device) -> Result<LoadedCheckpoint> {
    spec.validate()?;
    let archive = archive::load(path, device)?;
    let manifest = parse_manifest(&archive.metadata, path)?;
    if manifest.config_hash != spec.config_hash() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} was written for {:?}, requested {:?}",
            path.display(),
            manifest.spec,
            spec
        )));
    }
    let corrupt = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let bundle = ModelBundle::build(*spec, 0, device)?;
    let mut tensors = archive.tensors;
    for (name, var) in bundle.named_parameters() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| corrupt(format!("missing parameter {name}")))?;
        if t.dims() != var.dims() {
            return Err(corrupt(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(bundle.dtype())?)?;
    }
    let mut state = BTreeMap::new();
    for (name, t) in tensors {
        match name.strip_prefix(STATE_PREFIX) {
            Some(k) => {
                state.insert(k.to_string(), t);
            }
            None => return Err(corrupt(format!("unexpected archive entry {name}"))),
        }
    }
    Ok(LoadedCheckpoint {
        bundle,
        manifest,
        state,
    })
}
