//! Frozen VGG-16 convolutional trunk (through `conv4_3`) used as the
//! feature extractor of the detail-to-semantic loss.
//!
//! Taps sit on the last ReLU of each block, before pooling:
//!
//! | tap | layer     | channels | scale |
//! |-----|-----------|----------|-------|
//! | 1   | relu1_2   | 64       | 1     |
//! | 2   | relu2_2   | 128      | 1/2   |
//! | 3   | relu3_3   | 256      | 1/4   |
//! | 4   | relu4_3   | 512      | 1/8   |
//!
//! Weights are plain tensors, never variables, so no gradient is ever
//! produced for them.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::conv::{max_pool2x2, FrozenConv3x3};
use crate::error::{Error, Result};

pub const NUM_TAPS: usize = 4;
/// Convolutions per block.
const BLOCKS: [usize; NUM_TAPS] = [2, 2, 3, 3];
/// Indices of the convolution layers inside torchvision's `vgg16().features`.
const TORCHVISION_CONV_INDICES: [usize; 10] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Where the backbone weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSource {
    /// ImageNet-pretrained weights converted by `scripts/fetch_vgg16.py`.
    Pretrained {
        path: PathBuf,
        #[serde(default)]
        sha256: Option<String>,
    },
    /// Seeded random weights with the same topology. Only meaningful for
    /// tests and desk-scale runs where the pretrained archive is absent.
    Surrogate {
        seed: u64,
        #[serde(default = "default_width")]
        base_width: usize,
    },
}

fn default_width() -> usize {
    64
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Pretrained {
            path: PathBuf::from("weights/vgg16_features.safetensors"),
            sha256: None,
        }
    }
}

pub struct FeatureExtractor {
    convs: Vec<FrozenConv3x3>,
    mean: Tensor,
    std: Tensor,
    base_width: usize,
    dtype: DType,
}

impl FeatureExtractor {
    pub fn load(source: &BackboneSource, device: &Device, dtype: DType) -> Result<Self> {
        match source {
            BackboneSource::Pretrained { path, sha256 } => Self::from_file(path, sha256.as_deref(), device, dtype),
            BackboneSource::Surrogate { seed, base_width } => Self::surrogate(*seed, *base_width, device, dtype),
        }
    }

    /// Reads a safetensors archive keyed like torchvision
    /// (`features.{idx}.weight` / `.bias`).
    pub fn from_file(path: &Path, sha256: Option<&str>, device: &Device, dtype: DType) -> Result<Self> {
        let unavailable = |reason: String| Error::WeightsUnavailable {
            path: path.to_path_buf(),
            reason,
        };
        if !path.exists() {
            return Err(unavailable("file does not exist".into()));
        }
        if let Some(expected) = sha256 {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let got = hex(&Sha256::digest(&bytes));
            if !got.eq_ignore_ascii_case(expected) {
                return Err(unavailable(format!("checksum {got} does not match {expected}")));
            }
        }
        let mut archive = archive::load(path, device)?;
        let mut convs = Vec::with_capacity(TORCHVISION_CONV_INDICES.len());
        for idx in TORCHVISION_CONV_INDICES {
            let mut take = |suffix: &str| {
                let key = format!("features.{idx}.{suffix}");
                archive
                    .tensors
                    .remove(&key)
                    .ok_or_else(|| unavailable(format!("archive lacks {key}")))
            };
            let w = take("weight")?.to_dtype(dtype)?;
            let b = take("bias")?.to_dtype(dtype)?;
            convs.push((w, b));
        }
        let base_width = convs[0].0.dim(0)?;
        check_topology(&convs, base_width)?;
        Self::assemble(convs, base_width, device, dtype)
    }

    /// Seeded He-uniform weights, zero biases.
    pub fn surrogate(seed: u64, base_width: usize, device: &Device, dtype: DType) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::InvalidArgument("backbone width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (block, &n) in BLOCKS.iter().enumerate() {
            let cout = block_width(base_width, block);
            for _ in 0..n {
                let fan_in = (cin * 9) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
                let w = Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
                let b = Tensor::zeros(cout, dtype, device)?;
                convs.push((w, b));
                cin = cout;
            }
        }
        Self::assemble(convs, base_width, device, dtype)
    }

    fn assemble(convs: Vec<(Tensor, Tensor)>, base_width: usize, device: &Device, dtype: DType) -> Result<Self> {
        let convs = convs
            .into_iter()
            .map(|(w, b)| FrozenConv3x3::new(w, b))
            .collect::<Result<Vec<_>>>()?;
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(FeatureExtractor {
            convs,
            mean,
            std,
            base_width,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Channel count at tap `k` (1-based).
    pub fn tap_channels(&self, k: usize) -> usize {
        block_width(self.base_width, k - 1)
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.convs.iter().flat_map(|c| [c.weight(), c.bias()])
    }

    /// SHA-256 over every weight's little-endian bytes.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for t in self.weights() {
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    /// Gray inputs are replicated to three channels, then normalized with
    /// the ImageNet statistics.
    fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x
            .dims4()
            .map_err(|_| Error::shape(format!("feature input must be N×C×H×W, got {:?}", x.dims())))?;
        let x = match c {
            1 => Tensor::cat(&[x, x, x], 1)?,
            3 => x.clone(),
            _ => return Err(Error::shape(format!("feature input needs 1 or 3 channels, got {c}"))),
        };
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    /// Activations at taps `1..=upto`.
    pub fn features(&self, x: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        if !(1..=NUM_TAPS).contains(&upto) {
            return Err(Error::InvalidArgument(format!(
                "tap index must be in 1..=4, got {upto}"
            )));
        }
        if x.dtype() != self.dtype {
            return Err(Error::shape(format!(
                "feature input is {:?}, backbone is {:?}",
                x.dtype(),
                self.dtype
            )));
        }
        let mut y = self.preprocess(x)?;
        let mut taps = Vec::with_capacity(upto);
        let mut layer = 0;
        for (block, &n) in BLOCKS.iter().enumerate().take(upto) {
            if block > 0 {
                let (_, _, h, w) = y.dims4()?;
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!(
                        "input too small for tap {}: {h}x{w} before pooling",
                        block + 1
                    )));
                }
                y = max_pool2x2(&y)?;
            }
            for _ in 0..n {
                y = self.convs[layer].forward(&y)?.relu()?;
                layer += 1;
            }
            taps.push(y.clone());
        }
        Ok(taps)
    }

    /// Activation at tap `k` (1-based).
    pub fn extract(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        Ok(self.features(x, k)?.pop().expect("at least one tap"))
    }
}

fn check_topology(convs: &[(Tensor, Tensor)], base_width: usize) -> Result<()> {
    let mut cin = 3;
    let mut i = 0;
    for (block, &n) in BLOCKS.iter().enumerate() {
        let cout = block_width(base_width, block);
        for _ in 0..n {
            let (w, b) = &convs[i];
            if w.dims() != [cout, cin, 3, 3] || b.dims() != [cout] {
                return Err(Error::Shape(format!(
                    "backbone conv {i} has shape {:?}, expected {:?}",
                    w.dims(),
                    [cout, cin, 3, 3]
                )));
            }
            cin = cout;
            i += 1;
        }
    }
    Ok(())
}

fn block_width(base: usize, block: usize) -> usize {
    base << block.min(3)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
