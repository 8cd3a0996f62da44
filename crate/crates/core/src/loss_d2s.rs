//! Detail-to-semantic loss: pixel, shallow-feature, middle-feature and
//! deep Gram terms, plus the overall training objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, NUM_TAPS};
use crate::loss_decomp::{same_shape, scalar, squared_distance, LossBreakdown, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D2SWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma4: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub w_v: f64,
    pub w_i: f64,
}

impl Default for D2SWeights {
    fn default() -> Self {
        D2SWeights {
            gamma1: 10.0,
            gamma2: 2.5,
            gamma4: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            w_v: 0.5,
            w_i: 2.0,
        }
    }
}

impl D2SWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma4", self.gamma4),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("w_v", self.w_v),
            ("w_i", self.w_i),
        ];
        for (n, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct D2SBreakdown {
    pub pixel: f64,
    pub shallow: f64,
    pub middle: f64,
    pub deep: f64,
    pub d2s_total: f64,
}

impl D2SBreakdown {
    pub fn from_terms(pixel: f64, shallow: f64, middle: f64, deep: f64, w: &D2SWeights) -> Self {
        D2SBreakdown {
            pixel,
            shallow,
            middle,
            deep,
            d2s_total: w.gamma1 * pixel + w.gamma2 * shallow + middle + w.gamma4 * deep,
        }
    }
}

/// `λ·decomp_total + d2s_total`.
pub fn total_loss(decomp: &LossBreakdown, d2s: &D2SBreakdown, lambda: f64) -> f64 {
    lambda * decomp.decomp_total + d2s.d2s_total
}

/// `N×C×H×W → N×C×C` (or `C×H×W → C×C`), `F·Fᵀ / (C·H·W)`.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let batched = match features.rank() {
        3 => false,
        4 => true,
        r => return Err(Error::shape(format!("gram needs rank 3 or 4, got {r}"))),
    };
    let f = if batched {
        features.clone()
    } else {
        features.unsqueeze(0)?
    };
    let (n, c, h, w) = f.dims4()?;
    let flat = f.reshape((n, c, h * w))?;
    let g = (flat.matmul(&flat.t()?)? / (c * h * w) as f64)?;
    Ok(if batched { g } else { g.squeeze(0)? })
}

/// `‖F − V‖²`.
pub fn pixel_loss(fused: &Tensor, visible: &Tensor, r: Reduction) -> Result<Tensor> {
    same_shape(fused, visible, "pixel loss")?;
    squared_distance(fused, visible, r)
}

/// `‖Φ¹(F) − Φ¹(V)‖²`.
pub fn shallow_loss(fx: &FeatureExtractor, fused: &Tensor, visible: &Tensor, r: Reduction) -> Result<Tensor> {
    same_shape(fused, visible, "shallow loss")?;
    squared_distance(&fx.extract(fused, 1)?, &fx.extract(visible, 1)?, r)
}

fn middle_from_taps(f: &[Tensor], v: &[Tensor], i: &[Tensor], w: &D2SWeights, r: Reduction) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (k, beta) in [(1usize, w.beta2), (2, w.beta3)] {
        let target = (i[k].affine(w.w_i, 0.0)? + v[k].affine(w.w_v, 0.0)?)?;
        let term = squared_distance(&f[k], &target, r)?.affine(beta, 0.0)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("two blocks"))
}

/// `Σ_{k∈{2,3}} βᵏ‖Φᵏ(F) − (w_i·Φᵏ(IR) + w_v·Φᵏ(V))‖²`.
pub fn middle_loss(
    fx: &FeatureExtractor,
    fused: &Tensor,
    visible: &Tensor,
    infrared: &Tensor,
    w: &D2SWeights,
    r: Reduction,
) -> Result<Tensor> {
    let f = fx.features(fused, 3)?;
    let v = fx.features(visible, 3)?;
    let i = fx.features(infrared, 3)?;
    same_shape(&f[2], &v[2], "middle loss (visible)")?;
    same_shape(&f[2], &i[2], "middle loss (infrared)")?;
    middle_from_taps(&f, &v, &i, w, r)
}

/// `‖Gram(Φ⁴(F)) − Gram(Φ⁴(IR))‖²`.
pub fn deep_loss(fx: &FeatureExtractor, fused: &Tensor, infrared: &Tensor, r: Reduction) -> Result<Tensor> {
    let a = fx.extract(fused, 4)?;
    let b = fx.extract(infrared, 4)?;
    same_shape(&a, &b, "deep loss")?;
    squared_distance(&gram(&a)?, &gram(&b)?, r)
}

/// Features of the two source images. They carry no trainable inputs, so
/// one extraction per batch serves every step of the loss.
pub struct SourceFeatures {
    pub visible: Vec<Tensor>,
    pub infrared: Vec<Tensor>,
    pub infrared_gram: Tensor,
}

impl SourceFeatures {
    pub fn extract(fx: &FeatureExtractor, visible: &Tensor, infrared: &Tensor) -> Result<Self> {
        let visible = fx
            .features(&visible.detach(), NUM_TAPS)?
            .into_iter()
            .map(|t| t.detach())
            .collect();
        let infrared: Vec<Tensor> = fx
            .features(&infrared.detach(), NUM_TAPS)?
            .into_iter()
            .map(|t| t.detach())
            .collect();
        let infrared_gram = gram(&infrared[NUM_TAPS - 1])?;
        Ok(SourceFeatures {
            visible,
            infrared,
            infrared_gram,
        })
    }
}

#[derive(Clone, Debug)]
pub struct D2SLoss {
    pub pixel: Tensor,
    pub shallow: Tensor,
    pub middle: Tensor,
    pub deep: Tensor,
    pub total: Tensor,
}

impl D2SLoss {
    pub fn breakdown(&self, w: &D2SWeights) -> Result<D2SBreakdown> {
        Ok(D2SBreakdown::from_terms(
            scalar(&self.pixel)?,
            scalar(&self.shallow)?,
            scalar(&self.middle)?,
            scalar(&self.deep)?,
            w,
        ))
    }
}

/// `γ1·pixel + γ2·shallow + middle + γ4·deep` against precomputed source
/// features.
pub fn d2s_loss_with_sources(
    fx: &FeatureExtractor,
    fused: &Tensor,
    visible: &Tensor,
    sources: &SourceFeatures,
    w: &D2SWeights,
    r: Reduction,
) -> Result<D2SLoss> {
    let pixel = pixel_loss(fused, visible, r)?;
    let f = fx.features(fused, NUM_TAPS)?;
    for (k, (a, b)) in f.iter().zip(&sources.visible).enumerate() {
        same_shape(a, b, &format!("tap {} features", k + 1))?;
    }
    let shallow = squared_distance(&f[0], &sources.visible[0], r)?;
    let middle = middle_from_taps(&f, &sources.visible, &sources.infrared, w, r)?;
    let deep = squared_distance(&gram(&f[NUM_TAPS - 1])?, &sources.infrared_gram, r)?;
    let total = (((pixel.affine(w.gamma1, 0.0)? + shallow.affine(w.gamma2, 0.0)?)? + &middle)?
        + deep.affine(w.gamma4, 0.0)?)?;
    Ok(D2SLoss {
        pixel,
        shallow,
        middle,
        deep,
        total,
    })
}

pub fn d2s_loss(
    fx: &FeatureExtractor,
    fused: &Tensor,
    visible: &Tensor,
    infrared: &Tensor,
    w: &D2SWeights,
    r: Reduction,
) -> Result<D2SLoss> {
    same_shape(fused, visible, "d2s loss")?;
    let sources = SourceFeatures::extract(fx, visible, infrared)?;
    d2s_loss_with_sources(fx, fused, visible, &sources, w, r)
}
