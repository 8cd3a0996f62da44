//! Decomposition losses: projection, reflectance consistency and the
//! four-term Retinex loss, plus their weighted sum.
//!
//! Every squared-norm term uses the same [`Reduction`]; with the default
//! `Mean`, `‖x‖₂²` is the mean of the squared elements and the total
//! variation term is `mean|∂ₓL| + mean|∂ᵧL|`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::DecompositionResult;

/// Floor on the illumination in `i / stopgrad(L)`.
pub const ILLUMINATION_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Reduction::Mean => t.mean_all()?,
            Reduction::Sum => t.sum_all()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompLossWeights {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for DecompLossWeights {
    fn default() -> Self {
        DecompLossWeights {
            w0: 500.0,
            w1: 1.0,
            w2: 1.0,
        }
    }
}

impl DecompLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("w0", self.w0), ("w1", self.w1), ("w2", self.w2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Reduced squared difference of two same-shaped tensors.
pub fn squared_distance(a: &Tensor, b: &Tensor, r: Reduction) -> Result<Tensor> {
    same_shape(a, b, "squared distance")?;
    r.apply(&(a - b)?.sqr()?)
}

/// `‖I_vi − i_vi‖₂²`.
pub fn projection_loss(image: &Tensor, projected: &Tensor, r: Reduction) -> Result<Tensor> {
    same_shape(image, projected, "projection loss")?;
    squared_distance(image, projected, r)
}

/// `‖R_vi − R_ir‖₂²`.
pub fn consistency_loss(r_vis: &Tensor, r_ir: &Tensor, r: Reduction) -> Result<Tensor> {
    same_shape(r_vis, r_ir, "consistency loss")?;
    squared_distance(r_vis, r_ir, r)
}

/// Per-pixel maximum over channels, `N×C×H×W → N×1×H×W`.
pub fn initial_illumination(image: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = image
        .dims4()
        .map_err(|_| Error::shape(format!("expected N×C×H×W, got {:?}", image.dims())))?;
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("expected 1 or 3 channels, got {c}")));
    }
    if c == 1 {
        return Ok(image.clone());
    }
    Ok(image.max_keepdim(1)?)
}

/// Anisotropic total variation with forward differences; the replicated
/// last row/column contributes zero.
pub fn total_variation(l: &Tensor, r: Reduction) -> Result<Tensor> {
    let (_, _, h, w) = l.dims4()?;
    let mut sum = l.zeros_like()?.sum_all()?;
    if w > 1 {
        let dx = (l.narrow(3, 1, w - 1)? - l.narrow(3, 0, w - 1)?)?.abs()?.sum_all()?;
        sum = (sum + dx)?;
    }
    if h > 1 {
        let dy = (l.narrow(2, 1, h - 1)? - l.narrow(2, 0, h - 1)?)?.abs()?.sum_all()?;
        sum = (sum + dy)?;
    }
    Ok(match r {
        Reduction::Sum => sum,
        Reduction::Mean => (sum / l.elem_count() as f64)?,
    })
}

#[derive(Clone, Debug)]
pub struct RetinexTerms {
    /// `‖L∘R − i‖₂²`
    pub recon: Tensor,
    /// `‖R − i / stopgrad(L)‖₂²`
    pub ref_consistency: Tensor,
    /// `‖L − L₀‖₂²`
    pub illum_consistency: Tensor,
    /// `‖∇L‖₁`
    pub tv: Tensor,
}

impl RetinexTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((((&self.recon + &self.ref_consistency)? + &self.illum_consistency)? + &self.tv)?)
    }
}

/// Four-term Retinex loss.
///
/// `projected` is the image being decomposed (`i`); `source` is the image
/// the initial illumination `L₀` is read from (the raw input).
pub fn retinex_loss(
    illumination: &Tensor,
    reflectance: &Tensor,
    projected: &Tensor,
    source: &Tensor,
    r: Reduction,
) -> Result<RetinexTerms> {
    let (n, c, h, w) = reflectance.dims4()?;
    if illumination.dims() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "illumination {:?} must be single-channel and match reflectance {:?}",
            illumination.dims(),
            reflectance.dims()
        )));
    }
    same_shape(reflectance, projected, "reflectance vs projected image")?;
    let (_, sc, sh, sw) = source.dims4()?;
    if (sh, sw) != (h, w) || (sc != 1 && sc != c) {
        return Err(Error::shape(format!(
            "illumination source {:?} does not match {:?}",
            source.dims(),
            reflectance.dims()
        )));
    }

    let recon = squared_distance(&illumination.broadcast_mul(reflectance)?, projected, r)?;
    let floor = illumination.detach().maximum(ILLUMINATION_FLOOR)?;
    let ratio = projected.broadcast_div(&floor)?;
    let ref_consistency = squared_distance(reflectance, &ratio, r)?;
    let l0 = initial_illumination(source)?;
    let illum_consistency = squared_distance(illumination, &l0, r)?;
    let tv = total_variation(illumination, r)?;
    let terms = RetinexTerms {
        recon,
        ref_consistency,
        illum_consistency,
        tv,
    };
    let total: f64 = terms.total()?.to_dtype(DType::F64)?.to_scalar()?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("Retinex loss is {total}")));
    }
    Ok(terms)
}

/// Host-side copy of every decomposition term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetinexBreakdown {
    pub recon: f64,
    pub ref_consistency: f64,
    pub illum_consistency: f64,
    pub tv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub projection: f64,
    pub consistency: f64,
    pub retinex: f64,
    pub retinex_terms: RetinexBreakdown,
    pub decomp_total: f64,
}

impl LossBreakdown {
    /// Fills the derived sums from the individual terms.
    pub fn from_terms(projection: f64, consistency: f64, terms: RetinexBreakdown, w: &DecompLossWeights) -> Self {
        let retinex = terms.recon + terms.ref_consistency + terms.illum_consistency + terms.tv;
        LossBreakdown {
            projection,
            consistency,
            retinex,
            retinex_terms: terms,
            decomp_total: w.w0 * projection + w.w1 * consistency + w.w2 * retinex,
        }
    }
}

/// Differentiable decomposition loss with its components.
#[derive(Clone, Debug)]
pub struct DecompLoss {
    pub projection: Tensor,
    pub consistency: Tensor,
    pub retinex: RetinexTerms,
    pub total: Tensor,
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl DecompLoss {
    pub fn breakdown(&self, w: &DecompLossWeights) -> Result<LossBreakdown> {
        let terms = RetinexBreakdown {
            recon: scalar(&self.retinex.recon)?,
            ref_consistency: scalar(&self.retinex.ref_consistency)?,
            illum_consistency: scalar(&self.retinex.illum_consistency)?,
            tv: scalar(&self.retinex.tv)?,
        };
        Ok(LossBreakdown::from_terms(
            scalar(&self.projection)?,
            scalar(&self.consistency)?,
            terms,
            w,
        ))
    }
}

/// `w0·L_P + w1·L_C + w2·L_R`; projection and Retinex terms act on the
/// visible stream only.
pub fn decomposition_loss(
    visible: &Tensor,
    vis: &DecompositionResult,
    ir: &DecompositionResult,
    w: &DecompLossWeights,
    r: Reduction,
) -> Result<DecompLoss> {
    let projection = projection_loss(visible, &vis.projected, r)?;
    let consistency = consistency_loss(&vis.reflectance, &ir.reflectance, r)?;
    let retinex = retinex_loss(&vis.illumination, &vis.reflectance, &vis.projected, visible, r)?;
    let total =
        ((projection.affine(w.w0, 0.0)? + consistency.affine(w.w1, 0.0)?)? + retinex.total()?.affine(w.w2, 0.0)?)?;
    Ok(DecompLoss {
        projection,
        consistency,
        retinex,
        total,
    })
}
