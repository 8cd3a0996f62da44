//! Forward path: decompose both modalities, then combine the parts with the
//! closed-form fusion layer `(L_vi + L_ir) ⊙ (R_vi + R_ir)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::ImagePlane;
use crate::nets::ModelBundle;

/// Which image the illumination/reflectance networks read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecomposeInput {
    /// The raw source image; the projected image only enters the losses.
    #[default]
    Raw,
    /// The projection network's output.
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    #[serde(default)]
    pub decompose_input: DecomposeInput,
}

/// Batched `N×·×H×W` decomposition of one modality.
#[derive(Clone, Debug)]
pub struct DecompositionResult {
    pub projected: Tensor,
    /// Single channel.
    pub illumination: Tensor,
    /// Pipeline channel count.
    pub reflectance: Tensor,
    pub modality: Modality,
}

impl DecompositionResult {
    /// `‖L∘R − i‖₂ / ‖i‖₂` per batch item.
    pub fn relative_reconstruction_error(&self) -> Result<Vec<f64>> {
        let recon = self.illumination.broadcast_mul(&self.reflectance)?;
        let diff = (recon - &self.projected)?.sqr()?.flatten_from(1)?.sum(1)?;
        let norm = self.projected.sqr()?.flatten_from(1)?.sum(1)?;
        let diff: Vec<f64> = diff.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let norm: Vec<f64> = norm.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        Ok(diff
            .iter()
            .zip(&norm)
            .map(|(d, n)| (d / n.max(f64::MIN_POSITIVE)).sqrt())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Raw fused values in (0, 4); clamp at export time.
    pub fused: Tensor,
    pub l_vi: Tensor,
    pub l_ir: Tensor,
    pub r_vi: Tensor,
    pub r_ir: Tensor,
}

fn check_input(x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x
        .dims4()
        .map_err(|_| Error::shape(format!("{what} must be N×C×H×W, got {:?}", x.dims())))?;
    if c != channels {
        return Err(Error::shape(format!(
            "{what} has {c} channels, the bundle expects {channels}"
        )));
    }
    Ok((n, h, w))
}

pub fn decompose_visible(bundle: &ModelBundle, visible: &Tensor, opts: PipelineOptions) -> Result<DecompositionResult> {
    check_input(visible, bundle.spec().channels, "visible image")?;
    let projected = bundle.p_net_vis.forward(visible)?;
    let source = match opts.decompose_input {
        DecomposeInput::Raw => visible,
        DecomposeInput::Projected => &projected,
    };
    let illumination = bundle.ill_vis.forward(source)?;
    let reflectance = bundle.ref_vis.forward(source)?;
    Ok(DecompositionResult {
        projected,
        illumination,
        reflectance,
        modality: Modality::Visible,
    })
}

/// The infrared stream uses an identity projection.
pub fn decompose_infrared(
    bundle: &ModelBundle,
    infrared: &Tensor,
    _opts: PipelineOptions,
) -> Result<DecompositionResult> {
    check_input(infrared, 1, "infrared image")?;
    let illumination = bundle.ill_ir.forward(infrared)?;
    let reflectance = bundle.ref_ir.forward(infrared)?;
    Ok(DecompositionResult {
        projected: infrared.clone(),
        illumination,
        reflectance,
        modality: Modality::Infrared,
    })
}

/// `(L_vi + L_ir) ⊙ (R_vi + R_ir)`, illumination broadcast over channels.
pub fn fuse(vis: &DecompositionResult, ir: &DecompositionResult) -> Result<FusionOutput> {
    let (lv, li, rv, ri) = (&vis.illumination, &ir.illumination, &vis.reflectance, &ir.reflectance);
    let (n, _, h, w) = rv.dims4()?;
    if ri.dims() != rv.dims() {
        return Err(Error::shape(format!(
            "reflectance shapes differ: visible {:?}, infrared {:?}",
            rv.dims(),
            ri.dims()
        )));
    }
    for (name, l) in [("visible", lv), ("infrared", li)] {
        if l.dims() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "{name} illumination {:?} cannot broadcast over reflectance {:?}",
                l.dims(),
                rv.dims()
            )));
        }
    }
    let fused = (lv + li)?.broadcast_mul(&(rv + ri)?)?;
    Ok(FusionOutput {
        fused,
        l_vi: lv.clone(),
        l_ir: li.clone(),
        r_vi: rv.clone(),
        r_ir: ri.clone(),
    })
}

pub fn fuse_pair(
    bundle: &ModelBundle,
    visible: &Tensor,
    infrared: &Tensor,
    opts: PipelineOptions,
) -> Result<FusionOutput> {
    let (nv, hv, wv) = check_input(visible, bundle.spec().channels, "visible image")?;
    let (ni, hi, wi) = check_input(infrared, 1, "infrared image")?;
    if (nv, hv, wv) != (ni, hi, wi) {
        return Err(Error::shape(format!(
            "visible is {nv}×{hv}×{wv}, infrared is {ni}×{hi}×{wi}"
        )));
    }
    let vis = decompose_visible(bundle, visible, opts)?;
    let ir = decompose_infrared(bundle, infrared, opts)?;
    fuse(&vis, &ir)
}

/// Image-level entry point: returns the raw (unclamped) fused plane.
pub fn fuse_images(
    bundle: &ModelBundle,
    visible: &ImagePlane,
    infrared: &ImagePlane,
    opts: PipelineOptions,
) -> Result<ImagePlane> {
    if (visible.height(), visible.width()) != (infrared.height(), infrared.width()) {
        return Err(Error::shape(format!(
            "visible is {}x{}, infrared is {}x{}",
            visible.height(),
            visible.width(),
            infrared.height(),
            infrared.width()
        )));
    }
    let v = visible.to_tensor(bundle.device(), bundle.dtype())?;
    let i = infrared.to_tensor(bundle.device(), bundle.dtype())?;
    let out = fuse_pair(bundle, &v, &i, opts)?;
    Ok(ImagePlane::from_tensor(&out.fused)?.remove(0))
}
