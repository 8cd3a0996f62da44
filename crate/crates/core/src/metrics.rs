//! Fusion quality metrics: entropy (En), standard deviation (SD), mutual
//! information (MI) and the modified fusion-artifact measure (Nabf).
//!
//! All metrics work on gray values in the 0–255 range. By default inputs are
//! quantized exactly as exported PNGs are (clamp, round to 8 bits); the float
//! variant keeps the unrounded values for SD and Nabf.
//!
//! Nabf constants:
//!
//! | name     | value  | role                                  |
//! |----------|--------|---------------------------------------|
//! | `Td`     | 2      | gradient strength threshold           |
//! | `wt_min` | 0.001  | weight below the threshold            |
//! | `Lg`     | 1.5    | weight exponent, `w = g^Lg`           |
//! | `Γg`     | 0.9999 | strength sigmoid gain                 |
//! | `κg`     | 19     | strength sigmoid slope                |
//! | `σg`     | 0.5    | strength sigmoid midpoint             |
//! | `Γa`     | 0.9995 | orientation sigmoid gain              |
//! | `κa`     | 22     | orientation sigmoid slope             |
//! | `σa`     | 0.5    | orientation sigmoid midpoint          |
//!
//! Gradients use 3×3 Sobel kernels with replicated borders.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{list_images, load_image, ImagePlane};

const BINS: usize = 256;

pub const NABF_TD: f64 = 2.0;
pub const NABF_WT_MIN: f64 = 0.001;
pub const NABF_LG: f64 = 1.5;
pub const NABF_GAIN_G: f64 = 0.9999;
pub const NABF_SLOPE_G: f64 = 19.0;
pub const NABF_MID_G: f64 = 0.5;
pub const NABF_GAIN_A: f64 = 0.9995;
pub const NABF_SLOPE_A: f64 = 22.0;
pub const NABF_MID_A: f64 = 0.5;

/// How float images are turned into metric inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricInput {
    /// Clamp to [0,1], round to 8 bits.
    #[default]
    EightBit,
    /// Clamp to [0,1], scale to 0–255 without rounding.
    Float,
}

/// Single-channel image on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "gray buffer of {} values does not match {height}×{width}",
                data.len()
            )));
        }
        Ok(Gray { height, width, data })
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Gray { height, width, data }
    }

    /// Color planes are converted to luma first.
    pub fn from_plane(img: &ImagePlane, input: MetricInput) -> Self {
        let g = if img.channels() == 1 {
            img.clone()
        } else {
            img.to_gray()
        };
        let data = match input {
            MetricInput::EightBit => g.to_u8().into_iter().map(f64::from).collect(),
            MetricInput::Float => g.data().iter().map(|&v| f64::from(v.clamp(0.0, 1.0)) * 255.0).collect(),
        };
        Gray {
            height: g.height(),
            width: g.width(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    fn bin(v: f64) -> usize {
        v.clamp(0.0, 255.0).round() as usize
    }

    fn non_empty(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::InvalidArgument("metric input image is empty".into()));
        }
        Ok(())
    }
}

fn same_size(a: &Gray, b: &Gray) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "metric inputs differ in size: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn plogp_sum(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

fn histogram(img: &Gray) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &v in &img.data {
        h[Gray::bin(v)] += 1;
    }
    h
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn entropy(img: &Gray) -> Result<f64> {
    img.non_empty()?;
    Ok(plogp_sum(histogram(img).into_iter(), img.data.len() as f64).max(0.0))
}

/// Population standard deviation.
pub fn standard_deviation(img: &Gray) -> Result<f64> {
    img.non_empty()?;
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// `I(A;B)` from the joint 256×256 histogram, in bits.
pub fn mutual_information(a: &Gray, b: &Gray) -> Result<f64> {
    a.non_empty()?;
    same_size(a, b)?;
    let mut joint = vec![0u64; BINS * BINS];
    for (&x, &y) in a.data.iter().zip(&b.data) {
        joint[Gray::bin(x) * BINS + Gray::bin(y)] += 1;
    }
    let (ha, hb) = (histogram(a), histogram(b));
    let n = a.data.len() as f64;
    let mut mi = 0.0;
    for i in 0..BINS {
        if ha[i] == 0 {
            continue;
        }
        for j in 0..BINS {
            let c = joint[i * BINS + j];
            if c == 0 {
                continue;
            }
            // p(a,b) / (p(a) p(b)) = c·n / (ha·hb)
            let ratio = (c as f64 * n) / (ha[i] as f64 * hb[j] as f64);
            mi += c as f64 / n * ratio.log2();
        }
    }
    Ok(mi.max(0.0))
}

/// `I(vis;F) + I(ir;F)`.
pub fn mi_fusion(vis: &Gray, ir: &Gray, fused: &Gray) -> Result<f64> {
    Ok(mutual_information(vis, fused)? + mutual_information(ir, fused)?)
}

struct Gradients {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn sobel(img: &Gray) -> Gradients {
    let n = img.data.len();
    let mut strength = Vec::with_capacity(n);
    let mut orientation = Vec::with_capacity(n);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let p = |dy: isize, dx: isize| img.at(y + dy, x + dx);
            let gv = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gh = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            strength.push((gv * gv + gh * gh).sqrt());
            orientation.push(if gv == 0.0 && gh == 0.0 { 0.0 } else { (gv / gh).atan() });
        }
    }
    Gradients { strength, orientation }
}

/// Edge preservation `Q^{XF}` per pixel.
fn preservation(x: &Gradients, f: &Gradients) -> Vec<f64> {
    x.strength
        .iter()
        .zip(&f.strength)
        .zip(x.orientation.iter().zip(&f.orientation))
        .map(|((&gx, &gf), (&ax, &af))| {
            let g = if gx == 0.0 || gf == 0.0 {
                0.0
            } else if gx > gf {
                gf / gx
            } else {
                gx / gf
            };
            let a = ((ax - af).abs() - FRAC_PI_2).abs() / FRAC_PI_2;
            let qg = NABF_GAIN_G / (1.0 + (-NABF_SLOPE_G * (g - NABF_MID_G)).exp());
            let qa = NABF_GAIN_A / (1.0 + (-NABF_SLOPE_A * (a - NABF_MID_A)).exp());
            (qg * qa).sqrt()
        })
        .collect()
}

fn edge_weight(g: f64) -> f64 {
    if g >= NABF_TD {
        g.powf(NABF_LG)
    } else {
        NABF_WT_MIN
    }
}

/// Modified fusion-artifact measure. Counts lost edge information only where
/// the fused gradient is stronger than both sources. Lower is better.
pub fn nabf(vis: &Gray, ir: &Gray, fused: &Gray) -> Result<f64> {
    vis.non_empty()?;
    same_size(vis, ir)?;
    same_size(vis, fused)?;
    let (ga, gb, gf) = (sobel(vis), sobel(ir), sobel(fused));
    let (qa, qb) = (preservation(&ga, &gf), preservation(&gb, &gf));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.strength.len() {
        let (sa, sb, sf) = (ga.strength[i], gb.strength[i], gf.strength[i]);
        let (wa, wb) = (edge_weight(sa), edge_weight(sb));
        den += wa + wb;
        if sf > sa && sf > sb {
            num += (1.0 - qa[i]) * wa + (1.0 - qb[i]) * wb;
        }
    }
    Ok((num / den).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub en: f64,
    pub sd: f64,
    pub mi: f64,
    pub nabf: f64,
}

impl MetricRow {
    pub fn compute(vis: &Gray, ir: &Gray, fused: &Gray) -> Result<Self> {
        Ok(MetricRow {
            en: entropy(fused)?,
            sd: standard_deviation(fused)?,
            mi: mi_fusion(vis, ir, fused)?,
            nabf: nabf(vis, ir, fused)?,
        })
    }

    /// Column-wise arithmetic mean; all zeros for an empty slice.
    pub fn mean<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> MetricRow {
        let mut acc = MetricRow::default();
        let mut n = 0usize;
        for r in rows {
            acc.en += r.en;
            acc.sd += r.sd;
            acc.mi += r.mi;
            acc.nabf += r.nabf;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let k = n as f64;
        MetricRow {
            en: acc.en / k,
            sd: acc.sd / k,
            mi: acc.mi / k,
            nabf: acc.nabf / k,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: BTreeMap<String, MetricRow>,
    pub aggregate: MetricRow,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(per_image: BTreeMap<String, MetricRow>, warnings: Vec<String>) -> Self {
        let aggregate = MetricRow::mean(per_image.values());
        MetricReport {
            per_image,
            aggregate,
            warnings,
        }
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }

    /// `id,en,sd,mi,nabf`, one row per image, then a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,en,sd,mi,nabf\n");
        let row = |id: &str, r: &MetricRow| format!("{id},{:.6},{:.6},{:.6},{:.6}\n", r.en, r.sd, r.mi, r.nabf);
        for (id, r) in &self.per_image {
            out.push_str(&row(id, r));
        }
        out.push_str(&row("MEAN", &self.aggregate));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

/// Scores every stem present in all three directories, in sorted stem order.
/// Stems missing from any directory are reported as warnings.
pub fn evaluate_directory(fused_dir: &Path, vis_dir: &Path, ir_dir: &Path, input: MetricInput) -> Result<MetricReport> {
    for d in [fused_dir, vis_dir, ir_dir] {
        if !d.is_dir() {
            return Err(Error::NotFound(d.to_path_buf()));
        }
    }
    let (fused, mut warnings) = list_images(fused_dir)?;
    let (vis, w) = list_images(vis_dir)?;
    warnings.extend(w);
    let (ir, w) = list_images(ir_dir)?;
    warnings.extend(w);

    let mut rows = BTreeMap::new();
    for (id, fused_path) in &fused {
        let (Some(vis_path), Some(ir_path)) = (vis.get(id), ir.get(id)) else {
            warnings.push(format!("{}: no matching visible/infrared source", fused_path.display()));
            continue;
        };
        let load = |p: &Path| load_image(p, true).map(|img| Gray::from_plane(&img, input));
        let (f, v, i) = (load(fused_path)?, load(vis_path)?, load(ir_path)?);
        let row = MetricRow::compute(&v, &i, &f).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{id}: {m}")),
            e => e,
        })?;
        rows.insert(id.clone(), row);
    }
    for (id, p) in vis.iter().chain(&ir) {
        if !fused.contains_key(id) {
            warnings.push(format!("{}: no fused image in {}", p.display(), fused_dir.display()));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no stems shared by {}, {} and {}",
            fused_dir.display(),
            vis_dir.display(),
            ir_dir.display()
        )));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(MetricReport::from_rows(rows, warnings))
}
