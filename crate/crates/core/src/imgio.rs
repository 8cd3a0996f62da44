//! Image loading, normalization, resizing, persistence and the paired
//! infrared/visible dataset layout.
//!
//! A dataset root holds two sibling directories, `ir/` and `vis/`, whose
//! files are paired by their shared file stem.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Luminance weights applied when collapsing RGB to gray.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

/// An `H×W×C` image with interleaved channels and intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    data: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ImagePlane {
            data,
            height,
            width,
            channels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> ImagePlane {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Linear min-max stretch to `[0, 1]`; constant images map to zero.
    pub fn stretched(&self) -> ImagePlane {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        if span <= 0.0 || !span.is_finite() {
            return self.map(|_| 0.0);
        }
        self.map(|v| (v - lo) / span)
    }

    /// Single-channel luminance; gray images are returned unchanged.
    pub fn to_gray(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect();
        ImagePlane {
            data,
            height: self.height,
            width: self.width,
            channels: 1,
        }
    }

    /// Quantizes to 8 bits: clamp to `[0, 1]`, then `round(v * 255)` with
    /// halves rounded up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// `1×C×H×W` tensor on `device`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), device, dtype)
    }

    /// Stacks same-shaped planes into an `N×C×H×W` tensor.
    pub fn batch_to_tensor(planes: &[ImagePlane], device: &Device, dtype: DType) -> Result<Tensor> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w, c) = first.dims();
        let mut buf = Vec::with_capacity(planes.len() * h * w * c);
        for p in planes {
            if p.dims() != (h, w, c) {
                return Err(Error::shape(format!(
                    "batch mixes {}x{}x{} with {h}x{w}x{c}",
                    p.height, p.width, p.channels
                )));
            }
            for ch in 0..c {
                buf.extend((0..h * w).map(|i| p.data[i * c + ch]));
            }
        }
        let t = Tensor::from_vec(buf, (planes.len(), c, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Extracts every item of an `N×C×H×W` (or `C×H×W`) tensor. Values are
    /// copied as-is; no clamping is applied.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<ImagePlane>> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t.clone(),
            r => return Err(Error::shape(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (n, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        (0..n)
            .map(|b| {
                let base = b * c * h * w;
                let mut data = vec![0f32; h * w * c];
                for ch in 0..c {
                    for i in 0..h * w {
                        data[i * c + ch] = flat[base + ch * h * w + i];
                    }
                }
                ImagePlane::new(h, w, c, data)
            })
            .collect()
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Loads an 8-bit PNG, BMP, JPEG or TIFF file into `[0, 1]`.
pub fn load_image(path: &Path, force_gray: bool) -> Result<ImagePlane> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat(format!("{}: {u}", path.display())),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let plane = dynamic_to_plane(&img, path)?;
    Ok(if force_gray { plane.to_gray() } else { plane })
}

fn dynamic_to_plane(img: &DynamicImage, path: &Path) -> Result<ImagePlane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => ImagePlane::from_u8(h, w, 1, buf.as_raw()),
        DynamicImage::ImageLumaA8(_) => ImagePlane::from_u8(h, w, 1, img.to_luma8().as_raw()),
        DynamicImage::ImageRgb8(buf) => ImagePlane::from_u8(h, w, 3, buf.as_raw()),
        DynamicImage::ImageRgba8(_) => ImagePlane::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        other => Err(Error::UnsupportedFormat(format!(
            "{}: only 8-bit images are supported, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Encodes an image as an 8-bit PNG in memory.
pub fn encode_png(img: &ImagePlane) -> Result<Vec<u8>> {
    let bytes = img.to_u8();
    let (h, w, c) = img.dims();
    let dynimg = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageLuma8),
        _ => image::RgbImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageRgb8),
    }
    .ok_or_else(|| Error::shape("image buffer does not match its dimensions"))?;
    let mut out = Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(out.into_inner())
}

/// Clamps to `[0, 1]`, quantizes to 8 bits and writes a PNG atomically.
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "refusing to save non-finite values to {}",
            path.display()
        )));
    }
    fsutil::write_atomic(path, &encode_png(img)?)
}

/// Bilinear resize with half-pixel sample centers and edge clamping.
pub fn resize(img: &ImagePlane, h: usize, w: usize) -> Result<ImagePlane> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {h}x{w}"
        )));
    }
    let (sh, sw, c) = img.dims();
    if (sh, sw) == (h, w) {
        return Ok(img.clone());
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let cols: Vec<_> = (0..w).map(|x| taps(x, sw, w)).collect();
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        let (y0, y1, fy) = taps(y, sh, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out[(y * w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    ImagePlane::new(h, w, c, out)
}

/// Full-range BT.601 RGB → (Y, Cb, Cr) planes, each single channel.
pub fn rgb_to_ycbcr(img: &ImagePlane) -> Result<(ImagePlane, ImagePlane, ImagePlane)> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(
            "YCbCr conversion needs a 3-channel image".into(),
        ));
    }
    let (h, w, _) = img.dims();
    let n = h * w;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in img.data().chunks_exact(3) {
        let (r, g, b) = (p[0], p[1], p[2]);
        let luma = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
        y.push(luma);
        cb.push(0.5 + 0.564 * (b - luma));
        cr.push(0.5 + 0.713 * (r - luma));
    }
    Ok((
        ImagePlane::new(h, w, 1, y)?,
        ImagePlane::new(h, w, 1, cb)?,
        ImagePlane::new(h, w, 1, cr)?,
    ))
}

/// Inverse of [`rgb_to_ycbcr`]. The result is not clamped.
pub fn ycbcr_to_rgb(y: &ImagePlane, cb: &ImagePlane, cr: &ImagePlane) -> Result<ImagePlane> {
    if y.dims() != cb.dims() || y.dims() != cr.dims() || y.channels() != 1 {
        return Err(Error::shape(format!(
            "YCbCr planes disagree: {:?} {:?} {:?}",
            y.dims(),
            cb.dims(),
            cr.dims()
        )));
    }
    let mut data = Vec::with_capacity(y.data.len() * 3);
    for ((&l, &b), &r) in y.data.iter().zip(&cb.data).zip(&cr.data) {
        let red = l + (r - 0.5) / 0.713;
        let blue = l + (b - 0.5) / 0.564;
        let green = (l - LUMA_WEIGHTS[0] * red - LUMA_WEIGHTS[2] * blue) / LUMA_WEIGHTS[1];
        data.extend([red, green, blue]);
    }
    ImagePlane::new(y.height, y.width, 3, data)
}

/// A registered infrared/visible pair sharing one file stem.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub visible: ImagePlane,
    pub infrared: ImagePlane,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub ir_path: PathBuf,
    pub vis_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
    /// Files present in only one modality directory.
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// How pairs are brought to a common training/evaluation size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLoadOptions {
    /// Collapse the visible image to luminance.
    pub gray_visible: bool,
    /// Bilinear resize target `(h, w)`; `None` keeps native size.
    pub size: Option<(usize, usize)>,
}

impl Default for PairLoadOptions {
    fn default() -> Self {
        PairLoadOptions {
            gray_visible: true,
            size: None,
        }
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn load_pair(&self, index: usize, opts: PairLoadOptions) -> Result<ImagePair> {
        let entry = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("pair index {index} out of range ({})", self.len())))?;
        load_pair(entry, opts)
    }

    /// CSV export with header `id,ir_path,vis_path`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,ir_path,vis_path\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{}\n", p.id, p.ir_path.display(), p.vis_path.display()));
        }
        s
    }
}

pub fn load_pair(entry: &PairEntry, opts: PairLoadOptions) -> Result<ImagePair> {
    let mut visible = load_image(&entry.vis_path, opts.gray_visible)?;
    let mut infrared = load_image(&entry.ir_path, true)?;
    if let Some((h, w)) = opts.size {
        visible = resize(&visible, h, w)?;
        infrared = resize(&infrared, h, w)?;
    }
    if (visible.height(), visible.width()) != (infrared.height(), infrared.width()) {
        return Err(Error::shape(format!(
            "pair {}: visible is {}x{}, infrared is {}x{}",
            entry.id,
            visible.height(),
            visible.width(),
            infrared.height(),
            infrared.width()
        )));
    }
    Ok(ImagePair {
        id: entry.id.clone(),
        visible,
        infrared,
    })
}

/// Maps file stem → path for every supported image directly inside `dir`.
/// When two files share a stem the lexicographically first name wins.
pub fn list_images(dir: &Path) -> Result<(BTreeMap<String, PathBuf>, Vec<String>)> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    paths.sort();
    let mut map = BTreeMap::new();
    let mut warnings = Vec::new();
    for p in paths {
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if let Some(prev) = map.get(&stem) {
            warnings.push(format!(
                "{}: stem `{stem}` already provided by {}, ignoring",
                p.display(),
                Path::new(prev).display()
            ));
            continue;
        }
        map.insert(stem, p);
    }
    Ok((map, warnings))
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Pairs `root/ir/*` with `root/vis/*` by file stem, in sorted stem order.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let ir_dir = root.join("ir");
    let vis_dir = root.join("vis");
    for d in [&ir_dir, &vis_dir] {
        if !d.is_dir() {
            return Err(Error::Layout(format!("missing directory {}", d.display())));
        }
    }
    let (ir, mut warnings) = list_images(&ir_dir)?;
    let (vis, w2) = list_images(&vis_dir)?;
    warnings.extend(w2);

    let mut pairs = Vec::new();
    for (id, ir_path) in &ir {
        match vis.get(id) {
            Some(vis_path) => pairs.push(PairEntry {
                id: id.clone(),
                ir_path: ir_path.clone(),
                vis_path: vis_path.clone(),
            }),
            None => warnings.push(format!("{}: no visible counterpart", ir_path.display())),
        }
    }
    for (id, vis_path) in &vis {
        if !ir.contains_key(id) {
            warnings.push(format!("{}: no infrared counterpart", vis_path.display()));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no matching ir/vis pairs under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: Split::Train,
        pairs,
        warnings,
    })
}
