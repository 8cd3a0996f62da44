//! Labeled comparison montage: one column per method, one row per image.

use font8x8::UnicodeFonts;
use retifuse::imgio::ImagePlane;
use retifuse::{Error, Result};

/// Spacing between cells and around the border, in pixels.
pub const GAP: usize = 4;
/// Cells at least this wide get 2× text.
pub const LARGE_TEXT_WIDTH: usize = 192;

const GLYPH: usize = 8;

/// Pixel geometry of a `rows × cols` montage with a header band of labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub text_scale: usize,
}

impl Layout {
    pub fn new(rows: usize, cols: usize, cell_h: usize, cell_w: usize) -> Self {
        let text_scale = if cell_w >= LARGE_TEXT_WIDTH { 2 } else { 1 };
        Layout {
            rows,
            cols,
            cell_h,
            cell_w,
            text_scale,
        }
    }

    pub fn band_height(&self) -> usize {
        GLYPH * self.text_scale + GAP
    }

    /// `(height, width)` of the whole montage.
    pub fn size(&self) -> (usize, usize) {
        (
            self.band_height() + self.rows * self.cell_h + (self.rows + 1) * GAP,
            self.cols * self.cell_w + (self.cols + 1) * GAP,
        )
    }

    /// Top-left pixel of cell `(row, col)`.
    pub fn cell_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            self.band_height() + GAP + row * (self.cell_h + GAP),
            GAP + col * (self.cell_w + GAP),
        )
    }

    /// Top-left pixel of an `h × w` image centered in cell `(row, col)`.
    pub fn letterbox_origin(&self, row: usize, col: usize, h: usize, w: usize) -> (usize, usize) {
        let (y, x) = self.cell_origin(row, col);
        (y + (self.cell_h - h) / 2, x + (self.cell_w - w) / 2)
    }
}

/// Draws `text` with its top-left corner at `(y, x)`, clipped to `max_w`
/// pixels. Characters outside the font render as `?`.
pub fn draw_text(img: &mut ImagePlane, y: usize, x: usize, text: &str, scale: usize, max_w: usize, value: f32) {
    let (h, w, channels) = img.dims();
    let advance = GLYPH * scale;
    for (i, ch) in text.chars().enumerate() {
        let x0 = x + i * advance;
        if (i + 1) * advance > max_w || x0 + advance > w {
            break;
        }
        let glyph = font8x8::BASIC_FONTS
            .get(ch)
            .or_else(|| font8x8::BASIC_FONTS.get('?'))
            .unwrap_or([0; 8]);
        for (gy, bits) in glyph.iter().enumerate() {
            for gx in 0..GLYPH {
                if bits >> gx & 1 == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let (py, px) = (y + gy * scale + sy, x0 + gx * scale + sx);
                        if py < h && px < w {
                            for c in 0..channels {
                                img.set(py, px, c, value);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn to_channels(img: &ImagePlane, channels: usize) -> Result<ImagePlane> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img.clone()),
        (1, 3) => ImagePlane::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0)),
        (a, b) => Err(Error::Shape(format!(
            "cannot place a {a}-channel image in a {b}-channel montage"
        ))),
    }
}

/// Builds the montage from `cells[row][col]`. Every cell is as large as the
/// largest image; smaller images are centered without resampling and
/// missing cells stay black. Gray images are replicated when any image
/// is in color.
pub fn montage(cells: &[Vec<Option<ImagePlane>>], labels: &[String]) -> Result<ImagePlane> {
    let cols = labels.len();
    if cols == 0 || cells.is_empty() {
        return Err(Error::InvalidArgument(
            "a montage needs at least one row and one column".into(),
        ));
    }
    if let Some(r) = cells.iter().position(|row| row.len() != cols) {
        return Err(Error::Shape(format!(
            "montage row {r} has {} cells, expected {cols}",
            cells[r].len()
        )));
    }
    let images = || cells.iter().flatten().flatten();
    if images().next().is_none() {
        return Err(Error::InvalidArgument("a montage needs at least one image".into()));
    }
    let cell_h = images().map(ImagePlane::height).max().unwrap_or(1);
    let cell_w = images().map(ImagePlane::width).max().unwrap_or(1);
    let channels = images().map(ImagePlane::channels).max().unwrap_or(1);
    let layout = Layout::new(cells.len(), cols, cell_h, cell_w);
    let (h, w) = layout.size();
    let mut out = ImagePlane::filled(h, w, channels, 0.0)?;

    for (col, label) in labels.iter().enumerate() {
        let (_, x) = layout.cell_origin(0, col);
        draw_text(&mut out, GAP / 2, x, label, layout.text_scale, cell_w, 1.0);
    }
    for (row, line) in cells.iter().enumerate() {
        for (col, cell) in line.iter().enumerate() {
            let Some(img) = cell else { continue };
            let img = to_channels(img, channels)?;
            let (y0, x0) = layout.letterbox_origin(row, col, img.height(), img.width());
            for y in 0..img.height() {
                for x in 0..img.width() {
                    for c in 0..channels {
                        out.set(y0 + y, x0 + x, c, img.get(y, x, c));
                    }
                }
            }
        }
    }
    Ok(out)
}
