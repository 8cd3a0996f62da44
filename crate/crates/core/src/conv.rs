//! 3×3 stride-1 "same" convolutions and 2×2 max pooling.
//!
//! Both variants gather 3×3 patches with a custom op and multiply by the
//! flattened kernel. The gather's backward pass scatter-adds patch gradients
//! back onto the input. [`FrozenConv3x3`] holds constant weights, so only
//! its input receives a gradient. [`max_pool2x2`] routes each window's
//! gradient to its first maximum.

use candle_core::op::BackpropOp;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Storage, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Padding {
    /// Out-of-range taps read the nearest border pixel.
    Replicate,
    /// Out-of-range taps read zero.
    Zero,
}

/// Source index of output position `p` under kernel offset `d ∈ {0,1,2}`.
fn source(p: usize, d: usize, len: usize, pad: Padding) -> Option<usize> {
    let s = p as isize + d as isize - 1;
    match pad {
        Padding::Replicate => Some(s.clamp(0, len as isize - 1) as usize),
        Padding::Zero => (0..len as isize).contains(&s).then_some(s as usize),
    }
}

fn gather<T: Copy + Default>(x: &[T], dims: (usize, usize, usize, usize), pad: Padding) -> Vec<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut cols = vec![T::default(); n * c * 9 * hw];
    for plane in 0..n * c {
        let src = &x[plane * hw..(plane + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = (k / 3, k % 3);
            let dst = &mut cols[(plane * 9 + k) * hw..(plane * 9 + k + 1) * hw];
            for y in 0..h {
                let Some(sy) = source(y, dy, h, pad) else { continue };
                for xx in 0..w {
                    if let Some(sx) = source(xx, dx, w, pad) {
                        dst[y * w + xx] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    cols
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    dims: (usize, usize, usize, usize),
    pad: Padding,
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut x = vec![T::default(); n * c * hw];
    for plane in 0..n * c {
        let dst = &mut x[plane * hw..(plane + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = (k / 3, k % 3);
            let src = &cols[(plane * 9 + k) * hw..(plane * 9 + k + 1) * hw];
            for y in 0..h {
                let Some(sy) = source(y, dy, h, pad) else { continue };
                for xx in 0..w {
                    if let Some(sx) = source(xx, dx, w, pad) {
                        dst[sy * w + sx] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// 3×3 patches, `N×C×H×W → N×9C×HW`.
struct Im2Col {
    dims: (usize, usize, usize, usize),
    pad: Padding,
}

fn unsupported() -> candle_core::Error {
    candle_core::Error::Msg("3×3 convolutions support f32 and f64 only".into())
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = self.dims;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("im2col needs a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(&v[start..end], self.dims, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(&v[start..end], self.dims, self.pad)),
            _ => return Err(unsupported()),
        };
        Ok((out, Shape::from((n, c * 9, h * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.detach().contiguous()?;
        let (storage, layout) = g.storage_and_layout();
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("non-contiguous im2col gradient".into()))?;
        let out = match &*storage {
            Storage::Cpu(CpuStorage::F32(v)) => CpuStorage::F32(scatter(&v[start..end], self.dims, self.pad)),
            Storage::Cpu(CpuStorage::F64(v)) => CpuStorage::F64(scatter(&v[start..end], self.dims, self.pad)),
            _ => return Err(unsupported()),
        };
        Ok(Some(Tensor::from_storage(
            Storage::Cpu(out),
            self.dims,
            BackpropOp::none(),
            false,
        )))
    }
}

fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor, pad: Padding) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, wc, kh, kw) = weight.dims4()?;
    if (wc, kh, kw) != (c, 3, 3) || bias.dims() != [cout] {
        return Err(Error::shape(format!(
            "kernel {:?} / bias {:?} do not fit input {:?}",
            weight.dims(),
            bias.dims(),
            x.dims()
        )));
    }
    if x.dtype() != weight.dtype() {
        return Err(Error::shape(format!(
            "conv input is {:?}, weights are {:?}",
            x.dtype(),
            weight.dtype()
        )));
    }
    let cols = x.contiguous()?.apply_op1(Im2Col {
        dims: (n, c, h, w),
        pad,
    })?;
    let y = weight.reshape((cout, c * 9))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, cout, h, w))?
        .broadcast_add(&bias.reshape((1, cout, 1, 1))?)?)
}

/// Replicate-padded 3×3 convolution, `weight: Cout×C×3×3`, `bias: Cout`.
pub fn conv3x3_replicate(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv3x3(x, weight, bias, Padding::Replicate)
}

/// Zero-padded 3×3 convolution over constant weights.
#[derive(Clone)]
pub struct FrozenConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl FrozenConv3x3 {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (cout, _, kh, kw) = weight.dims4()?;
        if (kh, kw) != (3, 3) || bias.dims() != [cout] {
            return Err(Error::shape(format!(
                "frozen conv expects Cout×C×3×3 weights and Cout bias, got {:?} / {:?}",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(FrozenConv3x3 {
            weight: weight.detach().contiguous()?,
            bias: bias.detach(),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.weight.dim(1)? {
            return Err(Error::shape(format!(
                "frozen conv expects {} channels, got {c}",
                self.weight.dim(1)?
            )));
        }
        conv3x3(x, &self.weight, &self.bias, Padding::Zero)
    }
}

/// Index of the first maximum of each 2×2 window, `N×C×H×W → N×C×⌊H/2⌋×⌊W/2⌋`.
fn pool_argmax<T: Copy + PartialOrd>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<usize> {
    let (n, c, h, w) = dims;
    let (ph, pw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ph {
            for xx in 0..pw {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// 2×2, stride-2 max pooling; the gradient goes to the first maximum of
/// each window.
struct MaxPool2x2 {
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for MaxPool2x2 {
    fn name(&self) -> &'static str {
        "max-pool2x2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = self.dims;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("max pooling needs a contiguous input".into()))?;
        fn pick<T: Copy + PartialOrd>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
            pool_argmax(x, dims).into_iter().map(|k| x[k]).collect()
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(pick(&v[start..end], self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(pick(&v[start..end], self.dims)),
            _ => return Err(unsupported()),
        };
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = self.dims;
        let x = arg.detach().contiguous()?;
        let g = grad_res.detach().contiguous()?;
        let (xs, xl) = x.storage_and_layout();
        let (gs, gl) = g.storage_and_layout();
        let (xa, xb) = xl
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("non-contiguous pooling input".into()))?;
        let (ga, gb) = gl
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("non-contiguous pooling gradient".into()))?;
        fn route<T: Copy + Default>(idx: Vec<usize>, g: &[T], len: usize) -> Vec<T> {
            let mut out = vec![T::default(); len];
            for (k, v) in idx.into_iter().zip(g) {
                out[k] = *v;
            }
            out
        }
        let len = n * c * h * w;
        let out = match (&*xs, &*gs) {
            (Storage::Cpu(CpuStorage::F32(x)), Storage::Cpu(CpuStorage::F32(g))) => {
                CpuStorage::F32(route(pool_argmax(&x[xa..xb], self.dims), &g[ga..gb], len))
            }
            (Storage::Cpu(CpuStorage::F64(x)), Storage::Cpu(CpuStorage::F64(g))) => {
                CpuStorage::F64(route(pool_argmax(&x[xa..xb], self.dims), &g[ga..gb], len))
            }
            _ => return Err(unsupported()),
        };
        Ok(Some(Tensor::from_storage(
            Storage::Cpu(out),
            self.dims,
            BackpropOp::none(),
            false,
        )))
    }
}

/// 2×2, stride-2 max pooling; odd trailing rows and columns are dropped.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims4()?;
    if dims.2 < 2 || dims.3 < 2 {
        return Err(Error::shape(format!("cannot pool a {}×{} map", dims.2, dims.3)));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2x2 { dims })?)
}
