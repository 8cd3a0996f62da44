//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any gating criterion fails.
//!
//! `cargo test -p retifuse-core --test acceptance -- 2 5` runs a subset.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retifuse::features::{BackboneSource, FeatureExtractor};
use retifuse::imgio::{scan_dataset, DatasetManifest, PairLoadOptions};
use retifuse::loss_d2s::{d2s_loss, deep_loss, middle_loss, pixel_loss, shallow_loss, D2SWeights};
use retifuse::loss_decomp::{consistency_loss, projection_loss, retinex_loss, total_variation, Reduction};
use retifuse::metrics::{entropy, mutual_information, nabf, standard_deviation, Gray};
use retifuse::nets::{BundleSpec, ModelBundle, Precision};
use retifuse::pipeline::{decompose_infrared, decompose_visible, fuse, DecompositionResult, Modality};
use retifuse::trainer::{
    ablation_sweep, objective, sweep_csv, train, Batch, LossWeights, SweepGrid, SweepOptions, TrainConfig, TrainOptions,
};

type Outcome = std::result::Result<String, String>;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn samples() -> DatasetManifest {
    scan_dataset(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/samples")).expect("bundled samples")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------
// Plain-array oracles
// ---------------------------------------------------------------------------

/// Dense `N×C×H×W` array in f64.
#[derive(Clone, Debug)]
struct Arr {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Arr {
    fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Self {
        let v = (0..n * c * h * w).map(|_| rng.random_range(lo..hi)).collect();
        Arr { n, c, h, w, v }
    }

    fn from_tensor(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4().unwrap();
        let v = t
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        Arr { n, c, h, w, v }
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone(), (self.n, self.c, self.h, self.w), &Device::Cpu).unwrap()
    }

    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }
}

fn reduce(sum: f64, count: usize, r: Reduction) -> f64 {
    match r {
        Reduction::Sum => sum,
        Reduction::Mean => sum / count as f64,
    }
}

fn sq_dist(a: &Arr, b: &Arr, r: Reduction) -> f64 {
    assert_eq!(a.v.len(), b.v.len());
    let mut s = 0.0;
    for k in 0..a.v.len() {
        s += (a.v[k] - b.v[k]) * (a.v[k] - b.v[k]);
    }
    reduce(s, a.v.len(), r)
}

fn channel_max(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.n, 1, x.h, x.w);
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut m = f64::NEG_INFINITY;
                for c in 0..x.c {
                    m = m.max(x.at(b, c, y, xx));
                }
                *out.at_mut(b, 0, y, xx) = m;
            }
        }
    }
    out
}

/// `[recon, ref_consistency, illum_consistency, tv]`.
fn retinex_oracle(l: &Arr, r_: &Arr, i: &Arr, src: &Arr, red: Reduction) -> [f64; 4] {
    let l0 = channel_max(src);
    let (mut recon, mut refc) = (0.0, 0.0);
    for b in 0..r_.n {
        for c in 0..r_.c {
            for y in 0..r_.h {
                for x in 0..r_.w {
                    let lv = l.at(b, 0, y, x);
                    let rv = r_.at(b, c, y, x);
                    let iv = i.at(b, c, y, x);
                    recon += (lv * rv - iv).powi(2);
                    refc += (rv - iv / lv.max(1e-4)).powi(2);
                }
            }
        }
    }
    let mut tv = 0.0;
    for b in 0..l.n {
        for y in 0..l.h {
            for x in 0..l.w {
                if x + 1 < l.w {
                    tv += (l.at(b, 0, y, x + 1) - l.at(b, 0, y, x)).abs();
                }
                if y + 1 < l.h {
                    tv += (l.at(b, 0, y + 1, x) - l.at(b, 0, y, x)).abs();
                }
            }
        }
    }
    let count = r_.v.len();
    [
        reduce(recon, count, red),
        reduce(refc, count, red),
        sq_dist(l, &l0, red),
        reduce(tv, l.v.len(), red),
    ]
}

/// Loop implementation of the backbone: gray to RGB, ImageNet
/// normalization, zero-padded 3×3 convolutions with ReLU, 2×2 max pooling
/// between blocks.
struct VggOracle {
    layers: Vec<(Arr, Vec<f64>)>,
}

impl VggOracle {
    fn new(fx: &FeatureExtractor) -> Self {
        let ws: Vec<&Tensor> = fx.weights().collect();
        let layers = ws
            .chunks(2)
            .map(|p| {
                let b: Vec<f64> = p[1].to_dtype(DType::F64).unwrap().to_vec1().unwrap();
                (Arr::from_tensor(p[0]), b)
            })
            .collect();
        VggOracle { layers }
    }

    fn conv_relu(x: &Arr, w: &Arr, bias: &[f64]) -> Arr {
        let mut out = Arr::zeros(x.n, w.n, x.h, x.w);
        for b in 0..x.n {
            for co in 0..w.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = bias[co];
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    s += w.at(co, ci, ky, kx) * x.at(b, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        *out.at_mut(b, co, y, xx) = s.max(0.0);
                    }
                }
            }
        }
        out
    }

    fn pool(x: &Arr) -> Arr {
        let (h, w) = (x.h / 2, x.w / 2);
        let mut out = Arr::zeros(x.n, x.c, h, w);
        for b in 0..x.n {
            for c in 0..x.c {
                for y in 0..h {
                    for xx in 0..w {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dy, dx)| x.at(b, c, 2 * y + dy, 2 * xx + dx))
                            .fold(f64::NEG_INFINITY, f64::max);
                        *out.at_mut(b, c, y, xx) = m;
                    }
                }
            }
        }
        out
    }

    fn taps(&self, img: &Arr, upto: usize) -> Vec<Arr> {
        let mean = [0.485, 0.456, 0.406];
        let std = [0.229, 0.224, 0.225];
        let mut y = Arr::zeros(img.n, 3, img.h, img.w);
        for b in 0..img.n {
            for c in 0..3 {
                for yy in 0..img.h {
                    for x in 0..img.w {
                        let v = img.at(b, if img.c == 1 { 0 } else { c }, yy, x);
                        *y.at_mut(b, c, yy, x) = (v - mean[c]) / std[c];
                    }
                }
            }
        }
        let mut taps = Vec::new();
        let mut layer = 0;
        for (block, n) in [2, 2, 3, 3].into_iter().enumerate().take(upto) {
            if block > 0 {
                y = Self::pool(&y);
            }
            for _ in 0..n {
                let (w, bias) = &self.layers[layer];
                y = Self::conv_relu(&y, w, bias);
                layer += 1;
            }
            taps.push(y.clone());
        }
        taps
    }
}

/// Per-item `F·Fᵀ / (C·H·W)` flattened over items.
fn gram_oracle(f: &Arr) -> Arr {
    let mut g = Arr::zeros(f.n, 1, f.c, f.c);
    let norm = (f.c * f.h * f.w) as f64;
    for b in 0..f.n {
        for i in 0..f.c {
            for j in 0..f.c {
                let mut s = 0.0;
                for y in 0..f.h {
                    for x in 0..f.w {
                        s += f.at(b, i, y, x) * f.at(b, j, y, x);
                    }
                }
                *g.at_mut(b, 0, i, j) = s / norm;
            }
        }
    }
    g
}

fn mix(a: &Arr, wa: f64, b: &Arr, wb: f64) -> Arr {
    let mut out = a.clone();
    for k in 0..out.v.len() {
        out.v[k] = wa * a.v[k] + wb * b.v[k];
    }
    out
}

/// `[pixel, shallow, middle, deep]`.
fn d2s_oracle(vgg: &VggOracle, f: &Arr, v: &Arr, i: &Arr, w: &D2SWeights, r: Reduction) -> [f64; 4] {
    let deep_ok = f.h >= 8 && f.w >= 8;
    let upto = if deep_ok { 4 } else { 3 };
    let (tf, tv, ti) = (vgg.taps(f, upto), vgg.taps(v, upto), vgg.taps(i, upto));
    let pixel = sq_dist(f, v, r);
    let shallow = sq_dist(&tf[0], &tv[0], r);
    let middle = w.beta2 * sq_dist(&tf[1], &mix(&ti[1], w.w_i, &tv[1], w.w_v), r)
        + w.beta3 * sq_dist(&tf[2], &mix(&ti[2], w.w_i, &tv[2], w.w_v), r);
    let deep = if deep_ok {
        sq_dist(&gram_oracle(&tf[3]), &gram_oracle(&ti[3]), r)
    } else {
        f64::NAN
    };
    [pixel, shallow, middle, deep]
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    check((got - want).abs() <= tol, || {
        format!("{name}: got {got:.12e}, oracle {want:.12e}")
    })
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn c1_loss_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut checked = 0;

    // Hand example: L = 1, R = 0.5, i = 1 on 2×2 with summed squared norms.
    let ones = Arr {
        n: 1,
        c: 1,
        h: 2,
        w: 2,
        v: vec![1.0; 4],
    };
    let halves = Arr {
        v: vec![0.5; 4],
        ..ones.clone()
    };
    let t = retinex_loss(
        &ones.tensor(),
        &halves.tensor(),
        &ones.tensor(),
        &ones.tensor(),
        Reduction::Sum,
    )
    .map_err(e)?;
    close("hand Retinex total", scalar(&t.total().map_err(e)?), 2.0, TOL)?;
    checked += 1;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (trial, &(c, h, w)) in [(1, 4, 4), (3, 4, 4), (1, 3, 2), (3, 2, 4), (1, 1, 4)]
        .iter()
        .enumerate()
    {
        for red in [Reduction::Mean, Reduction::Sum] {
            let n = 1 + trial % 2;
            let img = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);
            let proj = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);
            let l = Arr::random(&mut rng, n, 1, h, w, 0.01, 1.0);
            let rv = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);
            let ri = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);

            close(
                "projection",
                scalar(&projection_loss(&img.tensor(), &proj.tensor(), red).map_err(e)?),
                sq_dist(&img, &proj, red),
                TOL,
            )?;
            close(
                "consistency",
                scalar(&consistency_loss(&rv.tensor(), &ri.tensor(), red).map_err(e)?),
                sq_dist(&rv, &ri, red),
                TOL,
            )?;
            close(
                "tv",
                scalar(&total_variation(&l.tensor(), red).map_err(e)?),
                retinex_oracle(&l, &rv, &proj, &img, red)[3],
                TOL,
            )?;
            let got = retinex_loss(&l.tensor(), &rv.tensor(), &proj.tensor(), &img.tensor(), red).map_err(e)?;
            let want = retinex_oracle(&l, &rv, &proj, &img, red);
            for (name, g, wv) in [
                ("recon", &got.recon, want[0]),
                ("reflectance consistency", &got.ref_consistency, want[1]),
                ("illumination consistency", &got.illum_consistency, want[2]),
                ("tv", &got.tv, want[3]),
            ] {
                close(name, scalar(g), wv, TOL)?;
            }
            checked += 7;
        }
    }

    let fx = FeatureExtractor::surrogate(5, 4, &Device::Cpu, DType::F64).map_err(e)?;
    let vgg = VggOracle::new(&fx);
    let weights = [
        D2SWeights::default(),
        D2SWeights {
            gamma1: 1.5,
            gamma2: 0.5,
            gamma4: 3.0,
            beta2: 0.7,
            beta3: 1.3,
            w_v: 0.25,
            w_i: 1.5,
        },
    ];
    for (k, w) in weights.iter().enumerate() {
        for red in [Reduction::Mean, Reduction::Sum] {
            // Pixel, shallow and middle terms on 4×4 images.
            let f = Arr::random(&mut rng, 1 + k, 1, 4, 4, 0.0, 1.0);
            let v = Arr::random(&mut rng, 1 + k, 1, 4, 4, 0.0, 1.0);
            let i = Arr::random(&mut rng, 1 + k, 1, 4, 4, 0.0, 1.0);
            let want = d2s_oracle(&vgg, &f, &v, &i, w, red);
            let (ft, vt, it) = (f.tensor(), v.tensor(), i.tensor());
            close("pixel", scalar(&pixel_loss(&ft, &vt, red).map_err(e)?), want[0], TOL)?;
            close(
                "shallow",
                scalar(&shallow_loss(&fx, &ft, &vt, red).map_err(e)?),
                want[1],
                TOL,
            )?;
            close(
                "middle",
                scalar(&middle_loss(&fx, &ft, &vt, &it, w, red).map_err(e)?),
                want[2],
                TOL,
            )?;
            checked += 3;

            // The deepest tap needs three poolings, so the Gram term and the
            // full objective use 8×8 images (4×4 and smaller feature maps).
            let f = Arr::random(&mut rng, 1 + k, 1, 8, 8, 0.0, 1.0);
            let v = Arr::random(&mut rng, 1 + k, 1, 8, 8, 0.0, 1.0);
            let i = Arr::random(&mut rng, 1 + k, 1, 8, 8, 0.0, 1.0);
            let want = d2s_oracle(&vgg, &f, &v, &i, w, red);
            let (ft, vt, it) = (f.tensor(), v.tensor(), i.tensor());
            close("deep", scalar(&deep_loss(&fx, &ft, &it, red).map_err(e)?), want[3], TOL)?;
            let all = d2s_loss(&fx, &ft, &vt, &it, w, red).map_err(e)?;
            let total = w.gamma1 * want[0] + w.gamma2 * want[1] + want[2] + w.gamma4 * want[3];
            close("d2s total", scalar(&all.total), total, TOL * total.abs().max(1.0))?;
            checked += 2;
        }
    }

    // Whole objective on a 4-pair bundle forward at 8×8.
    let spec = BundleSpec::new(1, 4).with_precision(Precision::F64);
    let bundle = ModelBundle::build(spec, 3, &Device::Cpu).map_err(e)?;
    let v = Arr::random(&mut rng, 2, 1, 8, 8, 0.0, 1.0);
    let i = Arr::random(&mut rng, 2, 1, 8, 8, 0.0, 1.0);
    let batch = Batch {
        ids: vec!["a".into(), "b".into()],
        visible: v.tensor(),
        infrared: i.tensor(),
    };
    let lw = LossWeights::default();
    let step = objective(&bundle, &fx, &batch, &lw, Default::default()).map_err(e)?;
    let vd = decompose_visible(&bundle, &batch.visible, Default::default()).map_err(e)?;
    let id = decompose_infrared(&bundle, &batch.infrared, Default::default()).map_err(e)?;
    let (lv, rvv, pv) = (
        Arr::from_tensor(&vd.illumination),
        Arr::from_tensor(&vd.reflectance),
        Arr::from_tensor(&vd.projected),
    );
    let (li, rii) = (Arr::from_tensor(&id.illumination), Arr::from_tensor(&id.reflectance));
    let red = lw.reduction;
    let ret = retinex_oracle(&lv, &rvv, &pv, &v, red);
    let dw = lw.decomp;
    let decomp = dw.w0 * sq_dist(&v, &pv, red) + dw.w1 * sq_dist(&rvv, &rii, red) + dw.w2 * ret.iter().sum::<f64>();
    let mut fused = rvv.clone();
    for k in 0..fused.v.len() {
        fused.v[k] = (lv.v[k] + li.v[k]) * (rvv.v[k] + rii.v[k]);
    }
    let d = d2s_oracle(&vgg, &fused, &v, &i, &lw.d2s, red);
    let w = &lw.d2s;
    let total = lw.lambda * decomp + w.gamma1 * d[0] + w.gamma2 * d[1] + d[2] + w.gamma4 * d[3];
    let tol = TOL * total.abs().max(1.0);
    close("objective (tensor)", scalar(&step.total), total, tol)?;
    close("objective (breakdown)", step.total_value, total, tol)?;
    close(
        "decomposition total",
        step.decomp.decomp_total,
        decomp,
        TOL * decomp.max(1.0),
    )?;
    checked += 3;
    Ok(format!("{checked} loss values match the loop oracles to 1e-6"))
}

fn c2_gradients() -> Outcome {
    let dev = Device::Cpu;
    let spec = BundleSpec::new(1, 4).with_precision(Precision::F64);
    let bundle = ModelBundle::build(spec, 21, &dev).map_err(e)?;
    let fx = FeatureExtractor::surrogate(9, 4, &dev, DType::F64).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let batch = Batch {
        ids: vec!["crop".into()],
        visible: Arr::random(&mut rng, 1, 1, 8, 8, 0.05, 0.95).tensor(),
        infrared: Arr::random(&mut rng, 1, 1, 8, 8, 0.05, 0.95).tensor(),
    };
    let lw = LossWeights::default();
    // The reflectance-consistency term divides by stopgrad(L). The numeric
    // reference therefore holds that denominator at its unperturbed value.
    let frozen_l = decompose_visible(&bundle, &batch.visible, Default::default())
        .map_err(e)?
        .illumination
        .detach();
    // Terms are differenced separately so that terms a parameter does not
    // touch cancel exactly instead of adding rounding noise to the total.
    let (d, dw) = (&lw.d2s, &lw.decomp);
    let coeffs = [
        lw.lambda * dw.w0,
        lw.lambda * dw.w1,
        lw.lambda * dw.w2,
        lw.lambda * dw.w2,
        lw.lambda * dw.w2,
        lw.lambda * dw.w2,
        d.gamma1,
        d.gamma2,
        1.0,
        d.gamma4,
    ];
    let loss = |b: &ModelBundle| -> retifuse::Result<[f64; 10]> {
        let step = objective(b, &fx, &batch, &lw, Default::default())?;
        let vis = &step.visible;
        let held = retinex_loss(
            &frozen_l,
            &vis.reflectance,
            &vis.projected,
            &batch.visible,
            lw.reduction,
        )?;
        let (dc, r, s) = (&step.decomp, &step.decomp.retinex_terms, &step.d2s);
        Ok([
            dc.projection,
            dc.consistency,
            r.recon,
            scalar(&held.ref_consistency),
            r.illum_consistency,
            r.tv,
            s.pixel,
            s.shallow,
            s.middle,
            s.deep,
        ])
    };
    let grads = objective(&bundle, &fx, &batch, &lw, Default::default())
        .map_err(e)?
        .total
        .backward()
        .map_err(e)?;

    const STEPS: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    // Entries whose analytic and numeric magnitudes are both below this are
    // compared absolutely instead.
    const FLOOR: f64 = 1e-6;
    let (mut worst, mut worst_name, mut count) = (0.0f64, String::new(), 0usize);
    for (name, var) in bundle.named_parameters() {
        let base: Vec<f64> = var.as_tensor().flatten_all().map_err(e)?.to_vec1().map_err(e)?;
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .ok_or_else(|| format!("{name} has no gradient"))?
            .flatten_all()
            .map_err(e)?
            .to_vec1()
            .map_err(e)?;
        let shape = var.as_tensor().shape().clone();
        for k in 0..base.len() {
            let central = |h: f64| -> std::result::Result<f64, String> {
                let mut probe = base.clone();
                probe[k] = base[k] + h;
                var.set(&Tensor::from_vec(probe.clone(), shape.clone(), &dev).map_err(e)?)
                    .map_err(e)?;
                let up = loss(&bundle).map_err(e)?;
                probe[k] = base[k] - h;
                var.set(&Tensor::from_vec(probe, shape.clone(), &dev).map_err(e)?)
                    .map_err(e)?;
                let down = loss(&bundle).map_err(e)?;
                Ok((0..coeffs.len()).map(|t| coeffs[t] * (up[t] - down[t])).sum::<f64>() / (2.0 * h))
            };
            // Large steps cross ReLU and |·| kinks, small ones drown in
            // rounding; take the step where adjacent decades agree best.
            let ladder = STEPS
                .iter()
                .map(|&h| central(h))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let best = (0..ladder.len() - 1)
                .min_by(|&i, &j| {
                    let d = |i: usize| (ladder[i] - ladder[i + 1]).abs();
                    d(i).total_cmp(&d(j))
                })
                .expect("several steps");
            let numeric = ladder[best + 1];
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{k}] analytic {a:.6e} numeric {numeric:.6e}");
            }
            count += 1;
        }
        var.set(&Tensor::from_vec(base, shape, &dev).map_err(e)?).map_err(e)?;
    }
    check(worst < 1e-3, || {
        format!("worst relative error {worst:.3e} at {worst_name}")
    })?;

    // The reflectance-consistency term divides by stopgrad(L).
    let l = Var::from_tensor(&Arr::random(&mut rng, 1, 1, 4, 4, 0.1, 1.0).tensor()).map_err(e)?;
    let r = Var::from_tensor(&Arr::random(&mut rng, 1, 1, 4, 4, 0.0, 1.0).tensor()).map_err(e)?;
    let i = Arr::random(&mut rng, 1, 1, 4, 4, 0.0, 1.0).tensor();
    let terms = retinex_loss(l.as_tensor(), r.as_tensor(), &i, &i, Reduction::Mean).map_err(e)?;
    let g = terms.ref_consistency.backward().map_err(e)?;
    let zero = match g.get(l.as_tensor()) {
        None => true,
        Some(t) => {
            t.abs()
                .map_err(e)?
                .max_all()
                .map_err(e)?
                .to_scalar::<f64>()
                .map_err(e)?
                == 0.0
        }
    };
    check(zero, || "reflectance-consistency gradient reaches L".into())?;
    check(g.get(r.as_tensor()).is_some(), || {
        "reflectance-consistency gradient misses R".into()
    })?;
    Ok(format!(
        "{count} parameters, worst relative error {worst:.2e}; stop-gradient exact"
    ))
}

fn c3_metrics() -> Outcome {
    let constant = Gray::from_fn(16, 16, |_, _| 77.0);
    close("entropy(constant)", entropy(&constant).map_err(e)?, 0.0, 0.0)?;
    let two = Gray::from_fn(16, 16, |y, _| if y < 8 { 0.0 } else { 255.0 });
    close("entropy(two-level)", entropy(&two).map_err(e)?, 1.0, 1e-12)?;
    close(
        "sd(half 0 / half 255)",
        standard_deviation(&two).map_err(e)?,
        127.5,
        1e-12,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Gray::from_fn(32, 32, |_, _| f64::from(rng.random_range(0u8..=255)));
    let y = Gray::from_fn(32, 32, |_, _| f64::from(rng.random_range(0u8..=60)));
    close(
        "I(X;X) = H(X)",
        mutual_information(&x, &x).map_err(e)?,
        entropy(&x).map_err(e)?,
        1e-12,
    )?;
    close(
        "MI symmetry",
        mutual_information(&x, &y).map_err(e)?,
        mutual_information(&y, &x).map_err(e)?,
        1e-12,
    )?;

    let a = Gray::from_fn(48, 48, |yy, xx| {
        let (fy, fx) = (yy as f64, xx as f64);
        (128.0 + 60.0 * (fx / 5.0).sin() + 40.0 * (fy / 7.0).cos()).round()
    });
    close("nabf(A,A,A)", nabf(&a, &a, &a).map_err(e)?, 0.0, 0.0)?;

    let mut prev = -1.0;
    let mut sweep = Vec::new();
    for amp in [0.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noisy = Gray::from_fn(48, 48, |yy, xx| {
            let base = a.data()[yy * 48 + xx];
            (base + amp * rng.random_range(-1.0..1.0f64)).clamp(0.0, 255.0).round()
        });
        let v = nabf(&a, &a, &noisy).map_err(e)?;
        check(v >= prev, || {
            format!("nabf fell from {prev} to {v} at noise amplitude {amp}")
        })?;
        prev = v;
        sweep.push(format!("{v:.4}"));
    }
    Ok(format!("identities hold; nabf over noise sweep [{}]", sweep.join(", ")))
}

fn c4_fusion_layer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n, c, h, w) = (
            rng.random_range(1..=2),
            if rng.random_bool(0.5) { 1 } else { 3 },
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let lv = Arr::random(&mut rng, n, 1, h, w, 0.0, 1.0);
        let li = Arr::random(&mut rng, n, 1, h, w, 0.0, 1.0);
        let rv = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);
        let ri = Arr::random(&mut rng, n, c, h, w, 0.0, 1.0);
        let part = |l: &Arr, r: &Arr, m| DecompositionResult {
            projected: r.tensor(),
            illumination: l.tensor(),
            reflectance: r.tensor(),
            modality: m,
        };
        let out = fuse(&part(&lv, &rv, Modality::Visible), &part(&li, &ri, Modality::Infrared)).map_err(e)?;
        let got = Arr::from_tensor(&out.fused);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let want = (lv.at(b, 0, y, x) + li.at(b, 0, y, x)) * (rv.at(b, ch, y, x) + ri.at(b, ch, y, x));
                        worst = worst.max((got.at(b, ch, y, x) - want).abs());
                    }
                }
            }
        }
        if worst > 1e-7 {
            return Err(format!("fused value off by {worst:.3e}"));
        }
    }

    let lv = Arr::random(&mut rng, 2, 1, 5, 7, 0.0, 1.0);
    let rv = Arr::random(&mut rng, 2, 3, 5, 7, 0.0, 1.0);
    let zl = Arr::zeros(2, 1, 5, 7);
    let zr = Arr::zeros(2, 3, 5, 7);
    let vis = DecompositionResult {
        projected: rv.tensor(),
        illumination: lv.tensor(),
        reflectance: rv.tensor(),
        modality: Modality::Visible,
    };
    let ir = DecompositionResult {
        projected: zr.tensor(),
        illumination: zl.tensor(),
        reflectance: zr.tensor(),
        modality: Modality::Infrared,
    };
    let got = Arr::from_tensor(&fuse(&vis, &ir).map_err(e)?.fused);
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..7 {
                    let want = lv.at(b, 0, y, x) * rv.at(b, c, y, x);
                    close("zero infrared", got.at(b, c, y, x), want, 1e-7)?;
                }
            }
        }
    }
    Ok(format!(
        "1000 random shapes, worst error {worst:.1e}; zero infrared reduces to L_vi⊙R_vi"
    ))
}

fn smoke_config() -> std::result::Result<TrainConfig, String> {
    TrainConfig::from_file(&repo_root().join("configs/smoke.toml")).map_err(e)
}

fn c5_overfit() -> Outcome {
    let config = smoke_config()?;
    check(config.loss_weights == LossWeights::default(), || {
        "smoke config must keep the default loss weights".into()
    })?;
    let manifest = samples();
    check(manifest.len() == 4, || {
        format!("expected 4 bundled pairs, found {}", manifest.len())
    })?;
    let out = train(&config, &manifest, &TrainOptions::default()).map_err(e)?;
    let totals = out.log.totals();
    check(totals.len() == 200, || {
        format!("ran {} steps, expected 200", totals.len())
    })?;
    let (first, last) = (totals[0], *totals.last().expect("non-empty"));
    let ratio = last / first;
    check(ratio < 0.5, || {
        format!("total loss {first:.4} → {last:.4} (ratio {ratio:.3})")
    })?;

    let opts = PairLoadOptions {
        gray_visible: true,
        size: Some((config.crop, config.crop)),
    };
    let mut errs = Vec::new();
    for k in 0..manifest.len() {
        let pair = manifest.load_pair(k, opts).map_err(e)?;
        let v = pair.visible.to_tensor(&Device::Cpu, DType::F32).map_err(e)?;
        let d = decompose_visible(&out.bundle, &v, config.pipeline).map_err(e)?;
        errs.extend(d.relative_reconstruction_error().map_err(e)?);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    check(mean < 0.1, || {
        format!("mean relative reconstruction error {mean:.4} (per pair {errs:.4?})")
    })?;
    Ok(format!("loss ratio {ratio:.4}, mean reconstruction error {mean:.4}"))
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.learning_rate = 1e-3;
    c.batch_size = 2;
    c.epochs = 3;
    c.max_steps = Some(6);
    c.crop = 16;
    c.seed = seed;
    c.checkpoint_every = 3;
    c.model.hidden = 4;
    c.backbone = BackboneSource::Surrogate { seed: 1, base_width: 4 };
    c
}

fn c6_determinism_and_resume() -> Outcome {
    let manifest = samples();
    let config = tiny_config(3);
    let dir = tempfile::tempdir().map_err(e)?;
    let run = |name: &str, resume: Option<PathBuf>| {
        train(
            &config,
            &manifest,
            &TrainOptions {
                out_dir: Some(dir.path().join(name)),
                resume,
            },
        )
    };
    let a = run("a", None).map_err(e)?;
    let b = run("b", None).map_err(e)?;
    check(a.log.totals() == b.log.totals(), || {
        format!("{:?} vs {:?}", a.log.totals(), b.log.totals())
    })?;
    let ckpt = dir.path().join("a/checkpoints/step_000003.safetensors");
    let c = run("c", Some(ckpt)).map_err(e)?;
    let resumed: Vec<(usize, f64)> = c.log.records.iter().map(|r| (r.step, r.total)).collect();
    check(resumed.first().map(|r| r.0) == Some(4), || {
        format!("resumed run starts at {resumed:?}")
    })?;
    let mut worst = 0.0f64;
    for (step, total) in resumed {
        let reference = a.log.records[step - 1].total;
        worst = worst.max((total - reference).abs() / reference.abs().max(1.0));
    }
    check(worst <= 1e-6, || format!("resumed losses differ by {worst:.3e}"))?;
    Ok(format!(
        "double run bit-identical; resume from step 3 matches steps 4–6 within {worst:.1e}"
    ))
}

fn c7_full_scale_note() -> Outcome {
    let root = repo_root();
    let config = TrainConfig::from_file(&root.join("configs/reproduce_full.toml")).map_err(e)?;
    check(
        config.batch_size == 8 && config.epochs == 4 && config.crop == 128 && config.learning_rate == 1e-5,
        || "reproduce_full.toml drifted from the published recipe".into(),
    )?;
    let readme = std::fs::read_to_string(root.join("README.md")).map_err(e)?;
    check(readme.contains("reproduce-full"), || {
        "README lacks the reproduce-full recipe".into()
    })?;
    let (en, sd, mi, nabf_ref) = (6.90455, 89.44478, 13.80891, 0.10570);
    println!("  note: reference TNO means En {en} SD {sd} MI {mi} Nabf {nabf_ref} need 20,000-pair GPU training and are not gated here.");
    println!(
        "  note: a full run should land within ±5% on En [{:.3}, {:.3}] and SD [{:.2}, {:.2}].",
        en * 0.95,
        en * 1.05,
        sd * 0.95,
        sd * 1.05
    );
    println!("  note: MI is reported as I(vis;F) + I(ir;F) in bits; the reference table does not state its MI convention, so MI is compared loosely.");
    Ok("reproduce-full recipe present (non-gating)".into())
}

fn c8_sweep() -> Outcome {
    let manifest = samples();
    let mut config = tiny_config(0);
    config.max_steps = Some(2);
    config.checkpoint_every = 0;
    let grid = SweepGrid::parse("gamma2=1.0,2.5;wi=1.0,2.0").map_err(e)?;
    let dir = tempfile::tempdir().map_err(e)?;
    let opts = SweepOptions {
        out_dir: Some(dir.path().to_path_buf()),
        eval_size: Some((32, 32)),
        ..Default::default()
    };
    let rows = ablation_sweep(&grid, &config, &manifest, &manifest, &opts).map_err(e)?;
    check(rows.len() == 4, || format!("{} rows", rows.len()))?;
    if let Some(bad) = rows.iter().find(|r| r.metrics.is_none()) {
        return Err(format!("cell {}/{} failed: {:?}", bad.gamma2, bad.w_i, bad.error));
    }
    let csv = sweep_csv(&rows);
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    check(header.starts_with("gamma2,w_i,en,sd,mi,nabf"), || {
        format!("header `{header}`")
    })?;
    check(lines.count() == 4, || "CSV must have 4 data rows".into())?;
    Ok("2×2 grid trained, scored and written as gamma2,w_i,en,sd,mi,nabf".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    gating: bool,
    run: fn() -> Outcome,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion {
            id: 1,
            name: "loss oracles",
            budget: Duration::from_secs(10),
            gating: true,
            run: c1_loss_oracles,
        },
        Criterion {
            id: 2,
            name: "gradient check",
            budget: Duration::from_secs(120),
            gating: true,
            run: c2_gradients,
        },
        Criterion {
            id: 3,
            name: "metric oracles",
            budget: Duration::from_secs(30),
            gating: true,
            run: c3_metrics,
        },
        Criterion {
            id: 4,
            name: "fusion layer",
            budget: Duration::from_secs(60),
            gating: true,
            run: c4_fusion_layer,
        },
        Criterion {
            id: 5,
            name: "overfit smoke",
            budget: Duration::from_secs(600),
            gating: true,
            run: c5_overfit,
        },
        Criterion {
            id: 6,
            name: "determinism and resume",
            budget: Duration::from_secs(120),
            gating: true,
            run: c6_determinism_and_resume,
        },
        Criterion {
            id: 7,
            name: "full-scale numbers",
            budget: Duration::from_secs(10),
            gating: false,
            run: c7_full_scale_note,
        },
        Criterion {
            id: 8,
            name: "sweep plumbing",
            budget: Duration::from_secs(300),
            gating: true,
            run: c8_sweep,
        },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > c.budget => Err(format!(
                "{msg}; took {:.1}s, budget {}s",
                took.as_secs_f64(),
                c.budget.as_secs()
            )),
            other => other,
        };
        let tag = if c.gating { "" } else { " (non-gating)" };
        match outcome {
            Ok(msg) => println!(
                "criterion {} {}{tag}: PASS ({msg}; {:.1}s)",
                c.id,
                c.name,
                took.as_secs_f64()
            ),
            Err(msg) => {
                println!(
                    "criterion {} {}{tag}: FAIL ({msg}; {:.1}s)",
                    c.id,
                    c.name,
                    took.as_secs_f64()
                );
                if c.gating {
                    failed += 1;
                }
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
