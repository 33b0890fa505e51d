//! Independent oracles: finite-difference gradient checking, spectral
//! round-trip checks, loop-level attention and SSIM references, and the
//! attention-locality probe.
//!
//! Nothing here reuses the forward kernels it checks, except that a gradient
//! check necessarily evaluates the op under test.

pub mod suite;

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{hit_params, spatial_self_correlation, BlockParams, Bound, BASE_GRID};
use crate::image::Image;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::spectral::{irfft2_plane, rfft2_plane, SpectralScalar};
use crate::tensor::Tensor;

pub const GRAD_CHECK_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const MIN_COORDINATES: usize = 64;
const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub input_shape: Vec<usize>,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub elapsed_ms: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub coordinates: usize,
    pub seed: u64,
    /// Flip the sign of one analytic gradient entry before comparing.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            coordinates: MIN_COORDINATES,
            seed: 0,
            inject_fault: false,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Coordinate in the flattened (input, parameters…) space.
#[derive(Clone, Debug)]
enum Slot {
    Input(usize),
    Param(String, usize),
}

/// Compares the tape gradient of `Σ r ⊙ op(x)` (fixed random `r`) against
/// central differences over a random subset of input and parameter entries.
pub fn finite_diff_grad_check<F>(
    op: &str,
    x: &Tensor,
    params: &BlockParams,
    f: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: for<'g> Fn(Var<'g>, &Bound<'g>) -> Result<Var<'g>>,
{
    let start = Instant::now();
    let mut report = GradCheckReport {
        op: op.to_string(),
        input_shape: x.shape().to_vec(),
        coordinates: 0,
        max_rel_error: f64::NAN,
        elapsed_ms: 0.0,
        passed: false,
        error: None,
    };
    match run_grad_check(x, params, &f, opts) {
        Ok((n, err)) => {
            report.coordinates = n;
            report.max_rel_error = err;
            report.passed = err < GRAD_CHECK_THRESHOLD;
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    report
}

fn objective<F>(x: &Tensor, params: &BlockParams, f: &F, weights: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(Var<'g>, &Bound<'g>) -> Result<Var<'g>>,
{
    let g = Graph::inference();
    let b = params.bind(&g);
    let out = f(g.leaf(x.clone()), &b)?;
    Ok(out.dot_const(weights)?.value().data()[0])
}

fn run_grad_check<F>(
    x: &Tensor,
    params: &BlockParams,
    f: &F,
    opts: &GradCheckOptions,
) -> Result<(usize, f64)>
where
    F: for<'g> Fn(Var<'g>, &Bound<'g>) -> Result<Var<'g>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);

    let g = Graph::new();
    let bound = params.bind(&g);
    let xv = g.leaf(x.clone());
    let out = f(xv, &bound)?;
    let weights = Tensor::uniform(&out.value().shape().to_vec(), -1.0, 1.0, &mut rng);
    let grads = g.backward_with(out, weights.clone());
    let dx = grads.get_or_zeros(xv);
    let dparams = bound.gradients(&grads);

    let mut slots: Vec<Slot> = (0..x.numel()).map(Slot::Input).collect();
    for (name, t) in params.iter() {
        slots.extend((0..t.numel()).map(|i| Slot::Param(name.clone(), i)));
    }
    let chosen: Vec<usize> = if slots.len() <= opts.coordinates {
        (0..slots.len()).collect()
    } else {
        let mut idx = sample(&mut rng, slots.len(), opts.coordinates).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut faulted = !opts.inject_fault;
    let mut worst: f64 = 0.0;
    for &i in &chosen {
        let slot = &slots[i];
        let mut analytic = match slot {
            Slot::Input(j) => dx.data()[*j],
            Slot::Param(name, j) => dparams.get(name)?.data()[*j],
        };
        if !faulted && analytic.abs() > 1e-6 {
            analytic = -analytic;
            faulted = true;
        }
        let eval = |delta: f64| -> Result<f64> {
            match slot {
                Slot::Input(j) => {
                    let mut xp = x.clone();
                    xp.data_mut()[*j] += delta;
                    objective(&xp, params, f, &weights)
                }
                Slot::Param(name, j) => {
                    let mut pp = params.clone();
                    pp.get_mut(name)?.data_mut()[*j] += delta;
                    objective(x, &pp, f, &weights)
                }
            }
        };
        let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
        worst = worst.max(relative_error(analytic, numeric));
    }
    if !worst.is_finite() {
        worst = f64::INFINITY;
    }
    Ok((chosen.len(), worst))
}

/// Adds Gaussian noise of scale `std` to every parameter, so that gains,
/// biases and affine pairs are all away from their initial values.
pub fn perturb_params(params: &BlockParams, std: f64, rng: &mut impl Rng) -> BlockParams {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        let noise = Tensor::randn(t.shape(), std, rng);
        t.add_assign(&noise);
    }
    out
}

/// `softmax(q·kᵀ/√d)·v` by explicit loops for one window: `q` is `n×d`, `k`
/// is `m×d`, `v` is `m×dv`.
pub fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dv = v.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut scores = vec![0.0; m];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..d {
                acc += q.data()[i * d + t] * k.data()[j * d + t];
            }
            *s = acc * scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            total += *s;
        }
        for (j, s) in scores.iter().enumerate() {
            for t in 0..dv {
                out.data_mut()[i * dv + t] += s / total * v.data()[j * dv + t];
            }
        }
    }
    out
}

/// SSIM computed window by window with an explicit 11×11 Gaussian grid.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let mut grid = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let at = |img: &Image, i: usize, j: usize| img.at(c, y0 + i, x0 + j);
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        mx += grid[i][j] / total * at(a, i, j);
                        my += grid[i][j] / total * at(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = grid[i][j] / total;
                        let (dx, dy) = (at(a, i, j) - mx, at(b, i, j) - my);
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn delta_kernel(c: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[c, k, k]);
    for ch in 0..c {
        t.data_mut()[ch * k * k + (k / 2) * k + k / 2] = 1.0;
    }
    t
}

/// Runs `hit_wsa` on a random map and on the same map with everything
/// outside one `largest×largest` window zeroed; returns the largest
/// difference inside that window (0 means bit-identical). With
/// `delta_depthwise` the 3×3 value convolution is replaced by a centre tap,
/// its only cross-window path.
pub fn attention_locality_check(c: usize, windows: &[usize], seed: u64, delta_depthwise: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = perturb_params(&hit_params(c, &mut rng).sub("attn"), 0.1, &mut rng);
    if delta_depthwise {
        p.set("dw.weight", delta_kernel(c, 3))?;
    }
    let big = windows.iter().copied().max().unwrap_or(BASE_GRID);
    let (h, w) = (2 * big, 3 * big);
    let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    // The window in row 1, column 1 of the window grid.
    let (y0, x0) = (big, big);
    let mut masked = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in y0..y0 + big {
            for xx in x0..x0 + big {
                masked.set3(ch, y, xx, x.at3(ch, y, xx));
            }
        }
    }
    let run = |input: &Tensor| -> Result<Tensor> {
        let g = Graph::inference();
        let b = p.bind(&g);
        let out = crate::blocks::hit_wsa(g.leaf(input.clone()), windows, &b)?;
        Ok(out.value().as_ref().clone())
    };
    let (full, local) = (run(&x)?, run(&masked)?);
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for y in y0..y0 + big {
            for xx in x0..x0 + big {
                worst = worst.max((full.at3(ch, y, xx) - local.at3(ch, y, xx)).abs());
            }
        }
    }
    Ok(worst)
}

/// At window size equal to the pooled grid the spatial path is plain window
/// attention; returns its largest deviation from [`attention_oracle`].
pub fn spatial_attention_oracle_check(c: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = BASE_GRID;
    let (h, wd) = (2 * w, 3 * w);
    let [q, k, v] = [0, 1, 2].map(|_| Tensor::randn(&[c, h, wd], 1.0, &mut rng));
    let g = Graph::inference();
    let (out, _) = spatial_self_correlation(g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()), w)?;
    let out = out.value();
    let tokens = |t: &Tensor, wy: usize, wx: usize| {
        let mut m = Tensor::zeros(&[w * w, c]);
        for iy in 0..w {
            for ix in 0..w {
                for ch in 0..c {
                    m.data_mut()[(iy * w + ix) * c + ch] = t.at3(ch, wy * w + iy, wx * w + ix);
                }
            }
        }
        m
    };
    let mut worst: f64 = 0.0;
    for wy in 0..h / w {
        for wx in 0..wd / w {
            let want = attention_oracle(&tokens(&q, wy, wx), &tokens(&k, wy, wx), &tokens(&v, wy, wx));
            for iy in 0..w {
                for ix in 0..w {
                    for ch in 0..c {
                        let got = out.at3(ch, wy * w + iy, wx * w + ix);
                        worst = worst.max((got - want.data()[(iy * w + ix) * c + ch]).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    pub shape: Vec<usize>,
    pub trials: usize,
    pub precision: &'static str,
    pub max_error: f64,
}

/// Max `|irfft2(rfft2(x)) − x|` over random inputs of `shape` (`C×H×W`).
pub fn spectral_roundtrip_check<T: SpectralScalar>(
    shape: (usize, usize, usize),
    trials: usize,
    seed: u64,
) -> SpectralReport {
    let (c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        for _ in 0..c {
            let plane: Vec<T> = (0..h * w)
                .map(|_| T::from_f64(rng.gen_range(-1.0..1.0)).unwrap())
                .collect();
            let mut spec = rfft2_plane(&plane, h, w);
            let back = irfft2_plane(&mut spec, h, w);
            for (a, b) in plane.iter().zip(&back) {
                worst = worst.max((*a - *b).abs().to_f64().unwrap());
            }
        }
    }
    SpectralReport {
        shape: vec![c, h, w],
        trials,
        precision: if std::mem::size_of::<T>() == 4 { "single" } else { "double" },
        max_error: worst,
    }
}

/// Round-trip error for a constant plane (spectrum is DC only).
pub fn spectral_constant_check(h: usize, w: usize, value: f64) -> f64 {
    let plane = vec![value; h * w];
    let mut spec = rfft2_plane(&plane, h, w);
    let back = irfft2_plane(&mut spec, h, w);
    plane
        .iter()
        .zip(&back)
        .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_degenerate_cases() {
        let q = Tensor::from_vec(&[1, 2], vec![0.3, -1.0]).unwrap();
        let k = Tensor::from_vec(&[1, 2], vec![2.0, 5.0]).unwrap();
        let v = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(attention_oracle(&q, &k, &v), v);

        let q = Tensor::ones(&[2, 2]);
        let k = Tensor::ones(&[3, 2]);
        let v = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let out = attention_oracle(&q, &k, &v);
        assert!(out.data().iter().all(|&o| (o - 3.0).abs() < 1e-12));
    }

    #[test]
    fn attention_is_window_local() {
        assert_eq!(attention_locality_check(6, &[4, 8, 16], 1, true).unwrap(), 0.0);
        assert_eq!(attention_locality_check(7, &[4, 8, 16], 2, true).unwrap(), 0.0);
        // The 3×3 kernel reaches one pixel across the border.
        assert!(attention_locality_check(6, &[4, 8, 16], 1, false).unwrap() > 1e-6);
    }

    #[test]
    fn spatial_path_is_plain_attention_at_base_grid() {
        assert!(spatial_attention_oracle_check(3, 4).unwrap() < 1e-5);
    }

    #[test]
    fn roundtrip_bounds() {
        assert!(spectral_roundtrip_check::<f64>((3, 16, 16), 10, 1).max_error < 1e-12);
        assert!(spectral_roundtrip_check::<f64>((3, 17, 13), 10, 2).max_error < 1e-12);
        assert!(spectral_roundtrip_check::<f32>((3, 16, 16), 10, 3).max_error < 1e-6);
        assert!(spectral_roundtrip_check::<f32>((3, 17, 13), 10, 4).max_error < 1e-6);
        assert!(spectral_constant_check(16, 16, 0.37) < 1e-13);
    }

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = BlockParams::new();
        p.insert("weight", Tensor::randn(&[5, 4], 1.0, &mut rng));
        p.insert("bias", Tensor::randn(&[5], 1.0, &mut rng));
        let x = Tensor::randn(&[4, 6, 6], 1.0, &mut rng);
        let r = finite_diff_grad_check(
            "conv1x1",
            &x,
            &p,
            |x, b| x.conv1x1(b.get("weight")?, Some(b.get("bias")?)),
            &GradCheckOptions::default(),
        );
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 64);
    }

    #[test]
    fn sign_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = BlockParams::new();
        p.insert("weight", Tensor::randn(&[3, 3], 1.0, &mut rng));
        p.insert("bias", Tensor::zeros(&[3]));
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let opts = GradCheckOptions {
            inject_fault: true,
            ..Default::default()
        };
        let r = finite_diff_grad_check(
            "conv1x1",
            &x,
            &p,
            |x, b| x.conv1x1(b.get("weight")?, Some(b.get("bias")?)),
            &opts,
        );
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }
}
