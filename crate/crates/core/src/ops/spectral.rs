//! Real 2-D FFT pair on `C×H×W` maps.
//!
//! The forward transform returns the half spectrum (`W/2 + 1` columns) with
//! real parts stacked on top of imaginary parts: `2C×H×(W/2+1)`. The inverse
//! follows the usual `irfftn` convention (imaginary parts of self-conjugate
//! bins are ignored) and is normalized by `1/(H·W)`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::num_traits::Float;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{config_err, shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

type Complex64 = Complex<f64>;

/// Scalar types with a per-thread FFT plan cache.
pub trait SpectralScalar: FftNum + Float + Default {
    fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<Self>>;
}

macro_rules! spectral_scalar {
    ($t:ty, $cache:ident) => {
        thread_local! {
            static $cache: RefCell<FftPlanner<$t>> = RefCell::new(FftPlanner::new());
        }
        impl SpectralScalar for $t {
            fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<$t>> {
                $cache.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            }
        }
    };
}

spectral_scalar!(f64, PLANNER_F64);
spectral_scalar!(f32, PLANNER_F32);

fn cast<T: SpectralScalar>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `k` in a length-`w` real signal.
fn multiplicity(k: usize, w: usize) -> f64 {
    if k == 0 || (w % 2 == 0 && k == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// In-place FFT of every column of an `h×wf` row-major complex buffer.
fn fft_columns<T: SpectralScalar>(buf: &mut [Complex<T>], h: usize, wf: usize, inverse: bool) {
    let fft = T::plan(h, inverse);
    let mut col = vec![Complex::<T>::default(); h];
    for k in 0..wf {
        for y in 0..h {
            col[y] = buf[y * wf + k];
        }
        fft.process(&mut col);
        for y in 0..h {
            buf[y * wf + k] = col[y];
        }
    }
}

/// Half-spectrum of one `h×w` real plane.
pub fn rfft2_plane<T: SpectralScalar>(x: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let wf = half_width(w);
    let fft = T::plan(w, false);
    let mut out = vec![Complex::<T>::default(); h * wf];
    let mut row = vec![Complex::<T>::default(); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *r = Complex::new(v, T::zero());
        }
        fft.process(&mut row);
        out[y * wf..(y + 1) * wf].copy_from_slice(&row[..wf]);
    }
    fft_columns(&mut out, h, wf, false);
    out
}

fn rfft2_adjoint_plane(spec: &mut [Complex64], h: usize, w: usize) -> Vec<f64> {
    let wf = half_width(w);
    fft_columns(spec, h, wf, true);
    let ifft = f64::plan(w, true);
    let mut out = vec![0.0; h * w];
    let mut row = vec![Complex64::default(); w];
    for y in 0..h {
        row.fill(Complex64::default());
        row[..wf].copy_from_slice(&spec[y * wf..(y + 1) * wf]);
        ifft.process(&mut row);
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re;
        }
    }
    out
}

/// Real `h×w` plane from its half-spectrum (consumes `spec` as scratch).
pub fn irfft2_plane<T: SpectralScalar>(spec: &mut [Complex<T>], h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    fft_columns(spec, h, wf, true);
    let ifft = T::plan(w, true);
    let norm: T = cast(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); h * w];
    let mut row = vec![Complex::<T>::default(); w];
    for y in 0..h {
        row.fill(Complex::default());
        for k in 0..wf {
            row[k] = spec[y * wf + k] * cast::<T>(multiplicity(k, w));
        }
        ifft.process(&mut row);
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re * norm;
        }
    }
    out
}

fn irfft2_adjoint_plane(g: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let wf = half_width(w);
    let fft = f64::plan(w, false);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![Complex64::default(); h * wf];
    let mut row = vec![Complex64::default(); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&g[y * w..(y + 1) * w]) {
            *r = Complex64::new(v, 0.0);
        }
        fft.process(&mut row);
        for k in 0..wf {
            out[y * wf + k] = row[k] * (multiplicity(k, w) * norm);
        }
    }
    fft_columns(&mut out, h, wf, false);
    out
}

fn split_planes(s: &Tensor) -> Result<(usize, usize, usize, Vec<Vec<Complex64>>)> {
    let (c2, h, wf) = s.dims3()?;
    if c2 % 2 != 0 {
        return Err(shape_err!("spectrum needs an even channel count, got {c2}"));
    }
    let c = c2 / 2;
    let p = h * wf;
    let planes = (0..c)
        .map(|ch| {
            let re = &s.data()[ch * p..(ch + 1) * p];
            let im = &s.data()[(c + ch) * p..(c + ch + 1) * p];
            re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect()
        })
        .collect();
    Ok((c, h, wf, planes))
}

fn stack_planes(planes: &[Vec<Complex64>], h: usize, wf: usize) -> Tensor {
    let c = planes.len();
    let p = h * wf;
    let mut data = vec![0.0; 2 * c * p];
    for (ch, plane) in planes.iter().enumerate() {
        for (i, z) in plane.iter().enumerate() {
            data[ch * p + i] = z.re;
            data[(c + ch) * p + i] = z.im;
        }
    }
    Tensor::from_vec(&[2 * c, h, wf], data).unwrap()
}

/// Forward real 2-D FFT: `C×H×W → 2C×H×(W/2+1)`.
pub fn rfft2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let planes: Vec<_> = (0..c)
        .map(|ch| rfft2_plane(&x.data()[ch * h * w..(ch + 1) * h * w], h, w))
        .collect();
    Ok(stack_planes(&planes, h, half_width(w)))
}

/// Inverse real 2-D FFT: `2C×H×(W/2+1) → C×H×W`.
pub fn irfft2(s: &Tensor, w: usize) -> Result<Tensor> {
    let (c, h, wf, planes) = split_planes(s)?;
    if half_width(w) != wf {
        return Err(shape_err!("spectrum width {wf} does not match output width {w}"));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for mut plane in planes {
        data.extend(irfft2_plane(&mut plane, h, w));
    }
    Tensor::from_vec(&[c, h, w], data)
}

impl<'g> Var<'g> {
    pub fn rfft2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if h < 2 || w < 2 {
            return Err(config_err!("FFT needs H, W >= 2, got {h}×{w}"));
        }
        let out = rfft2(&x)?;
        Ok(self.graph.op(out, &[self], move |g| {
            let (_, _, _, planes) = split_planes(g).unwrap();
            let mut data = Vec::with_capacity(c * h * w);
            for mut plane in planes {
                data.extend(rfft2_adjoint_plane(&mut plane, h, w));
            }
            vec![Tensor::from_vec(&[c, h, w], data).unwrap()]
        }))
    }

    pub fn irfft2(self, w: usize) -> Result<Var<'g>> {
        let s = self.value();
        let out = irfft2(&s, w)?;
        let (_, h, _) = out.dims3()?;
        let wf = half_width(w);
        Ok(self.graph.op(out, &[self], move |g| {
            let (c, _, _) = g.dims3().unwrap();
            let planes: Vec<_> = (0..c)
                .map(|ch| irfft2_adjoint_plane(&g.data()[ch * h * w..(ch + 1) * h * w], h, w))
                .collect();
            vec![stack_planes(&planes, h, wf)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N²) DFT used as the reference.
    fn naive_rfft2(x: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let wf = half_width(w);
        let mut out = Tensor::zeros(&[2 * c, h, wf]);
        for ch in 0..c {
            for kh in 0..h {
                for kw in 0..wf {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for xx in 0..w {
                            let th = -2.0
                                * std::f64::consts::PI
                                * ((kh * y) as f64 / h as f64 + (kw * xx) as f64 / w as f64);
                            re += x.at3(ch, y, xx) * th.cos();
                            im += x.at3(ch, y, xx) * th.sin();
                        }
                    }
                    out.set3(ch, kh, kw, re);
                    out.set3(c + ch, kh, kw, im);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(4, 4), (5, 6), (3, 7)] {
            let x = Tensor::randn(&[2, h, w], 1.0, &mut rng);
            let d = rfft2(&x).unwrap().max_abs_diff(&naive_rfft2(&x)).unwrap();
            assert!(d < 1e-10, "{h}x{w}: {d}");
        }
    }

    #[test]
    fn roundtrip_even_and_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, w) in &[(16, 16), (17, 13), (2, 3)] {
            let x = Tensor::randn(&[3, h, w], 1.0, &mut rng);
            let back = irfft2(&rfft2(&x).unwrap(), w).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <A x, y> = <x, Aᵀ y> for both transforms
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w) in &[(4, 6), (5, 5)] {
            let g = crate::graph::Graph::new();
            let x = Tensor::randn(&[1, h, w], 1.0, &mut rng);
            let y = Tensor::randn(&[2, h, half_width(w)], 1.0, &mut rng);
            let xv = g.leaf(x.clone());
            let f = xv.rfft2().unwrap();
            let lhs: f64 = f.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward_with(f, y.clone());
            let rhs: f64 = grads.get(xv).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);

            let yv = g.leaf(y.clone());
            let inv = yv.irfft2(w).unwrap();
            let lhs: f64 = inv.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward_with(inv, x.clone());
            let rhs: f64 = grads.get(yv).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
