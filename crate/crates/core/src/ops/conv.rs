use std::rc::Rc;

use super::gemm;
use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

fn check_bias(bias: Option<&Tensor>, n: usize, op: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(shape_err!("{op}: bias shape {:?}, expected [{n}]", b.shape()));
        }
    }
    Ok(())
}

fn add_channel_bias(out: &mut Tensor, bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.data_mut().chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &Tensor, plane: usize) -> Tensor {
    let sums = g.data().chunks(plane).map(|c| c.iter().sum()).collect::<Vec<f64>>();
    let n = sums.len();
    Tensor::from_vec(&[n], sums).unwrap()
}

fn with_bias<'g>(x: Var<'g>, w: Var<'g>, b: Option<Var<'g>>) -> Vec<Var<'g>> {
    let mut v = vec![x, w];
    v.extend(b);
    v
}

impl<'g> Var<'g> {
    /// Pointwise convolution; `weight` is `Co×Ci`.
    pub fn conv1x1(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let (ci, h, wd) = x.dims3()?;
        let [co, wci] = w.shape()[..] else {
            return Err(shape_err!("conv1x1: weight must be Co×Ci, got {:?}", w.shape()));
        };
        if wci != ci {
            return Err(shape_err!("conv1x1: weight expects {wci} input channels, input has {ci}"));
        }
        let bv = bias.map(|b| b.value());
        check_bias(bv.as_deref(), co, "conv1x1")?;
        let p = h * wd;
        let mut out = Tensor::zeros(&[co, h, wd]);
        gemm(co, ci, p, w.data(), (ci, 1), x.data(), (p, 1), out.data_mut(), false);
        add_channel_bias(&mut out, bv.as_deref(), p);
        let has_bias = bias.is_some();
        Ok(self.graph.op(out, &with_bias(self, weight, bias), move |g| {
            let mut dx = Tensor::zeros(&[ci, h, wd]);
            gemm(ci, co, p, w.data(), (1, ci), g.data(), (p, 1), dx.data_mut(), false);
            let mut dw = Tensor::zeros(&[co, ci]);
            gemm(co, p, ci, g.data(), (p, 1), x.data(), (1, p), dw.data_mut(), false);
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(channel_sums(g, p));
            }
            grads
        }))
    }

    /// Depthwise `k×k` convolution with zero padding `pad` on every side;
    /// `weight` is `C×k×k`.
    pub fn dwconv(self, weight: Var<'g>, bias: Option<Var<'g>>, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = x.dims3()?;
        let [wc, k, k2] = w.shape()[..] else {
            return Err(shape_err!("dwconv: weight must be C×k×k, got {:?}", w.shape()));
        };
        if wc != c || k != k2 {
            return Err(shape_err!(
                "dwconv: weight {:?} incompatible with {c} channels",
                w.shape()
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("dwconv: {k}×{k} kernel larger than padded {h}×{wd} input"));
        }
        let bv = bias.map(|b| b.value());
        check_bias(bv.as_deref(), c, "dwconv")?;
        let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        dw_forward(&x, &w, out.data_mut(), (c, h, wd), (ho, wo), k, pad);
        add_channel_bias(&mut out, bv.as_deref(), ho * wo);
        let has_bias = bias.is_some();
        Ok(self.graph.op(out, &with_bias(self, weight, bias), move |g| {
            let mut dx = Tensor::zeros(&[c, h, wd]);
            let mut dw = Tensor::zeros(&[c, k, k]);
            dw_backward(&x, &w, g, &mut dx, &mut dw, (c, h, wd), (ho, wo), k, pad);
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(channel_sums(g, ho * wo));
            }
            grads
        }))
    }

    /// Dense convolution; `weight` is `Co×Ci×k×k`.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        let (ci, h, wd) = x.dims3()?;
        let [co, wci, k, k2] = w.shape()[..] else {
            return Err(shape_err!("conv2d: weight must be Co×Ci×k×k, got {:?}", w.shape()));
        };
        if wci != ci || k != k2 || stride == 0 {
            return Err(shape_err!(
                "conv2d: weight {:?} / stride {stride} incompatible with {ci} input channels",
                w.shape()
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("conv2d: kernel larger than padded input"));
        }
        let bv = bias.map(|b| b.value());
        check_bias(bv.as_deref(), co, "conv2d")?;
        let geo = Im2Col {
            ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = Rc::new(geo.im2col(&x));
        let (rows, p) = (ci * k * k, geo.ho * geo.wo);
        let mut out = Tensor::zeros(&[co, geo.ho, geo.wo]);
        gemm(co, rows, p, w.data(), (rows, 1), &cols, (p, 1), out.data_mut(), false);
        add_channel_bias(&mut out, bv.as_deref(), p);
        let has_bias = bias.is_some();
        Ok(self.graph.op(out, &with_bias(self, weight, bias), move |g| {
            let mut dcols = vec![0.0; rows * p];
            gemm(rows, co, p, w.data(), (1, rows), g.data(), (p, 1), &mut dcols, false);
            let mut dw = Tensor::zeros(&[co, ci, k, k]);
            gemm(co, p, rows, g.data(), (p, 1), &cols, (1, p), dw.data_mut(), false);
            let mut grads = vec![geo.col2im(&dcols), dw];
            if has_bias {
                grads.push(channel_sums(g, p));
            }
            grads
        }))
    }
}

#[derive(Clone, Copy)]
struct Im2Col {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Im2Col {
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.ci * self.k * self.k * p];
        let xd = x.data();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = xd[(c * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Tensor {
        let p = self.ho * self.wo;
        let mut dx = Tensor::zeros(&[self.ci, self.h, self.w]);
        let d = dx.data_mut();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                d[(c * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Output columns `ox` whose tap `kx` lands inside `[0, w)`.
#[inline]
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

fn dw_forward(
    x: &Tensor,
    w: &Tensor,
    out: &mut [f64],
    (c, h, wd): (usize, usize, usize),
    (ho, wo): (usize, usize),
    k: usize,
    pad: usize,
) {
    let xd = x.data();
    let wdat = w.data();
    for ch in 0..c {
        let xplane = &xd[ch * h * wd..(ch + 1) * h * wd];
        let oplane = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, pad, h, ho);
            for kx in 0..k {
                let wv = wdat[(ch * k + ky) * k + kx];
                let (ox_lo, ox_hi) = valid_range(kx, pad, wd, wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - pad;
                    let orow = &mut oplane[oy * wo + ox_lo..oy * wo + ox_hi];
                    let irow = &xplane[iy * wd + ox_lo + kx - pad..];
                    for (o, &i) in orow.iter_mut().zip(irow) {
                        *o += wv * i;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dw_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    dx: &mut Tensor,
    dw: &mut Tensor,
    (c, h, wd): (usize, usize, usize),
    (ho, wo): (usize, usize),
    k: usize,
    pad: usize,
) {
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for ch in 0..c {
        let xplane = &xd[ch * h * wd..(ch + 1) * h * wd];
        let gplane = &gd[ch * ho * wo..(ch + 1) * ho * wo];
        let dxplane = &mut dxd[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, pad, h, ho);
            for kx in 0..k {
                let widx = (ch * k + ky) * k + kx;
                let wv = wdat[widx];
                let (ox_lo, ox_hi) = valid_range(kx, pad, wd, wo);
                let mut acc = 0.0;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - pad;
                    let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                    let base = iy * wd + ox_lo + kx - pad;
                    let n = grow.len();
                    let irow = &xplane[base..base + n];
                    for (&gv, &iv) in grow.iter().zip(irow) {
                        acc += gv * iv;
                    }
                    let drow = &mut dxplane[base..base + n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
                dwd[widx] += acc;
            }
        }
    }
}
