use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Mirror index without edge repetition (`-1 → 1`), valid for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `C×H×W → (num_windows)×(w·w)×C`: windows in row-major order, tokens in
/// row-major order inside each window.
pub fn windows_map_to_tokens(x: &Tensor, w: usize) -> Result<Tensor> {
    let (c, h, wd) = x.dims3()?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(shape_err!("window size {w} does not divide {h}×{wd}"));
    }
    let (ny, nx) = (h / w, wd / w);
    let mut out = vec![0.0; c * h * wd];
    let xd = x.data();
    for wy in 0..ny {
        for wx in 0..nx {
            let n = wy * nx + wx;
            for iy in 0..w {
                for ix in 0..w {
                    let t = iy * w + ix;
                    let base = (n * w * w + t) * c;
                    let (y, xx) = (wy * w + iy, wx * w + ix);
                    for ch in 0..c {
                        out[base + ch] = xd[(ch * h + y) * wd + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[ny * nx, w * w, c], out)
}

/// Inverse of [`windows_map_to_tokens`].
pub fn tokens_to_windows_map(t: &Tensor, w: usize, h: usize, wd: usize) -> Result<Tensor> {
    let [nw, ww, c] = t.shape()[..] else {
        return Err(shape_err!("expected window tokens of rank 3, got {:?}", t.shape()));
    };
    if w == 0 || h % w != 0 || wd % w != 0 || ww != w * w || nw != (h / w) * (wd / w) {
        return Err(shape_err!(
            "tokens {:?} inconsistent with window {w} over {h}×{wd}",
            t.shape()
        ));
    }
    let nx = wd / w;
    let mut out = vec![0.0; c * h * wd];
    let td = t.data();
    for n in 0..nw {
        let (wy, wx) = (n / nx, n % nx);
        for iy in 0..w {
            for ix in 0..w {
                let base = (n * w * w + iy * w + ix) * c;
                let (y, xx) = (wy * w + iy, wx * w + ix);
                for ch in 0..c {
                    out[(ch * h + y) * wd + xx] = td[base + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, wd], out)
}

impl Graph {
    /// Concatenates rank-3 maps along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = values.first() else {
            return Err(shape_err!("concat of zero tensors"));
        };
        let (_, h, w) = first.dims3()?;
        let mut channels = Vec::with_capacity(values.len());
        let mut data = Vec::new();
        for v in &values {
            let (c, vh, vw) = v.dims3()?;
            if (vh, vw) != (h, w) {
                return Err(shape_err!("concat: spatial sizes differ"));
            }
            channels.push(c);
            data.extend_from_slice(v.data());
        }
        let total: usize = channels.iter().sum();
        let out = Tensor::from_vec(&[total, h, w], data)?;
        Ok(self.op(out, parts, move |g| {
            let mut offset = 0;
            channels
                .iter()
                .map(|&c| {
                    let n = c * h * w;
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    Tensor::from_vec(&[c, h, w], part).unwrap()
                })
                .collect()
        }))
    }
}

impl<'g> Var<'g> {
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if start + len > c || len == 0 {
            return Err(shape_err!("channel slice {start}..{} out of 0..{c}", start + len));
        }
        let p = h * w;
        let out = Tensor::from_vec(&[len, h, w], x.data()[start * p..(start + len) * p].to_vec())?;
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            dx.data_mut()[start * p..(start + len) * p].copy_from_slice(g.data());
            vec![dx]
        }))
    }

    /// Reflect-pads at the bottom and right edges.
    pub fn reflect_pad(self, pad_bottom: usize, pad_right: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if pad_bottom == 0 && pad_right == 0 {
            return Ok(self);
        }
        let (ho, wo) = (h + pad_bottom, w + pad_right);
        let map: Vec<usize> = (0..ho)
            .flat_map(|y| {
                let sy = reflect_index(y as isize, h);
                (0..wo).map(move |xx| sy * w + reflect_index(xx as isize, w))
            })
            .collect();
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ch in 0..c {
            let src = &x.data()[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out.data_mut()[ch * ho * wo..(ch + 1) * ho * wo];
            for (d, &m) in dst.iter_mut().zip(&map) {
                *d = src[m];
            }
        }
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                let src = &g.data()[ch * ho * wo..(ch + 1) * ho * wo];
                let dst = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                for (&gv, &m) in src.iter().zip(&map) {
                    dst[m] += gv;
                }
            }
            vec![dx]
        }))
    }

    /// Keeps the top-left `h×w` region.
    pub fn crop(self, h: usize, w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (c, hi, wi) = x.dims3()?;
        if h > hi || w > wi {
            return Err(shape_err!("crop {h}×{w} larger than {hi}×{wi}"));
        }
        if (h, w) == (hi, wi) {
            return Ok(self);
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * hi + y) * wi;
                let d = (ch * h + y) * w;
                out.data_mut()[d..d + w].copy_from_slice(&x.data()[s..s + w]);
            }
        }
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[c, hi, wi]);
            for ch in 0..c {
                for y in 0..h {
                    let s = (ch * h + y) * w;
                    let d = (ch * hi + y) * wi;
                    dx.data_mut()[d..d + w].copy_from_slice(&g.data()[s..s + w]);
                }
            }
            vec![dx]
        }))
    }

    /// Depth-to-space with factor 2: `4C×H×W → C×2H×2W`.
    pub fn pixel_shuffle2(self) -> Result<Var<'g>> {
        let x = self.value();
        let (c4, h, w) = x.dims3()?;
        if c4 % 4 != 0 {
            return Err(shape_err!("pixel shuffle needs a multiple of 4 channels, got {c4}"));
        }
        let c = c4 / 4;
        // out index -> in index
        let mut map = vec![0usize; c4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src_c = ch * 4 + (y % 2) * 2 + xx % 2;
                    map[(ch * 2 * h + y) * 2 * w + xx] = (src_c * h + y / 2) * w + xx / 2;
                }
            }
        }
        let out = Tensor::from_vec(&[c, 2 * h, 2 * w], map.iter().map(|&m| x.data()[m]).collect())?;
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[c4, h, w]);
            for (&gv, &m) in g.data().iter().zip(&map) {
                dx.data_mut()[m] = gv;
            }
            vec![dx]
        }))
    }

    /// Non-overlapping `kh×kw` average pooling.
    pub fn avg_pool(self, kh: usize, kw: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(shape_err!("avg_pool {kh}×{kw} does not tile {h}×{w}"));
        }
        if (kh, kw) == (1, 1) {
            return Ok(self);
        }
        let (ho, wo) = (h / kh, w / kw);
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.data_mut()[(ch * ho + y / kh) * wo + xx / kw] +=
                        x.data()[(ch * h + y) * w + xx];
                }
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v *= norm);
        Ok(self.graph.op(out, &[self], move |g| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        dx.data_mut()[(ch * h + y) * w + xx] =
                            g.data()[(ch * ho + y / kh) * wo + xx / kw] * norm;
                    }
                }
            }
            vec![dx]
        }))
    }

    /// `self ⊙ upsample(scale)` where `scale` is `C×h×w` and each of its cells
    /// covers an `(H/h)×(W/w)` block of `self`.
    pub fn mul_blockwise(self, scale: Var<'g>) -> Result<Var<'g>> {
        let (x, s) = (self.value(), scale.value());
        let (c, h, w) = x.dims3()?;
        let (sc, sh, sw) = s.dims3()?;
        if sc != c || sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
            return Err(shape_err!(
                "mul_blockwise: scale {:?} does not tile {:?}",
                s.shape(),
                x.shape()
            ));
        }
        let (by, bx) = (h / sh, w / sw);
        let sidx = move |ch: usize, y: usize, xx: usize| (ch * sh + y / by) * sw + xx / bx;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = (ch * h + y) * w + xx;
                    out.data_mut()[i] = x.data()[i] * s.data()[sidx(ch, y, xx)];
                }
            }
        }
        Ok(self.graph.op(out, &[self, scale], move |g| {
            let mut dx = Tensor::zeros(&[c, h, w]);
            let mut ds = Tensor::zeros(&[sc, sh, sw]);
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i = (ch * h + y) * w + xx;
                        let j = sidx(ch, y, xx);
                        dx.data_mut()[i] = g.data()[i] * s.data()[j];
                        ds.data_mut()[j] += g.data()[i] * x.data()[i];
                    }
                }
            }
            vec![dx, ds]
        }))
    }

    /// `C×H×W → (num_windows)×(w·w)×C`.
    pub fn to_window_tokens(self, w: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (_, h, wd) = x.dims3()?;
        let out = windows_map_to_tokens(&x, w)?;
        Ok(self
            .graph
            .op(out, &[self], move |g| vec![tokens_to_windows_map(g, w, h, wd).unwrap()]))
    }

    /// `(num_windows)×(w·w)×C → C×H×W`.
    pub fn from_window_tokens(self, w: usize, h: usize, wd: usize) -> Result<Var<'g>> {
        let out = tokens_to_windows_map(&self.value(), w, h, wd)?;
        Ok(self
            .graph
            .op(out, &[self], move |g| vec![windows_map_to_tokens(g, w).unwrap()]))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(self) -> Result<Var<'g>> {
        let x = self.value();
        let [b, m, n] = x.shape()[..] else {
            return Err(shape_err!("transpose12 needs rank 3, got {:?}", x.shape()));
        };
        let out = transpose_batched(&x, b, m, n);
        Ok(self
            .graph
            .op(out, &[self], move |g| vec![transpose_batched(g, b, n, m)]))
    }
}

fn transpose_batched(x: &Tensor, b: usize, m: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; b * m * n];
    let xd = x.data();
    for bi in 0..b {
        let src = &xd[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Tensor::from_vec(&[b, n, m], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let g = Graph::inference();
        let x = g.leaf(Tensor::from_vec(&[4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = x.pixel_shuffle2().unwrap();
        assert_eq!(y.value().shape(), &[1, 2, 2]);
        assert_eq!(y.value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let g = Graph::inference();
        let t = Tensor::from_vec(&[1, 2, 3], (0..6).map(f64::from).collect()).unwrap();
        let x = g.leaf(t.clone());
        let p = x.reflect_pad(3, 4).unwrap();
        assert_eq!(p.value().shape(), &[1, 5, 7]);
        assert_eq!(p.crop(2, 3).unwrap().value().as_ref(), &t);
    }
}
