//! Non-overlapping window partitioning of feature maps.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// A feature map cut into `w×w` windows, stored as
/// `(num_windows)×C×w×w` in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    pub windows: Tensor,
    pub window_size: usize,
    pub origin_shape: (usize, usize),
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        self.windows.shape()[0]
    }

    /// Swaps windows `a` and `b` in place.
    pub fn swap_windows(&mut self, a: usize, b: usize) {
        let n = self.windows.numel() / self.num_windows();
        if a == b {
            return;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let (left, right) = self.windows.data_mut().split_at_mut(hi * n);
        left[lo * n..(lo + 1) * n].swap_with_slice(&mut right[..n]);
    }
}

pub fn window_partition(x: &Tensor, w: usize) -> Result<WindowGrid> {
    let (c, h, wd) = x.dims3()?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(shape_err!("window size {w} does not divide {h}×{wd}"));
    }
    let (ny, nx) = (h / w, wd / w);
    let mut data = Vec::with_capacity(x.numel());
    for wy in 0..ny {
        for wx in 0..nx {
            for ch in 0..c {
                for iy in 0..w {
                    let row = (ch * h + wy * w + iy) * wd + wx * w;
                    data.extend_from_slice(&x.data()[row..row + w]);
                }
            }
        }
    }
    Ok(WindowGrid {
        windows: Tensor::from_vec(&[ny * nx, c, w, w], data)?,
        window_size: w,
        origin_shape: (h, wd),
    })
}

pub fn window_merge(g: &WindowGrid) -> Result<Tensor> {
    let (h, wd) = g.origin_shape;
    let w = g.window_size;
    let [n, c, w1, w2] = g.windows.shape()[..] else {
        return Err(shape_err!("window grid must be rank 4, got {:?}", g.windows.shape()));
    };
    if w == 0 || w1 != w || w2 != w || h % w != 0 || wd % w != 0 || n != (h / w) * (wd / w) {
        return Err(shape_err!(
            "window grid {:?} inconsistent with window {w} over {h}×{wd}",
            g.windows.shape()
        ));
    }
    let nx = wd / w;
    let mut out = Tensor::zeros(&[c, h, wd]);
    let src = g.windows.data();
    for idx in 0..n {
        let (wy, wx) = (idx / nx, idx % nx);
        for ch in 0..c {
            for iy in 0..w {
                let s = ((idx * c + ch) * w + iy) * w;
                let d = (ch * h + wy * w + iy) * wd + wx * w;
                out.data_mut()[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}
