//! FFT dual-branch Transformer block.
//!
//! The token mixer is a two-branch layer: a local depthwise branch and a
//! frequency branch that mixes the stacked real/imaginary spectrum with
//! pointwise kernels, giving every output position an image-wide receptive
//! field. The feed-forward part sums parallel 3/5/7 depthwise convolutions.

use rand::Rng;

use super::{
    check_channels, init_conv1x1, init_dwconv, init_gains, init_norm, layer_norm_2d, residual,
    BlockParams, Bound,
};
use crate::error::Result;
use crate::graph::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FftLayerOptions {
    /// GELU between the two spectral kernels. Disabled only by tests that
    /// check the frequency branch against the identity.
    pub frequency_activation: bool,
}

impl Default for FftLayerOptions {
    fn default() -> Self {
        FftLayerOptions {
            frequency_activation: true,
        }
    }
}

pub fn f2t2_params(c: usize, rng: &mut impl Rng) -> BlockParams {
    let mut p = BlockParams::new();
    init_norm(&mut p, "norm1", c);
    init_dwconv(&mut p, "fft.dw", c, 3, rng);
    init_conv1x1(&mut p, "fft.spatial", c, c, rng);
    init_conv1x1(&mut p, "fft.freq1", 2 * c, 2 * c, rng);
    init_conv1x1(&mut p, "fft.freq2", 2 * c, 2 * c, rng);
    init_conv1x1(&mut p, "fft.fuse", c, c, rng);
    init_norm(&mut p, "norm2", c);
    init_conv1x1(&mut p, "ffn.expand", c, 2 * c, rng);
    for k in [3, 5, 7] {
        init_dwconv(&mut p, &format!("ffn.dw{k}"), 2 * c, k, rng);
    }
    init_conv1x1(&mut p, "ffn.project", 2 * c, c, rng);
    init_gains(&mut p);
    p
}

/// rFFT2 → pointwise → (GELU) → pointwise → irFFT2.
pub fn frequency_branch<'g>(x: Var<'g>, p: &Bound<'g>, opts: FftLayerOptions) -> Result<Var<'g>> {
    let (_, _, w) = x.value().dims3()?;
    let mut s = p.conv1x1(x.rfft2()?, "freq1")?;
    if opts.frequency_activation {
        s = s.gelu();
    }
    p.conv1x1(s, "freq2")?.irfft2(w)
}

pub fn fft_layer_with<'g>(x: Var<'g>, p: &Bound<'g>, opts: FftLayerOptions) -> Result<Var<'g>> {
    check_channels(x, p.get("spatial.weight")?.value().shape()[1], "fft_layer")?;
    let spatial = p.conv1x1(p.dwconv(x, "dw")?, "spatial")?;
    let freq = frequency_branch(x, p, opts)?;
    p.conv1x1(spatial.add(freq)?, "fuse")
}

pub fn fft_layer<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    fft_layer_with(x, p, FftLayerOptions::default())
}

/// Pointwise expand ×2 → GELU → Σ depthwise{3,5,7} → pointwise project.
pub fn spatial_ffn<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    check_channels(x, p.get("expand.weight")?.value().shape()[1], "spatial_ffn")?;
    let e = p.conv1x1(x, "expand")?.gelu();
    p.conv1x1(multi_kernel_depthwise(e, p)?, "project")
}

fn multi_kernel_depthwise<'g>(e: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    p.dwconv(e, "dw3")?
        .add(p.dwconv(e, "dw5")?)?
        .add(p.dwconv(e, "dw7")?)
}

pub fn f2t2_block<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    let c = p.get("norm1.weight")?.value().numel();
    check_channels(x, c, "f2t2_block")?;
    let t = layer_norm_2d(x, &p.sub("norm1"))?;
    let t = fft_layer(t, &p.sub("fft"))?;
    let y = residual(x, t, p.get("gain1")?)?;
    let t = layer_norm_2d(y, &p.sub("norm2"))?;
    let t = spatial_ffn(t, &p.sub("ffn"))?;
    residual(y, t, p.get("gain2")?)
}
