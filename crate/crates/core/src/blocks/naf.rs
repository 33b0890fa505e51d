use rand::Rng;

use super::{
    check_channels, init_conv1x1, init_dwconv, init_gains, init_norm, layer_norm_2d, residual,
    simple_gate, simplified_channel_attention, BlockParams, Bound,
};
use crate::error::Result;
use crate::graph::Var;

pub fn naf_params(c: usize, rng: &mut impl Rng) -> BlockParams {
    let mut p = BlockParams::new();
    init_norm(&mut p, "norm1", c);
    init_conv1x1(&mut p, "conv1", c, 2 * c, rng);
    init_dwconv(&mut p, "dw", 2 * c, 3, rng);
    init_conv1x1(&mut p, "sca", c, c, rng);
    init_conv1x1(&mut p, "conv3", c, c, rng);
    init_norm(&mut p, "norm2", c);
    init_conv1x1(&mut p, "conv4", c, 2 * c, rng);
    init_conv1x1(&mut p, "conv5", c, c, rng);
    init_gains(&mut p);
    p
}

/// Nonlinear-activation-free block: a gated depthwise mixing branch with
/// simplified channel attention, then a gated pointwise branch, each added
/// back through a scalar gain.
pub fn naf_block<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    let c = p.get("norm1.weight")?.value().numel();
    check_channels(x, c, "naf_block")?;

    let t = layer_norm_2d(x, &p.sub("norm1"))?;
    let t = p.conv1x1(t, "conv1")?;
    let t = p.dwconv(t, "dw")?;
    let t = simple_gate(t)?;
    let t = simplified_channel_attention(t, &p.sub("sca"))?;
    let t = p.conv1x1(t, "conv3")?;
    let y = residual(x, t, p.get("gain1")?)?;

    let t = layer_norm_2d(y, &p.sub("norm2"))?;
    let t = p.conv1x1(t, "conv4")?;
    let t = simple_gate(t)?;
    let t = p.conv1x1(t, "conv5")?;
    residual(y, t, p.get("gain2")?)
}
