//! Hierarchical window attention.
//!
//! Channels are split into one contiguous group per window size. Inside a
//! group, half of the channels go through spatial self-correlation (queries
//! attend to keys/values average-pooled onto a 4×4 grid per window) and the
//! other half through channel self-correlation (a channel×channel map per
//! window). Both cost O(w²) per window.

use rand::Rng;

use super::{
    check_channels, init_conv1x1, init_dwconv, init_gains, init_norm, layer_norm_2d, residual,
    BlockParams, Bound,
};
use crate::error::{config_err, shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Side of the pooled key/value grid used by spatial self-correlation.
pub const BASE_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelGroup {
    pub start: usize,
    pub len: usize,
    pub window: usize,
}

impl ChannelGroup {
    /// Channels routed through spatial self-correlation; the rest use the
    /// channel path.
    pub fn spatial_len(&self) -> usize {
        self.len / 2
    }
}

/// Equal contiguous groups, remainder to the last (largest) window.
pub fn channel_groups(c: usize, windows: &[usize]) -> Result<Vec<ChannelGroup>> {
    if windows.is_empty() {
        return Err(config_err!("window hierarchy is empty"));
    }
    for &w in windows {
        if w == 0 || w % BASE_GRID != 0 {
            return Err(config_err!(
                "window size {w} is not a positive multiple of {BASE_GRID}"
            ));
        }
    }
    let n = windows.len();
    let base = c / n;
    let groups: Vec<ChannelGroup> = windows
        .iter()
        .enumerate()
        .map(|(i, &w)| ChannelGroup {
            start: i * base,
            len: if i + 1 == n { c - i * base } else { base },
            window: w,
        })
        .collect();
    if let Some(g) = groups.iter().find(|g| g.len < 2) {
        return Err(config_err!(
            "{c} channels leave the window-{} group with {} channel(s); need at least 2",
            g.window,
            g.len
        ));
    }
    Ok(groups)
}

pub fn hit_params(c: usize, rng: &mut impl Rng) -> BlockParams {
    let mut p = BlockParams::new();
    init_norm(&mut p, "norm1", c);
    for name in ["attn.q", "attn.k", "attn.value", "attn.gate", "attn.proj"] {
        init_conv1x1(&mut p, name, c, c, rng);
    }
    init_dwconv(&mut p, "attn.dw", c, 3, rng);
    init_norm(&mut p, "norm2", c);
    init_conv1x1(&mut p, "ffn.expand", c, 2 * c, rng);
    init_conv1x1(&mut p, "ffn.project", 2 * c, c, rng);
    init_gains(&mut p);
    p
}

pub struct Projections<'g> {
    pub q: Var<'g>,
    pub k: Var<'g>,
    pub v: Var<'g>,
}

/// Queries and keys are pointwise projections. Values combine a depthwise
/// spatial path with a channel path: a pointwise value projection scaled by
/// a sigmoid gate computed from each group's window-averaged features.
pub fn dual_feature_extraction<'g>(
    x: Var<'g>,
    p: &Bound<'g>,
    windows: &[usize],
) -> Result<Projections<'g>> {
    let (c, _, _) = x.value().dims3()?;
    check_channels(x, p.get("q.weight")?.value().shape()[1], "dual_feature_extraction")?;
    let groups = channel_groups(c, windows)?;
    let q = p.conv1x1(x, "q")?;
    let k = p.conv1x1(x, "k")?;
    let spatial = p.dwconv(x, "dw")?;
    let value = p.conv1x1(x, "value")?;
    let mut parts = Vec::with_capacity(groups.len());
    for g in &groups {
        let pooled = x.avg_pool(g.window, g.window)?;
        let gate = p.conv1x1(pooled, "gate")?.sigmoid();
        let gate = gate.slice_channels(g.start, g.len)?;
        parts.push(value.slice_channels(g.start, g.len)?.mul_blockwise(gate)?);
    }
    let channel = x.graph().concat_channels(&parts)?;
    Ok(Projections {
        q,
        k,
        v: spatial.add(channel)?,
    })
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if h % window != 0 || w % window != 0 {
        return Err(shape_err!(
            "{h}×{w} feature map is not divisible by window {window}; pad first"
        ));
    }
    Ok(())
}

/// Returns the output map and the softmax weights (`num_windows×w²×16`).
pub fn spatial_self_correlation<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    window: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let (c, h, w) = q.value().dims3()?;
    check_divisible(h, w, window)?;
    if window % BASE_GRID != 0 {
        return Err(config_err!("window {window} is not a multiple of {BASE_GRID}"));
    }
    let f = window / BASE_GRID;
    let qt = q.to_window_tokens(window)?;
    let kt = k.avg_pool(f, f)?.to_window_tokens(BASE_GRID)?;
    let vt = v.avg_pool(f, f)?.to_window_tokens(BASE_GRID)?;
    let attn = qt
        .bmm(kt.transpose12()?)?
        .scale(1.0 / (c as f64).sqrt())
        .softmax_last()?;
    let out = attn.bmm(vt)?.from_window_tokens(window, h, w)?;
    Ok((out, attn))
}

/// Returns the output map and the softmax weights (`num_windows×C×C`).
pub fn channel_self_correlation<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    window: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let (_, h, w) = q.value().dims3()?;
    check_divisible(h, w, window)?;
    let qt = q.to_window_tokens(window)?.transpose12()?;
    let kt = k.to_window_tokens(window)?;
    let vt = v.to_window_tokens(window)?.transpose12()?;
    let attn = qt
        .bmm(kt)?
        .scale(1.0 / (window * window) as f64)
        .softmax_last()?;
    let out = attn
        .bmm(vt)?
        .transpose12()?
        .from_window_tokens(window, h, w)?;
    Ok((out, attn))
}

/// Window self-attention over the hierarchy `windows`, also returning every
/// softmax weight tensor it formed.
pub fn hit_wsa_traced<'g>(
    x: Var<'g>,
    windows: &[usize],
    p: &Bound<'g>,
) -> Result<(Var<'g>, Vec<Tensor>)> {
    let (c, h, w) = x.value().dims3()?;
    let largest = windows.iter().copied().max().unwrap_or(0);
    if largest > 0 {
        check_divisible(h, w, largest)?;
    }
    let groups = channel_groups(c, windows)?;
    let proj = dual_feature_extraction(x, p, windows)?;
    let mut outs = Vec::with_capacity(2 * groups.len());
    let mut maps = Vec::with_capacity(2 * groups.len());
    for g in &groups {
        let s = g.spatial_len();
        let part = |t: Var<'g>, off: usize, len: usize| t.slice_channels(g.start + off, len);
        let (so, sa) = spatial_self_correlation(
            part(proj.q, 0, s)?,
            part(proj.k, 0, s)?,
            part(proj.v, 0, s)?,
            g.window,
        )?;
        let rest = g.len - s;
        let (co, ca) = channel_self_correlation(
            part(proj.q, s, rest)?,
            part(proj.k, s, rest)?,
            part(proj.v, s, rest)?,
            g.window,
        )?;
        outs.push(so);
        outs.push(co);
        maps.push(sa.value().as_ref().clone());
        maps.push(ca.value().as_ref().clone());
    }
    let fused = x.graph().concat_channels(&outs)?;
    Ok((p.conv1x1(fused, "proj")?, maps))
}

pub fn hit_wsa<'g>(x: Var<'g>, windows: &[usize], p: &Bound<'g>) -> Result<Var<'g>> {
    hit_wsa_traced(x, windows, p).map(|(out, _)| out)
}

/// Pointwise expand ×2 → GELU → pointwise project.
pub fn channel_ffn<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    check_channels(x, p.get("expand.weight")?.value().shape()[1], "channel_ffn")?;
    let t = p.conv1x1(x, "expand")?.gelu();
    p.conv1x1(t, "project")
}

pub fn hit_block<'g>(x: Var<'g>, p: &Bound<'g>, windows: &[usize]) -> Result<Var<'g>> {
    let c = p.get("norm1.weight")?.value().numel();
    check_channels(x, c, "hit_block")?;
    let t = layer_norm_2d(x, &p.sub("norm1"))?;
    let t = hit_wsa(t, windows, &p.sub("attn"))?;
    let y = residual(x, t, p.get("gain1")?)?;
    let t = layer_norm_2d(y, &p.sub("norm2"))?;
    let t = channel_ffn(t, &p.sub("ffn"))?;
    residual(y, t, p.get("gain2")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::apply;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const WINDOWS: [usize; 3] = [4, 8, 16];

    #[test]
    fn groups_split_with_remainder_last() {
        let g = channel_groups(16, &WINDOWS).unwrap();
        assert_eq!(
            g.iter().map(|g| (g.start, g.len)).collect::<Vec<_>>(),
            vec![(0, 5), (5, 5), (10, 6)]
        );
        assert!(channel_groups(5, &WINDOWS).is_err());
        assert!(channel_groups(6, &[4, 6]).is_err());
    }

    fn attn_params(c: usize, rng: &mut ChaCha8Rng) -> BlockParams {
        hit_params(c, rng).sub("attn")
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = attn_params(6, &mut rng);
        let y = apply(&Tensor::zeros(&[6, 16, 16]), &p, |x, b| hit_wsa(x, &WINDOWS, b)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = attn_params(9, &mut rng);
        let x = Tensor::randn(&[9, 32, 16], 1.0, &mut rng);
        let g = crate::Graph::inference();
        let b = p.bind(&g);
        let (out, maps) = hit_wsa_traced(g.leaf(x), &WINDOWS, &b).unwrap();
        assert_eq!(out.value().shape(), &[9, 32, 16]);
        assert_eq!(maps.len(), 6);
        for m in &maps {
            let n = *m.shape().last().unwrap();
            for row in m.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_non_divisible_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = attn_params(6, &mut rng);
        let err = apply(&Tensor::zeros(&[6, 24, 16]), &p, |x, b| hit_wsa(x, &WINDOWS, b));
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn dfe_constructed_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = 6;
        let mut p = attn_params(c, &mut rng);
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        p.set("q.weight", eye.clone()).unwrap();
        p.set("k.weight", eye).unwrap();
        p.set("dw.weight", Tensor::zeros(&[c, 3, 3])).unwrap();
        p.set("value.weight", Tensor::zeros(&[c, c])).unwrap();
        let x = Tensor::randn(&[c, 16, 16], 1.0, &mut rng);
        let g = crate::Graph::inference();
        let b = p.bind(&g);
        let proj = dual_feature_extraction(g.leaf(x.clone()), &b, &WINDOWS).unwrap();
        assert_eq!(proj.q.value().as_ref(), &x);
        assert_eq!(proj.k.value().as_ref(), &x);
        assert_eq!(proj.v.value().max_abs(), 0.0);

        let proj = dual_feature_extraction(g.leaf(Tensor::zeros(&[c, 16, 16])), &b, &WINDOWS).unwrap();
        assert_eq!(proj.q.value().max_abs(), 0.0);
        assert_eq!(proj.k.value().max_abs(), 0.0);
        assert_eq!(proj.v.value().max_abs(), 0.0);
    }

    #[test]
    fn block_identity_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut p = hit_params(9, &mut rng);
        let x = Tensor::randn(&[9, 32, 32], 1.0, &mut rng);
        let y = apply(&x, &p, |x, b| hit_block(x, b, &WINDOWS)).unwrap();
        assert_eq!(y, x);
        p.set("gain1", Tensor::scalar(0.5)).unwrap();
        p.set("gain2", Tensor::scalar(0.5)).unwrap();
        let y = apply(&x, &p, |x, b| hit_block(x, b, &WINDOWS)).unwrap();
        assert_eq!(y.shape(), &[9, 32, 32]);
        assert!(y.is_finite());
    }

    #[test]
    fn channel_ffn_zero_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let p = hit_params(8, &mut rng).sub("ffn");
        let y = apply(&Tensor::zeros(&[8, 8, 8]), &p, channel_ffn).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        let x = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
        assert_eq!(apply(&x, &p, channel_ffn).unwrap().shape(), &[8, 8, 8]);
        assert!(apply(&Tensor::zeros(&[4, 8, 8]), &p, channel_ffn).is_err());
    }
}
