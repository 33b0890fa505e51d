//! Block-level mathematics: normalization, gating, and the three plain
//! blocks the network is assembled from.
//!
//! Every block is a pure function of an input [`Var`] and a [`Bound`] view of
//! its [`BlockParams`]. Composite blocks carry two scalar residual gains that
//! start at zero, so a freshly initialized block is the identity map.

mod f2t2;
mod hit;
mod naf;
pub mod window;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub use f2t2::{
    f2t2_block, f2t2_params, fft_layer, fft_layer_with, frequency_branch, spatial_ffn,
    FftLayerOptions,
};
pub use hit::{
    channel_ffn, channel_groups, channel_self_correlation, dual_feature_extraction, hit_block,
    hit_params, hit_wsa, hit_wsa_traced, spatial_self_correlation, ChannelGroup, Projections,
    BASE_GRID,
};
pub use naf::{naf_block, naf_params};
pub use window::{window_merge, window_partition, WindowGrid};

/// Variance floor of every layer normalization.
pub const LN_EPS: f64 = 1e-6;

/// Named parameter arrays of one block instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockParams {
    tensors: BTreeMap<String, Tensor>,
}

impl BlockParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        value.expect_shape(slot.shape())?;
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: BlockParams) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> BlockParams {
        let head = format!("{prefix}.");
        BlockParams {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for BlockParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        BlockParams {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Parameters registered on a graph.
#[derive(Clone)]
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    pub fn sub(&self, prefix: &str) -> Bound<'g> {
        let head = format!("{prefix}.");
        Bound {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    /// Gradient of every bound parameter (zeros where unused).
    pub fn gradients(&self, grads: &Gradients) -> BlockParams {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }

    fn weight_bias(&self, name: &str) -> Result<(Var<'g>, Var<'g>)> {
        if name.is_empty() {
            Ok((self.get("weight")?, self.get("bias")?))
        } else {
            Ok((
                self.get(&format!("{name}.weight"))?,
                self.get(&format!("{name}.bias"))?,
            ))
        }
    }

    pub(crate) fn conv1x1(&self, x: Var<'g>, name: &str) -> Result<Var<'g>> {
        let (w, b) = self.weight_bias(name)?;
        x.conv1x1(w, Some(b))
    }

    /// "Same"-padded depthwise convolution.
    pub(crate) fn dwconv(&self, x: Var<'g>, name: &str) -> Result<Var<'g>> {
        let (w, b) = self.weight_bias(name)?;
        let k = w.value().shape().get(1).copied().unwrap_or(1);
        x.dwconv(w, Some(b), k / 2)
    }
}

/// Runs a block on plain tensors through an inference graph.
pub fn apply(
    x: &Tensor,
    params: &BlockParams,
    f: impl for<'g> Fn(Var<'g>, &Bound<'g>) -> Result<Var<'g>>,
) -> Result<Tensor> {
    let g = Graph::inference();
    let bound = params.bind(&g);
    let out = f(g.leaf(x.clone()), &bound)?;
    Ok(out.value().as_ref().clone())
}

pub(crate) fn check_channels(x: Var<'_>, expected: usize, block: &str) -> Result<()> {
    let (c, _, _) = x.value().dims3()?;
    if c != expected {
        return Err(Error::Shape(format!(
            "{block}: input has {c} channels, parameters expect {expected}"
        )));
    }
    Ok(())
}

/// Per-position channel LayerNorm with learnable per-channel affine pair
/// (`weight`, `bias`).
pub fn layer_norm_2d<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    x.layer_norm(p.get("weight")?, p.get("bias")?, LN_EPS)
}

/// Multiplies the first channel half by the second.
pub fn simple_gate(x: Var<'_>) -> Result<Var<'_>> {
    let (c, _, _) = x.value().dims3()?;
    if c % 2 != 0 {
        return Err(shape_err!("simple_gate needs an even channel count, got {c}"));
    }
    let half = c / 2;
    x.slice_channels(0, half)?.mul(x.slice_channels(half, half)?)
}

/// `x ⊙ pointwise(global_average_pool(x))`.
pub fn simplified_channel_attention<'g>(x: Var<'g>, p: &Bound<'g>) -> Result<Var<'g>> {
    let (_, h, w) = x.value().dims3()?;
    let pooled = x.avg_pool(h, w)?;
    let scale = p.conv1x1(pooled, "")?;
    x.mul_blockwise(scale)
}

// Initialization helpers. Weights follow the usual uniform(±1/sqrt(fan_in))
// rule; biases start at zero.

fn uniform_weight(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub(crate) fn init_conv1x1(p: &mut BlockParams, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    p.insert(format!("{name}.weight"), uniform_weight(&[cout, cin], cin, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_dwconv(p: &mut BlockParams, name: &str, c: usize, k: usize, rng: &mut impl Rng) {
    p.insert(format!("{name}.weight"), uniform_weight(&[c, k, k], k * k, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
}

pub(crate) fn init_conv(
    p: &mut BlockParams,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    p.insert(format!("{name}.weight"), uniform_weight(&[cout, cin, k, k], cin * k * k, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_norm(p: &mut BlockParams, name: &str, c: usize) {
    p.insert(format!("{name}.weight"), Tensor::ones(&[c]));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
}

pub(crate) fn init_gains(p: &mut BlockParams) {
    p.insert("gain1", Tensor::zeros(&[1]));
    p.insert("gain2", Tensor::zeros(&[1]));
}

/// `x + gain · branch`.
pub(crate) fn residual<'g>(x: Var<'g>, branch: Var<'g>, gain: Var<'g>) -> Result<Var<'g>> {
    x.add(branch.mul_gain(gain)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm_params(c: usize, gamma: f64, beta: f64) -> BlockParams {
        let mut p = BlockParams::new();
        p.insert("weight", Tensor::full(&[c], gamma));
        p.insert("bias", Tensor::full(&[c], beta));
        p
    }

    #[test]
    fn layer_norm_zero_variance_position_maps_to_zero() {
        let x = Tensor::full(&[4, 2, 2], 3.5);
        let y = apply(&x, &norm_params(4, 1.0, 0.0), layer_norm_2d).unwrap();
        assert!(y.max_abs() < 1e-9);
    }

    #[test]
    fn layer_norm_affine_on_standardized_input() {
        // channel vectors (1,-1,1,-1) and (-1,1,-1,1): mean 0, variance 1
        let data = vec![1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
        let x = Tensor::from_vec(&[4, 1, 2], data).unwrap();
        let y = apply(&x, &norm_params(4, 2.0, 1.0), layer_norm_2d).unwrap();
        let expect = x.map(|v| 2.0 * v + 1.0);
        // eps = 1e-6 shifts the scale by ~5e-7
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-5);
    }

    #[test]
    fn layer_norm_statistics_match_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[4, 3, 3], 2.0, &mut rng);
        let y = apply(&x, &norm_params(4, 1.0, 0.0), layer_norm_2d).unwrap();
        for yy in 0..3 {
            for xx in 0..3 {
                let vals: Vec<f64> = (0..4).map(|c| y.at3(c, yy, xx)).collect();
                let mean = vals.iter().sum::<f64>() / 4.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn layer_norm_rejects_single_channel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let err = apply(&x, &norm_params(1, 1.0, 0.0), layer_norm_2d).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn simple_gate_cases() {
        let none = BlockParams::new();
        let y = apply(&Tensor::ones(&[4, 2, 2]), &none, |x, _| simple_gate(x)).unwrap();
        assert_eq!(y, Tensor::ones(&[2, 2, 2]));

        let mut half_zero = Tensor::ones(&[4, 2, 2]);
        half_zero.data_mut()[8..].fill(0.0);
        let y = apply(&half_zero, &none, |x, _| simple_gate(x)).unwrap();
        assert_eq!(y, Tensor::zeros(&[2, 2, 2]));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[6, 2, 2], 1.0, &mut rng);
        let y = apply(&x, &none, |x, _| simple_gate(x)).unwrap();
        for c in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.at3(c, i, j), x.at3(c, i, j) * x.at3(c + 3, i, j));
                }
            }
        }
        assert!(matches!(
            apply(&Tensor::ones(&[3, 2, 2]), &none, |x, _| simple_gate(x)),
            Err(Error::Shape(_))
        ));
    }

    fn sca_params(weight: Tensor) -> BlockParams {
        let c = weight.shape()[0];
        let mut p = BlockParams::new();
        p.insert("weight", weight);
        p.insert("bias", Tensor::zeros(&[c]));
        p
    }

    #[test]
    fn sca_zero_and_constant_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = sca_params(Tensor::randn(&[3, 3], 1.0, &mut rng));
        let y = apply(&Tensor::zeros(&[3, 4, 4]), &p, simplified_channel_attention).unwrap();
        assert_eq!(y.max_abs(), 0.0);

        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let consts = [0.5, -2.0, 3.0];
        let mut x = Tensor::zeros(&[3, 4, 4]);
        for (c, &v) in consts.iter().enumerate() {
            x.data_mut()[c * 16..(c + 1) * 16].fill(v);
        }
        let y = apply(&x, &sca_params(eye), simplified_channel_attention).unwrap();
        for (c, &v) in consts.iter().enumerate() {
            assert!(y.data()[c * 16..(c + 1) * 16].iter().all(|&o| (o - v * v).abs() < 1e-12));
        }
    }

    #[test]
    fn sca_matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 5, 3], 1.0, &mut rng);
        let y = apply(&x, &sca_params(w.clone()), simplified_channel_attention).unwrap();
        let mut pooled = [0.0; 4];
        for (c, p) in pooled.iter_mut().enumerate() {
            *p = x.data()[c * 15..(c + 1) * 15].iter().sum::<f64>() / 15.0;
        }
        for c in 0..4 {
            let s: f64 = (0..4).map(|j| w.data()[c * 4 + j] * pooled[j]).sum();
            for i in 0..15 {
                assert!((y.data()[c * 15 + i] - x.data()[c * 15 + i] * s).abs() < 1e-6);
            }
        }
        let bad = sca_params(Tensor::zeros(&[3, 3]));
        assert!(apply(&x, &bad, simplified_channel_attention).is_err());
    }
}
