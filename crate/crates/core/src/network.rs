//! The single-stage U-shaped network.
//!
//! `num_levels` resolutions; the encoder runs one stage per level with a
//! stride-2 2×2 convolution between levels, the bottleneck blocks run at the
//! lowest level, and the decoder climbs back with 1×1 + pixel-shuffle
//! upsampling. Skips are fused by addition, optionally through an F2T2 block.
//! A zero-initialized head plus a global input residual make a fresh model
//! the identity map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    self, channel_groups, f2t2_params, hit_params, init_conv, init_conv1x1, naf_params,
    BlockParams, Bound,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub num_levels: usize,
    pub enc_blocks: Vec<usize>,
    pub dec_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub hit_enabled: bool,
    pub f2t2_skip_levels: Vec<usize>,
    pub window_hierarchy: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

impl ModelConfig {
    /// Widths and depths of the NAFNet defaults.
    pub fn paper_scale() -> Self {
        ModelConfig {
            base_width: 32,
            num_levels: 4,
            enc_blocks: vec![2, 2, 4, 8],
            dec_blocks: vec![2, 2, 2, 2],
            middle_blocks: 12,
            hit_enabled: true,
            f2t2_skip_levels: vec![0],
            window_hierarchy: vec![4, 8, 16],
        }
    }

    /// Small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            base_width: 16,
            num_levels: 3,
            enc_blocks: vec![1, 1, 1],
            dec_blocks: vec![1, 1, 1],
            middle_blocks: 1,
            ..Self::paper_scale()
        }
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(config_err!("num_levels must be at least 1"));
        }
        if self.enc_blocks.len() != self.num_levels || self.dec_blocks.len() != self.num_levels {
            return Err(config_err!(
                "enc_blocks/dec_blocks need {} entries, got {}/{}",
                self.num_levels,
                self.enc_blocks.len(),
                self.dec_blocks.len()
            ));
        }
        let min_width = 2 * self.window_hierarchy.len().max(1);
        if self.base_width < min_width {
            return Err(config_err!(
                "base_width {} below {min_width} (two channels per window group)",
                self.base_width
            ));
        }
        for &lvl in &self.f2t2_skip_levels {
            if lvl + 1 >= self.num_levels {
                return Err(config_err!(
                    "f2t2 skip level {lvl} must be below {}",
                    self.num_levels - 1
                ));
            }
        }
        if self.hit_enabled {
            for lvl in 0..self.num_levels {
                channel_groups(self.width_at(lvl), &self.window_hierarchy)?;
            }
        }
        Ok(())
    }

    /// Input sides are reflect-padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        let window = self.window_hierarchy.iter().copied().max().unwrap_or(1);
        window << (self.num_levels - 1)
    }

    /// The configuration actually built for `variant`.
    pub fn for_variant(&self, variant: Variant) -> ModelConfig {
        let mut cfg = self.clone();
        match variant {
            Variant::NafOnly => {
                cfg.hit_enabled = false;
                cfg.f2t2_skip_levels.clear();
            }
            Variant::NafHit => {
                cfg.hit_enabled = true;
                cfg.f2t2_skip_levels.clear();
            }
            Variant::Full => cfg.hit_enabled = true,
        }
        cfg
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NafOnly,
    NafHit,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NafOnly, Variant::NafHit, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NafOnly => "naf_only",
            Variant::NafHit => "naf_hit",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown variant `{s}` (naf_only, naf_hit, full)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Naf,
    Hit,
    F2t2,
}

/// One block of the network: its parameter prefix, type and width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSlot {
    pub name: String,
    pub kind: BlockKind,
    pub channels: usize,
}

fn stage_slots(prefix: &str, n: usize, channels: usize, hit: bool) -> Vec<BlockSlot> {
    (0..n)
        .map(|j| BlockSlot {
            name: format!("{prefix}.{j}"),
            kind: if hit && j + 1 == n {
                BlockKind::Hit
            } else {
                BlockKind::Naf
            },
            channels,
        })
        .collect()
}

/// Every block of `cfg`, in execution order.
pub fn block_layout(cfg: &ModelConfig) -> Vec<BlockSlot> {
    let last = cfg.num_levels - 1;
    let mut slots = Vec::new();
    for lvl in 0..cfg.num_levels {
        slots.extend(stage_slots(&format!("enc{lvl}"), cfg.enc_blocks[lvl], cfg.width_at(lvl), cfg.hit_enabled));
    }
    slots.extend(stage_slots("middle", cfg.middle_blocks, cfg.width_at(last), cfg.hit_enabled));
    for lvl in (0..cfg.num_levels).rev() {
        if cfg.f2t2_skip_levels.contains(&lvl) {
            slots.push(BlockSlot {
                name: format!("skip{lvl}"),
                kind: BlockKind::F2t2,
                channels: cfg.width_at(lvl),
            });
        }
        slots.extend(stage_slots(&format!("dec{lvl}"), cfg.dec_blocks[lvl], cfg.width_at(lvl), cfg.hit_enabled));
    }
    slots
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    variant: Variant,
    seed: u64,
    params: BlockParams,
}

pub fn build_model(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
    Model::build(cfg, variant, seed)
}

pub fn count_params(model: &Model) -> usize {
    model.params.num_scalars()
}

impl Model {
    pub fn build(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let config = cfg.for_variant(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BlockParams::new();
        let w = config.base_width;

        init_conv(&mut params, "stem", 3, w, 3, &mut rng);
        for slot in block_layout(&config) {
            let block = match slot.kind {
                BlockKind::Naf => naf_params(slot.channels, &mut rng),
                BlockKind::Hit => hit_params(slot.channels, &mut rng),
                BlockKind::F2t2 => f2t2_params(slot.channels, &mut rng),
            };
            params.extend_prefixed(&slot.name, block);
        }
        for lvl in 0..config.num_levels - 1 {
            let c = config.width_at(lvl);
            init_conv(&mut params, &format!("down{lvl}"), c, 2 * c, 2, &mut rng);
            init_conv1x1(&mut params, &format!("up{lvl}"), 2 * c, 4 * c, &mut rng);
        }
        params.insert("head.weight", Tensor::zeros(&[3, w, 3, 3]));
        params.insert("head.bias", Tensor::zeros(&[3]));
        Ok(Model {
            config,
            variant,
            seed,
            params,
        })
    }

    /// Reassembles a model from stored parameters; names and shapes must
    /// match what `config`/`variant` build exactly.
    pub fn from_parts(
        config: ModelConfig,
        variant: Variant,
        seed: u64,
        params: BlockParams,
    ) -> Result<Model> {
        let template = Model::build(&config, variant, seed)?;
        for (name, t) in template.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some((extra, _)) = params.iter().find(|(k, _)| template.params.get(k).is_err()) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model {
            config: template.config,
            variant,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &BlockParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BlockParams {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Training-mode forward on a bound parameter set; output is unclamped.
    pub fn forward_graph<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let (c, h, w) = image.value().dims3()?;
        if c != 3 {
            return Err(shape_err!("network input must have 3 channels, got {c}"));
        }
        let cfg = &self.config;
        let m = cfg.pad_multiple();
        let x = image.reflect_pad(h.next_multiple_of(m) - h, w.next_multiple_of(m) - w)?;

        let conv = |t: Var<'g>, name: &str, stride: usize, pad: usize| {
            t.conv2d(
                p.get(&format!("{name}.weight"))?,
                Some(p.get(&format!("{name}.bias"))?),
                stride,
                pad,
            )
        };
        let run_stage = |mut t: Var<'g>, prefix: &str, n: usize, channels: usize| -> Result<Var<'g>> {
            for slot in stage_slots(prefix, n, channels, cfg.hit_enabled) {
                t = self.run_block(t, &slot, p)?;
            }
            Ok(t)
        };

        let mut t = conv(x, "stem", 1, 1)?;
        let mut skips = Vec::with_capacity(cfg.num_levels);
        for lvl in 0..cfg.num_levels {
            t = run_stage(t, &format!("enc{lvl}"), cfg.enc_blocks[lvl], cfg.width_at(lvl))?;
            if lvl + 1 < cfg.num_levels {
                skips.push(t);
                t = conv(t, &format!("down{lvl}"), 2, 0)?;
            }
        }
        let last = cfg.num_levels - 1;
        t = run_stage(t, "middle", cfg.middle_blocks, cfg.width_at(last))?;
        for lvl in (0..cfg.num_levels).rev() {
            if lvl < last {
                let up = p.sub(&format!("up{lvl}"));
                t = t
                    .conv1x1(up.get("weight")?, Some(up.get("bias")?))?
                    .pixel_shuffle2()?;
                let mut skip = skips[lvl];
                if cfg.f2t2_skip_levels.contains(&lvl) {
                    let slot = BlockSlot {
                        name: format!("skip{lvl}"),
                        kind: BlockKind::F2t2,
                        channels: cfg.width_at(lvl),
                    };
                    skip = self.run_block(skip, &slot, p)?;
                }
                t = t.add(skip)?;
            }
            t = run_stage(t, &format!("dec{lvl}"), cfg.dec_blocks[lvl], cfg.width_at(lvl))?;
        }
        let out = conv(t, "head", 1, 1)?.add(x)?;
        out.crop(h, w)
    }

    fn run_block<'g>(&self, x: Var<'g>, slot: &BlockSlot, p: &Bound<'g>) -> Result<Var<'g>> {
        let bp = p.sub(&slot.name);
        match slot.kind {
            BlockKind::Naf => blocks::naf_block(x, &bp),
            BlockKind::Hit => blocks::hit_block(x, &bp, &self.config.window_hierarchy),
            BlockKind::F2t2 => blocks::f2t2_block(x, &bp),
        }
    }

    /// Unclamped forward without recording gradients.
    pub fn forward_train(&self, image: &Image) -> Result<Tensor> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let out = self.forward_graph(&p, g.leaf(image.tensor().clone()))?;
        Ok(out.value().as_ref().clone())
    }

    /// Inference-mode forward: output clamped to `[0, 1]`.
    pub fn infer(&self, image: &Image) -> Result<Image> {
        Image::new(self.forward_train(image)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Inference forward; same as [`Model::infer`].
pub fn forward(model: &Model, image: &Image) -> Result<Image> {
    model.infer(image)
}
