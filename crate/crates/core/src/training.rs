//! Loss, learning-rate schedule, Adam and the training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockParams;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{augment, random_crop, DataSource, ReflectionTriple};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::metrics::{SSIM_SIGMA, SSIM_WINDOW};
use crate::network::{Model, ModelConfig, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub periods: Vec<u64>,
    pub restart_weights: Vec<f64>,
    pub eta_min: f64,
    pub total_iters: u64,
    pub batch_per_device: usize,
    pub patch: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm limit; `0` disables clipping.
    pub grad_clip: f64,
    /// Weight of the `1 − SSIM` term added to the mean absolute error.
    pub ssim_loss_weight: f64,
    pub augment: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            periods: vec![100_000; 3],
            restart_weights: vec![1.0, 0.5, 0.25],
            eta_min: 1e-7,
            total_iters: 300_000,
            batch_per_device: 1,
            patch: 512,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            ssim_loss_weight: 0.0,
            augment: true,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.len() != self.restart_weights.len() {
            return Err(config_err!(
                "{} periods but {} restart weights",
                self.periods.len(),
                self.restart_weights.len()
            ));
        }
        if self.periods.contains(&0) {
            return Err(config_err!("periods must be positive"));
        }
        let span: u64 = self.periods.iter().sum();
        if self.total_iters > span {
            return Err(config_err!(
                "total_iters {} exceeds the schedule length {span}",
                self.total_iters
            ));
        }
        if !(self.lr0 >= 0.0 && self.eta_min >= 0.0 && self.eta_min.is_finite() && self.lr0.is_finite()) {
            return Err(config_err!("learning rates must be finite and non-negative"));
        }
        if self.batch_per_device == 0 || self.patch == 0 {
            return Err(config_err!("batch_per_device and patch must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(config_err!("adam betas must lie in [0, 1)"));
        }
        if self.ssim_loss_weight < 0.0 || self.grad_clip < 0.0 {
            return Err(config_err!("ssim_loss_weight and grad_clip must be non-negative"));
        }
        if self.ssim_loss_weight > 0.0 && self.patch < SSIM_WINDOW {
            return Err(config_err!("the SSIM loss needs patch ≥ {SSIM_WINDOW}"));
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts: inside period `j` of length `T_j`,
/// at local step `t`, `η_min + (w_j·lr0 − η_min)·(1 + cos(π·t/T_j))/2`.
pub fn cosine_restart_lr(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::Argument(format!(
            "iteration {iter} outside [0, {})",
            cfg.total_iters
        )));
    }
    let mut start = 0;
    for (&len, &weight) in cfg.periods.iter().zip(&cfg.restart_weights) {
        if iter < start + len {
            let t = (iter - start) as f64 / len as f64;
            let peak = weight * cfg.lr0;
            return Ok(cfg.eta_min + (peak - cfg.eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0);
        }
        start += len;
    }
    Err(Error::Argument(format!("iteration {iter} beyond the last period")))
}

/// Mean absolute error.
pub fn loss(pred: &Image, gt: &Image) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), gt.dims()));
    }
    let (a, b) = (pred.tensor().data(), gt.tensor().data());
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Differentiable SSIM with the same window as [`crate::metrics::ssim`].
pub fn ssim_graph<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let g = x.graph();
    let (c, _, _) = x.value().dims3()?;
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = taps.iter().sum::<f64>().powi(2);
    let mut kernel = Vec::with_capacity(c * SSIM_WINDOW * SSIM_WINDOW);
    for _ in 0..c {
        for a in &taps {
            for b in &taps {
                kernel.push(a * b / norm);
            }
        }
    }
    let k = g.leaf(Tensor::from_vec(&[c, SSIM_WINDOW, SSIM_WINDOW], kernel)?);
    let blur = |v: Var<'g>| v.dwconv(k, None, 0);
    let (mx, my) = (blur(x)?, blur(y)?);
    let (mxx, myy) = (mx.mul(mx)?, my.mul(my)?);
    let mxy = mx.mul(my)?;
    let vx = blur(x.mul(x)?)?.sub(mxx)?;
    let vy = blur(y.mul(y)?)?.sub(myy)?;
    let cov = blur(x.mul(y)?)?.sub(mxy)?;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let num = mxy.scale(2.0).add_scalar(c1).mul(cov.scale(2.0).add_scalar(c2))?;
    let den = mxx.add(myy)?.add_scalar(c1).mul(vx.add(vy)?.add_scalar(c2))?;
    Ok(num.div(den)?.mean())
}

fn training_loss<'g>(pred: Var<'g>, gt: Var<'g>, cfg: &TrainConfig) -> Result<Var<'g>> {
    let mae = pred.sub(gt)?.abs().mean();
    if cfg.ssim_loss_weight > 0.0 {
        let s = ssim_graph(pred, gt)?;
        mae.add(s.scale(-cfg.ssim_loss_weight).add_scalar(cfg.ssim_loss_weight))
    } else {
        Ok(mae)
    }
}

/// First and second moments of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BlockParams,
    pub v: BlockParams,
}

impl AdamState {
    pub fn new(params: &BlockParams) -> Self {
        let zeros: BlockParams = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut BlockParams, grads: &BlockParams, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let (b1, b2) = cfg.betas;
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut BlockParams, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    /// Exponential moving average of the loss (factor 0.98).
    pub loss_ema: Option<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, model_config: &ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let model = Model::build(model_config, variant, config.seed)?;
        Ok(TrainState {
            optimizer: AdamState::new(model.params()),
            model,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            loss_ema: None,
            config: config.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// One Adam step on `batch`; `state.iteration` advances by one.
pub fn train_step(state: &mut TrainState, batch: &[ReflectionTriple]) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let cfg = state.config.clone();
    let lr = cosine_restart_lr(state.iteration, &cfg)?;
    let g = Graph::new();
    let p = state.model.params().bind(&g);
    let mut total: Option<Var> = None;
    for (i, triple) in batch.iter().enumerate() {
        let pred = state.model.forward_graph(&p, g.leaf(triple.blended.tensor().clone()))?;
        let l = training_loss(pred, g.leaf(triple.transmission.tensor().clone()), &cfg)?;
        let value = l.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: state.iteration,
                batch_index: i,
                loss: value,
            });
        }
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let total = total.expect("batch is non-empty").scale(1.0 / batch.len() as f64);
    let loss = total.value().data()[0];
    let mut grads = p.gradients(&g.backward(total));
    drop(p);
    clip_global_norm(&mut grads, cfg.grad_clip);
    state.optimizer.update(state.model.params_mut(), &grads, lr, &cfg)?;
    let record = StepRecord {
        iteration: state.iteration,
        lr,
        loss,
    };
    state.iteration += 1;
    state.loss_ema = Some(match state.loss_ema {
        Some(e) => 0.98 * e + 0.02 * loss,
        None => loss,
    });
    Ok(record)
}

/// Draws the batch for the current iteration from `state.rng`.
pub fn draw_batch(state: &mut TrainState, source: &dyn DataSource) -> Result<Vec<ReflectionTriple>> {
    if source.is_empty() {
        return Err(Error::Argument("data source is empty".into()));
    }
    let cfg = &state.config;
    (0..cfg.batch_per_device)
        .map(|_| {
            let index = state.rng.gen_range(0..source.len());
            let triple = source.sample(index, &mut state.rng)?;
            let triple = random_crop(&triple, cfg.patch, &mut state.rng);
            Ok(if cfg.augment {
                augment(&triple, &mut state.rng)
            } else {
                triple
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where checkpoints and `loss.csv` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

pub struct FitResult {
    pub state: TrainState,
    pub losses: Vec<StepRecord>,
}

pub const LOSS_CSV_HEADER: &str = "iteration,lr,loss";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:08}.safetensors"))
}

fn read_loss_csv(path: &Path, before: u64) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Validation(format!("malformed row `{line}` in {}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut parts = line.split(',');
            let mut next = || parts.next().ok_or_else(|| bad(line));
            let iteration = next()?.parse().map_err(|_| bad(line))?;
            let lr = next()?.parse().map_err(|_| bad(line))?;
            let loss = next()?.parse().map_err(|_| bad(line))?;
            Ok(StepRecord { iteration, lr, loss })
        })
        .filter(|r| r.as_ref().map_or(true, |r| r.iteration < before))
        .collect()
}

pub fn write_loss_csv(path: &Path, losses: &[StepRecord]) -> Result<()> {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in losses {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.lr, r.loss);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.total_iters`, checkpointing every `checkpoint_every`
/// iterations and at the end.
pub fn fit(
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    variant: Variant,
    source: &dyn DataSource,
    opts: &FitOptions,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut losses = Vec::new();
    let mut state = match &opts.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            if state.model.config() != &model_config.for_variant(variant) || state.model.variant() != variant {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            state.config = cfg.clone();
            if let Some(dir) = &opts.out_dir {
                let csv = dir.join("loss.csv");
                if csv.exists() {
                    losses = read_loss_csv(&csv, state.iteration)?;
                }
            }
            state
        }
        None => TrainState::new(cfg, model_config, variant)?,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.iteration < cfg.total_iters {
        let batch = draw_batch(&mut state, source)?;
        losses.push(train_step(&mut state, &batch)?);
        let done = state.iteration == cfg.total_iters;
        let due = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.out_dir {
            if due || done {
                save_checkpoint(&state, &checkpoint_path(dir, state.iteration))?;
                write_loss_csv(&dir.join("loss.csv"), &losses)?;
            }
        }
    }
    Ok(FitResult { state, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_restarts_at_each_period() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_restart_lr(0, &cfg).unwrap(), 1e-4);
        assert!(cosine_restart_lr(300_000, &cfg).is_err());
        let before = cosine_restart_lr(99_999, &cfg).unwrap();
        let after = cosine_restart_lr(100_000, &cfg).unwrap();
        assert!(before < 1.1e-7 && after > 4.9e-5);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let cfg = TrainConfig {
            restart_weights: vec![1.0],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g: BlockParams = [("a".to_string(), Tensor::full(&[4], 1.0))].into_iter().collect();
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 2.0);
        assert!((g.get("a").unwrap().data()[0] - 0.5).abs() < 1e-15);
    }
}
