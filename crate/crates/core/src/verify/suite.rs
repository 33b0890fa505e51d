//! The check suite behind `f2t2hit verify`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    attention_locality_check, finite_diff_grad_check, perturb_params, spatial_attention_oracle_check,
    spectral_constant_check, spectral_roundtrip_check, ssim_oracle, GradCheckOptions,
};
use crate::blocks::{self, window_merge, window_partition, BlockParams, Bound};
use crate::error::{config_err, Error, Result};
use crate::graph::Var;
use crate::image::Image;
use crate::metrics::{evaluate_pairs, psnr, ssim};
use crate::network::{build_model, ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::training::{cosine_restart_lr, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    Gradients,
    Spectral,
    Structure,
    Schedule,
    Metrics,
}

impl Scope {
    pub const NAMES: [&'static str; 6] = ["all", "gradients", "spectral", "structure", "schedule", "metrics"];

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "gradients" => Scope::Gradients,
            "spectral" => Scope::Spectral,
            "structure" => Scope::Structure,
            "schedule" => Scope::Schedule,
            "metrics" => Scope::Metrics,
            _ => return Err(config_err!("unknown scope `{s}` (one of {})", Scope::NAMES.join(", "))),
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Scope::All,
            Scope::Gradients,
            Scope::Spectral,
            Scope::Structure,
            Scope::Schedule,
            Scope::Metrics,
        ]
        .iter()
        .position(|s| s == self)
        .unwrap();
        f.write_str(Scope::NAMES[i])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: String,
    pub passed: bool,
    /// The measured quantity (error, value) the verdict rests on.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub scope: Scope,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub scope: Scope,
    pub seed: u64,
    /// Random draws per gradient check.
    pub draws: u64,
    /// Corrupts one analytic gradient entry in every gradient check.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            scope: Scope::All,
            seed: 0,
            draws: 3,
            inject_fault: false,
        }
    }
}

struct Runner {
    scope: Scope,
    checks: Vec<CheckResult>,
}

impl Runner {
    /// `check` returns `(value, passed, detail)`.
    fn run(&mut self, scope: Scope, name: &str, threshold: f64, check: impl FnOnce() -> Result<(f64, bool, String)>) {
        if !self.scope.includes(scope) {
            return;
        }
        let start = Instant::now();
        let (value, passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (f64::NAN, false, format!("error: {e}")),
        };
        self.checks.push(CheckResult {
            scope,
            name: name.to_string(),
            passed,
            value,
            threshold,
            detail,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    /// Passes when `value < threshold`.
    fn below(&mut self, scope: Scope, name: &str, threshold: f64, value: impl FnOnce() -> Result<f64>) {
        self.run(scope, name, threshold, || {
            let v = value()?;
            Ok((v, v < threshold, String::new()))
        });
    }
}

const WINDOWS: [usize; 3] = [4, 8, 16];

type Make = fn(&mut ChaCha8Rng) -> BlockParams;
type Op = for<'g> fn(Var<'g>, &Bound<'g>) -> Result<Var<'g>>;

fn grad_cases() -> Vec<(&'static str, Vec<usize>, Make, Op)> {
    vec![
        ("naf_block", vec![4, 8, 8], |r| blocks::naf_params(4, r), blocks::naf_block),
        (
            "hit_block",
            vec![6, 16, 16],
            |r| blocks::hit_params(6, r),
            |x, b| blocks::hit_block(x, b, &WINDOWS),
        ),
        ("f2t2_block", vec![2, 8, 8], |r| blocks::f2t2_params(2, r), blocks::f2t2_block),
        ("fft_layer", vec![2, 7, 5], |r| blocks::f2t2_params(2, r).sub("fft"), blocks::fft_layer),
        ("spatial_ffn", vec![3, 8, 8], |r| blocks::f2t2_params(3, r).sub("ffn"), blocks::spatial_ffn),
        ("channel_ffn", vec![4, 6, 6], |r| blocks::hit_params(4, r).sub("ffn"), blocks::channel_ffn),
    ]
}

pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    let mut r = Runner {
        scope: opts.scope,
        checks: Vec::new(),
    };
    let seed = opts.seed;

    for (name, shape, make, op) in grad_cases() {
        for draw in 0..opts.draws {
            let label = format!("grad/{name}#{draw}");
            r.run(Scope::Gradients, &label, super::GRAD_CHECK_THRESHOLD, || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(draw));
                let params = perturb_params(&make(&mut rng), 0.1, &mut rng);
                let x = Tensor::randn(&shape, 1.0, &mut rng);
                let go = GradCheckOptions {
                    seed: seed.wrapping_add(draw),
                    inject_fault: opts.inject_fault,
                    ..Default::default()
                };
                let rep = finite_diff_grad_check(name, &x, &params, op, &go);
                let detail = match &rep.error {
                    Some(e) => format!("error: {e}"),
                    None => format!("{} coordinates, shape {:?}", rep.coordinates, rep.input_shape),
                };
                Ok((rep.max_rel_error, rep.passed, detail))
            });
        }
    }

    for shape in [(3, 16, 16), (3, 17, 13)] {
        let tag = format!("{}x{}x{}", shape.0, shape.1, shape.2);
        r.below(Scope::Spectral, &format!("fft_roundtrip/f64/{tag}"), 1e-12, || {
            Ok(spectral_roundtrip_check::<f64>(shape, 10, seed).max_error)
        });
        r.below(Scope::Spectral, &format!("fft_roundtrip/f32/{tag}"), 1e-6, || {
            Ok(spectral_roundtrip_check::<f32>(shape, 10, seed).max_error)
        });
    }
    r.below(Scope::Spectral, "fft_roundtrip/constant", 1e-13, || {
        Ok(spectral_constant_check(16, 16, 0.37))
    });

    r.run(Scope::Structure, "window_partition_merge", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[6, 16, 24], 1.0, &mut rng);
        let back = window_merge(&window_partition(&x, 8)?)?;
        Ok((back.max_abs_diff(&x)?, back == x, "bit-exact".into()))
    });
    for v in Variant::ALL {
        r.run(Scope::Structure, &format!("identity_at_init/{v}"), 0.0, || {
            let model = build_model(&ModelConfig::desk(), v, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Image::new(Tensor::uniform(&[3, 48, 40], 0.0, 1.0, &mut rng))?;
            let y = model.infer(&x)?;
            let exact = y == x && y.to_rgb8() == x.to_rgb8();
            Ok((y.tensor().max_abs_diff(x.tensor())?, exact, "3×48×40, desk preset".into()))
        });
    }
    r.run(Scope::Structure, "pad_crop_noop", 0.0, || {
        let cfg = ModelConfig {
            base_width: 6,
            num_levels: 2,
            enc_blocks: vec![1, 1],
            dec_blocks: vec![1, 1],
            middle_blocks: 1,
            ..ModelConfig::paper_scale()
        };
        let mut model = build_model(&cfg, Variant::Full, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        *model.params_mut() = perturb_params(model.params(), 0.05, &mut rng);
        let x = Tensor::uniform(&[3, 32, 64], 0.0, 1.0, &mut rng);
        let g = crate::graph::Graph::inference();
        let p = model.params().bind(&g);
        let a = model.forward_graph(&p, g.leaf(x.clone()))?;
        let padded = g.leaf(x).reflect_pad(0, 0)?;
        let b = model.forward_graph(&p, padded)?;
        let d = a.value().max_abs_diff(&b.value())?;
        Ok((d, d == 0.0, "32×64 input, pad multiple 32".into()))
    });
    r.run(Scope::Structure, "attention_locality", 0.0, || {
        let d = attention_locality_check(6, &WINDOWS, seed, true)?;
        Ok((d, d == 0.0, "delta depthwise kernels, outside zeroed".into()))
    });
    r.below(Scope::Structure, "spatial_attention_oracle", 1e-5, || {
        spatial_attention_oracle_check(4, seed)
    });

    let cfg = TrainConfig::default();
    for (iter, want) in [(0u64, 1.0e-4), (100_000, 5.0e-5), (200_000, 2.5e-5), (50_000, (1e-4 + 1e-7) / 2.0)] {
        r.below(Scope::Schedule, &format!("lr@{iter}"), 1e-12, || {
            Ok((cosine_restart_lr(iter, &cfg)? - want).abs())
        });
    }

    r.below(Scope::Metrics, "psnr_20db", 1e-9, || {
        let a = Image::from_fn(16, 16, |c, y, x| 0.2 + 0.05 * ((c + y + x) % 10) as f64);
        let b = Image::new(a.tensor().map(|v| v + 0.1))?;
        Ok((psnr(&a, &b)? - 20.0).abs())
    });
    r.below(Scope::Metrics, "ssim_oracle_32x32", 1e-6, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let a = Image::new(Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng))?;
        let noise = Tensor::uniform(&[3, 32, 32], -0.2, 0.2, &mut rng);
        let b = Image::new(a.tensor().zip_map(&noise, |p, q| (p + q).clamp(0.0, 1.0))?)?;
        Ok((ssim(&a, &b)? - ssim_oracle(&a, &b)).abs())
    });
    r.below(Scope::Metrics, "report_means", 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
        let pairs: Vec<_> = (0..2)
            .map(|i| {
                let t = Image::new(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng))?;
                let b = Image::new(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng))?;
                Ok(crate::data::EvalPair {
                    name: format!("{i}"),
                    blended: b,
                    transmission: t,
                })
            })
            .collect::<Result<_>>()?;
        let rep = evaluate_pairs("toy", &pairs, |i| Ok(i.clone()))?;
        let mut worst: f64 = 0.0;
        let p: f64 = pairs.iter().map(|p| psnr(&p.blended, &p.transmission).unwrap()).sum::<f64>() / 2.0;
        let s: f64 = pairs.iter().map(|p| ssim(&p.blended, &p.transmission).unwrap()).sum::<f64>() / 2.0;
        worst = worst.max((rep.mean_psnr - p).abs()).max((rep.mean_ssim - s).abs());
        Ok(worst)
    });

    let passed = r.checks.iter().all(|c| c.passed);
    SuiteReport {
        scope: opts.scope,
        passed,
        checks: r.checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_scope_runs_only_schedule_checks() {
        let rep = run_suite(&SuiteOptions {
            scope: Scope::Schedule,
            ..Default::default()
        });
        assert_eq!(rep.checks.len(), 4);
        assert!(rep.checks.iter().all(|c| c.scope == Scope::Schedule && c.passed));
        assert!(rep.passed);
    }

    #[test]
    fn fault_injection_fails_gradient_checks() {
        let rep = run_suite(&SuiteOptions {
            scope: Scope::Gradients,
            draws: 1,
            inject_fault: true,
            ..Default::default()
        });
        assert!(!rep.passed);
        assert_eq!(rep.failures().count(), rep.checks.len());
    }

    #[test]
    fn scope_names_parse() {
        for n in Scope::NAMES {
            assert_eq!(n.parse::<Scope>().unwrap().to_string(), n);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
