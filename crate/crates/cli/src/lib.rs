//! Command implementations behind the `f2t2hit` binary. Each returns a
//! process exit code: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use f2t2hit::checkpoint::{load_model, save_checkpoint};
use f2t2hit::data::{list_images, sample_rng, synthesize_pair, DatasetSpec, SynthesisParams};
use f2t2hit::metrics::evaluate_dataset;
use f2t2hit::training::{checkpoint_path, fit, FitOptions, TrainState};
use f2t2hit::verify::suite::{run_suite, Scope, SuiteOptions};
use f2t2hit::{Error, Image, Result};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_run_config, parse_overrides, RunConfig, SEED_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "f2t2hit", version, about = "Single-image reflection removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a `blended/` + `transmission/` folder.
    Eval(EvalArgs),
    /// Remove reflections from one image or every image in a folder.
    Infer(InferArgs),
    /// Blend transmission and reflection folders into training triples.
    Synthesize(SynthesizeArgs),
    /// Run gradient, spectral, structural, schedule and metric checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write the freshly initialized model as a checkpoint and stop.
    #[arg(long)]
    pub init_only: bool,
    /// Dotted overrides such as `--train.total_iters 10`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for `report.csv` and `report.json`.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a folder of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub transmission: PathBuf,
    #[arg(long)]
    pub reflection: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    /// Draw β uniformly from `[beta, beta_max]` per pair.
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    /// Draw σ uniformly from `[sigma, sigma_max]` per pair.
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Defaults to `F2T2HIT_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = Scope::NAMES)]
    pub scope: String,
    #[arg(long, default_value_t = 3)]
    pub draws: u64,
    /// Defaults to `F2T2HIT_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Corrupt one analytic gradient entry per check (tests the checker).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => a.lift_flags().and_then(|a| cmd_train(&a)),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Bad input from the user is a usage error; everything else is runtime.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Json(_) | Error::Validation(_) => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    match (explicit, env_seed()) {
        (Some(s), _) => Ok(s),
        (None, Some(raw)) => raw
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("{SEED_ENV}=`{raw}` is not an unsigned integer"))),
        (None, None) => Ok(0),
    }
}

fn echo(value: &impl Serialize) {
    println!(
        "effective config:\n{}",
        serde_json::to_string_pretty(value).expect("config serializes")
    );
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl TrainArgs {
    /// Clap hands everything after the first override to `overrides`, so
    /// the train flags may still be in there.
    fn lift_flags(mut self) -> Result<Self> {
        let mut rest = Vec::new();
        let mut it = std::mem::take(&mut self.overrides).into_iter();
        while let Some(arg) = it.next() {
            let (flag, inline) = match arg.split_once('=') {
                Some((f, v)) => (f.to_string(), Some(v.to_string())),
                None => (arg.clone(), None),
            };
            let mut value = |name: &str| {
                inline
                    .clone()
                    .or_else(|| it.next())
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Argument(format!("`{name}` needs a value")))
            };
            match flag.as_str() {
                "--config" => self.config = Some(value("--config")?),
                "--resume" => self.resume = Some(value("--resume")?),
                "--init-only" if inline.is_none() => self.init_only = true,
                _ => rest.push(arg),
            }
        }
        self.overrides = rest;
        Ok(self)
    }
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let overrides = parse_overrides(&a.overrides)?;
    load_run_config(a.config.as_deref(), &overrides, env_seed().as_deref())
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = resolve_train_config(a)?;
    echo(&cfg);
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("effective_config.json"), &serde_json::to_string_pretty(&cfg)?)?;

    if a.init_only {
        let state = TrainState::new(&cfg.train, &cfg.model, cfg.variant)?;
        let path = checkpoint_path(out, 0);
        save_checkpoint(&state, &path)?;
        println!("wrote {}", path.display());
        return Ok(EXIT_OK);
    }
    if let Some(r) = &a.resume {
        require(r, "checkpoint")?;
    }
    let source = cfg.data.open(cfg.train.seed)?;
    let opts = FitOptions {
        out_dir: Some(out.clone()),
        resume: a.resume.clone(),
    };
    let res = fit(&cfg.train, &cfg.model, cfg.variant, source.as_ref(), &opts)?;
    match res.losses.last() {
        Some(last) => println!(
            "trained to iteration {} (final loss {:.6}, lr {:.3e}); outputs in {}",
            res.state.iteration,
            last.loss,
            last.lr,
            out.display()
        ),
        None => println!("nothing to do: total_iters = {}", cfg.train.total_iters),
    }
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.dataset, "dataset")?;
    let model = load_model(&a.checkpoint)?;
    echo(&json!({
        "checkpoint": a.checkpoint,
        "dataset": a.dataset,
        "out": a.out,
        "variant": model.variant(),
        "model": model.config(),
    }));
    let report = evaluate_dataset(&model, &DatasetSpec::new(&a.dataset))?;
    report.write(&a.out, "report")?;
    println!(
        "{}: {} pairs, PSNR {:.4} dB, SSIM {:.4}",
        report.dataset, report.count, report.mean_psnr, report.mean_ssim
    );
    Ok(EXIT_OK)
}

fn output_name(input: &Path) -> String {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}_dereflected.png")
}

pub fn cmd_infer(a: &InferArgs) -> Result<i32> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.input, "input")?;
    let model = load_model(&a.checkpoint)?;
    echo(&json!({
        "checkpoint": a.checkpoint,
        "input": a.input,
        "output": a.output,
        "variant": model.variant(),
        "model": model.config(),
    }));
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        list_images(&a.input)?.into_values().collect()
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Argument(format!("no images in {}", a.input.display())));
    }
    std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut written = 0;
    for path in &inputs {
        let result = Image::load(path).and_then(|img| {
            let out = a.output.join(output_name(path));
            model.infer(&img)?.save_png(&out)?;
            Ok(out)
        });
        match result {
            Ok(out) => {
                println!("{} -> {}", path.display(), out.display());
                written += 1;
            }
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    println!("{written} of {} images written", inputs.len());
    Ok(if written == 0 { EXIT_RUNTIME } else { EXIT_OK })
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    transmission_source: String,
    reflection_source: String,
    beta: f64,
    sigma: f64,
    seed: u64,
}

pub fn cmd_synthesize(a: &SynthesizeArgs) -> Result<i32> {
    require(&a.transmission, "transmission folder")?;
    require(&a.reflection, "reflection folder")?;
    let seed = resolve_seed(a.seed)?;
    let range = |lo: f64, hi: Option<f64>, what: &str| -> Result<(f64, f64)> {
        let hi = hi.unwrap_or(lo);
        if hi < lo {
            return Err(Error::Argument(format!("{what}_max {hi} below {what} {lo}")));
        }
        Ok((lo, hi))
    };
    let beta = range(a.beta, a.beta_max, "beta")?;
    let sigma = range(a.sigma, a.sigma_max, "sigma")?;
    for (v, what) in [(beta, "beta"), (sigma, "sigma")] {
        for x in [v.0, v.1] {
            SynthesisParams {
                beta: if what == "beta" { x } else { 0.0 },
                sigma: if what == "sigma" { x } else { 0.0 },
                rng_seed: seed,
            }
            .validate()?;
        }
    }
    echo(&json!({
        "transmission": a.transmission,
        "reflection": a.reflection,
        "out": a.out,
        "beta": beta,
        "sigma": sigma,
        "seed": seed,
    }));
    let ts = list_images(&a.transmission)?;
    let rs = list_images(&a.reflection)?;
    if ts.is_empty() || rs.is_empty() {
        return Err(Error::Validation("transmission and reflection folders must both hold images".into()));
    }
    for sub in ["blended", "transmission", "reflection"] {
        let d = a.out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Vec::new();
    for (i, ((tname, tpath), (rname, rpath))) in ts.iter().zip(rs.iter()).enumerate() {
        let mut rng = sample_rng(seed, i as u64);
        let draw = |(lo, hi): (f64, f64), rng: &mut rand_chacha::ChaCha8Rng| {
            if hi > lo { rng.gen_range(lo..=hi) } else { lo }
        };
        let p = SynthesisParams {
            beta: draw(beta, &mut rng),
            sigma: draw(sigma, &mut rng),
            rng_seed: seed,
        };
        let t = Image::load(tpath)?;
        let r = Image::load(rpath)?;
        let (h, w) = t.dims();
        let r = r.reflect_pad_to(h, w);
        let (y, x) = (rng.gen_range(0..=r.height() - h), rng.gen_range(0..=r.width() - w));
        let r = r.crop(y, x, h, w)?;
        let triple = synthesize_pair(&t, &r, &p)?;
        let stem = Path::new(tname).file_stem().unwrap().to_string_lossy().into_owned();
        let name = format!("{stem}.png");
        triple.blended.save_png(&a.out.join("blended").join(&name))?;
        triple.transmission.save_png(&a.out.join("transmission").join(&name))?;
        triple.reflection.save_png(&a.out.join("reflection").join(&name))?;
        manifest.push(ManifestEntry {
            name,
            transmission_source: tname.clone(),
            reflection_source: rname.clone(),
            beta: p.beta,
            sigma: p.sigma,
            seed,
        });
    }
    write_text(&a.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} triples to {}", manifest.len(), a.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let opts = SuiteOptions {
        scope: a.scope.parse()?,
        seed: resolve_seed(a.seed)?,
        draws: a.draws,
        inject_fault: a.inject_fault,
    };
    echo(&json!({
        "scope": opts.scope,
        "seed": opts.seed,
        "draws": opts.draws,
        "report": a.report,
    }));
    let report = run_suite(&opts);
    for c in &report.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let extra = if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) };
        println!(
            "{verdict} {:<10} {:<32} value {:.3e} threshold {:.1e}{extra}",
            c.scope.to_string(),
            c.name,
            c.value,
            c.threshold
        );
    }
    let failed = report.failures().count();
    println!("{} checks, {failed} failed", report.checks.len());
    if let Some(path) = &a.report {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_RUNTIME })
}
