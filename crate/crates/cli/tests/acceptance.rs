//! The ten acceptance criteria, one verdict line each. Runs as a plain
//! binary so the verdicts print even when everything passes.
//!
//! Criterion 10 needs the SIR² benchmark: point `F2T2HIT_SIR2_DIR` at a
//! directory holding `blended/` and `transmission/`, or at a parent of
//! several such subsets.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use f2t2hit::data::{DataConfig, DatasetSpec, ProceduralSource};
use f2t2hit::metrics::{evaluate_dataset, psnr, ssim, MetricReport};
use f2t2hit::training::{cosine_restart_lr, loss, TrainConfig};
use f2t2hit::verify::suite::{run_suite, Scope, SuiteOptions, SuiteReport};
use f2t2hit::verify::{attention_locality_check, perturb_params};
use f2t2hit::{build_model, checkpoint, count_params, Graph, Image, ModelConfig, Tensor, Variant};
use f2t2hit_cli::config::{load_run_config, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_path() -> PathBuf {
    repo_root().join("configs/desk.json")
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng)).unwrap()
}

fn suite(scope: Scope) -> SuiteReport {
    run_suite(&SuiteOptions {
        scope,
        ..Default::default()
    })
}

fn summarize(rep: &SuiteReport) -> String {
    let failed: Vec<_> = rep.failures().map(|c| format!("{} ({:.3e})", c.name, c.value)).collect();
    if failed.is_empty() {
        let worst = rep.checks.iter().map(|c| c.value).fold(0.0, f64::max);
        format!("{} checks, worst value {worst:.3e}", rep.checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    }
}

fn f2t2hit(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_f2t2hit"))
        .args(args)
        .env_remove("F2T2HIT_SEED")
        .output()
        ?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`f2t2hit {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
        .into())
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let rep = suite(Scope::Gradients);
    let secs = t.elapsed().as_secs_f64();
    let blocks = ["naf_block", "hit_block", "f2t2_block", "fft_layer", "spatial_ffn", "channel_ffn"];
    let covered = blocks.iter().all(|b| {
        rep.checks.iter().filter(|c| c.name.starts_with(&format!("grad/{b}#"))).count() >= 3
    });
    let detail = format!("{}; {secs:.1}s", summarize(&rep));
    verdict(rep.passed && covered && secs < 300.0, detail)
}

fn spectral() -> Verdict {
    let rep = suite(Scope::Spectral);
    let odd = rep.checks.iter().any(|c| c.name.contains("17x13"));
    verdict(rep.passed && odd, summarize(&rep))
}

fn structure() -> Verdict {
    let rep = suite(Scope::Structure);
    let mut ok = rep.passed;
    let mut detail = summarize(&rep);
    // Identity through the shipped binary: init checkpoint, infer, compare bytes.
    let run = || -> Result<bool> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("x.png");
        random_image(70, 45, 3).save_png(&input)?;
        let want = std::fs::read(&input)?;
        let mut all = true;
        for v in Variant::ALL {
            let out = dir.path().join(v.name());
            f2t2hit(&[
                "train", "--config", s(&desk_path()), "--init-only", "--output_dir", s(&out), "--variant", v.name(),
            ])?;
            let ckpt = out.join("checkpoint_00000000.safetensors");
            let res = out.join("res");
            f2t2hit(&["infer", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&res)])?;
            let got = Image::load(&res.join("x_dereflected.png"))?.to_rgb8();
            all &= got == Image::load(&input)?.to_rgb8() && !want.is_empty();
        }
        Ok(all)
    };
    match run() {
        Ok(same) => {
            ok &= same;
            detail.push_str(if same { "; infer identity exact" } else { "; infer identity differs" });
        }
        Err(e) => {
            ok = false;
            detail.push_str(&format!("; infer: {e}"));
        }
    }
    verdict(ok, detail)
}

fn schedule() -> Verdict {
    let cfg = TrainConfig::default();
    // Written out independently of the library formula.
    let closed = |iter: u64| {
        let (start, w) = match iter {
            0..=99_999 => (0, 1.0),
            100_000..=199_999 => (100_000, 0.5),
            _ => (200_000, 0.25),
        };
        let t = (iter - start) as f64 / 100_000.0;
        1e-7 + (w * 1e-4 - 1e-7) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    };
    let mut worst: f64 = 0.0;
    for (iter, want) in [(0, 1.0e-4), (100_000, 5.0e-5), (200_000, 2.5e-5)] {
        match cosine_restart_lr(iter, &cfg) {
            Ok(v) => worst = worst.max((v - want).abs()),
            Err(e) => return Verdict::Fail(e.to_string()),
        }
    }
    let anchors = worst;
    for iter in [25_000, 50_000, 75_000, 150_000, 250_000, 123_457, 299_999] {
        match cosine_restart_lr(iter, &cfg) {
            Ok(v) => worst = worst.max((v - closed(iter)).abs()),
            Err(e) => return Verdict::Fail(e.to_string()),
        }
    }
    verdict(worst <= 1e-12, format!("anchors off by {anchors:.1e}, worst {worst:.1e}"))
}

fn ablation() -> Verdict {
    let run = || -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for (label, cfg) in [("paper_scale", ModelConfig::paper_scale()), ("desk", ModelConfig::desk())] {
            let counts: Vec<usize> = Variant::ALL
                .iter()
                .map(|&v| Ok(count_params(&build_model(&cfg, v, 0)?)))
                .collect::<Result<_>>()?;
            ok &= counts.windows(2).all(|w| w[0] <= w[1]);
            parts.push(format!("{label} {counts:?}"));
        }
        let x = random_image(64, 64, 1);
        let y = random_image(64, 64, 2);
        for cfg in [ModelConfig::paper_scale(), ModelConfig::desk()] {
            for v in Variant::ALL {
                let mut m = build_model(&cfg, v, 5)?;
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                *m.params_mut() = perturb_params(m.params(), 0.02, &mut rng);
                let g = Graph::new();
                let p = m.params().bind(&g);
                let out = m.forward_graph(&p, g.leaf(x.tensor().clone()))?;
                let l = out.sub(g.leaf(y.tensor().clone()))?.abs().mean();
                let grads = p.gradients(&g.backward(l));
                ok &= l.value().is_finite() && grads.all_finite() && grads.len() == m.params().len();
            }
        }
        parts.push("forward/backward finite on 3×64×64".into());
        Ok((ok, parts.join("; ")))
    };
    match run() {
        Ok((ok, d)) => verdict(ok, d),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn metrics_oracles() -> Verdict {
    let rep = suite(Scope::Metrics);
    let mut ok = rep.passed;
    let mut detail = summarize(&rep);
    let run = || -> Result<f64> {
        let dir = tempfile::tempdir()?;
        let mut pairs = Vec::new();
        for sub in ["blended", "transmission"] {
            std::fs::create_dir_all(dir.path().join(sub))?;
        }
        for i in 0..3 {
            let name = format!("{i}.png");
            random_image(40, 36, 20 + i).save_png(&dir.path().join("blended").join(&name))?;
            random_image(40, 36, 30 + i).save_png(&dir.path().join("transmission").join(&name))?;
            pairs.push((
                Image::load(&dir.path().join("blended").join(&name))?,
                Image::load(&dir.path().join("transmission").join(&name))?,
            ));
        }
        let model = build_model(&ModelConfig::desk(), Variant::Full, 0)?;
        let rep = evaluate_dataset(&model, &DatasetSpec::new(dir.path()))?;
        let n = pairs.len() as f64;
        let mut p = 0.0;
        let mut q = 0.0;
        for (b, t) in &pairs {
            p += psnr(b, t)? / n;
            q += ssim(b, t)? / n;
        }
        Ok((rep.mean_psnr - p).abs().max((rep.mean_ssim - q).abs()))
    };
    match run() {
        Ok(d) => {
            ok &= d < 1e-9;
            detail.push_str(&format!("; evaluate_dataset vs hand average {d:.1e}"));
        }
        Err(e) => {
            ok = false;
            detail.push_str(&format!("; evaluate_dataset: {e}"));
        }
    }
    verdict(ok, detail)
}

fn locality() -> Verdict {
    let run = || -> Result<(f64, f64)> {
        let mut worst: f64 = 0.0;
        for (c, seed) in [(6, 0), (8, 1), (12, 2)] {
            worst = worst.max(attention_locality_check(c, &[4, 8, 16], seed, true)?);
        }
        let control = attention_locality_check(6, &[4, 8, 16], 0, false)?;
        Ok((worst, control))
    };
    match run() {
        Ok((d, control)) => verdict(
            d == 0.0 && control > 0.0,
            format!("max diff {d:e} with delta kernels; {control:.2e} with 3×3 kernels"),
        ),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

struct DeskRuns {
    a: PathBuf,
    b: PathBuf,
    resumed: PathBuf,
    config: RunConfig,
    seconds: f64,
}

fn desk_runs(root: &Path) -> Result<DeskRuns> {
    let config = load_run_config(Some(&desk_path()), &[], None)?;
    let (a, b, resumed) = (root.join("a"), root.join("b"), root.join("resumed"));
    let t = Instant::now();
    f2t2hit(&["train", "--config", s(&desk_path()), "--output_dir", s(&a)])?;
    let seconds = t.elapsed().as_secs_f64();
    f2t2hit(&["train", "--config", s(&desk_path()), "--output_dir", s(&b)])?;
    // Interrupted after the first checkpoint, then resumed in a fresh directory.
    let mid = format!("checkpoint_{:08}.safetensors", config.train.checkpoint_every);
    std::fs::create_dir_all(&resumed)?;
    std::fs::copy(a.join(&mid), resumed.join(&mid))?;
    std::fs::copy(a.join("loss.csv"), resumed.join("loss.csv"))?;
    f2t2hit(&[
        "train", "--config", s(&desk_path()), "--output_dir", s(&resumed), "--resume", s(&resumed.join(&mid)),
    ])?;
    Ok(DeskRuns {
        a,
        b,
        resumed,
        config,
        seconds,
    })
}

fn final_checkpoint(runs: &DeskRuns, dir: &Path) -> PathBuf {
    dir.join(format!("checkpoint_{:08}.safetensors", runs.config.train.total_iters))
}

fn learning_signal(runs: &DeskRuns) -> Verdict {
    let run = || -> Result<(bool, String)> {
        let cfg = &runs.config;
        let DataConfig::Procedural {
            count,
            height,
            width,
            beta,
            sigma,
        } = cfg.data.clone()
        else {
            return Ok((false, "desk preset is not procedural".into()));
        };
        let source = ProceduralSource {
            count,
            height,
            width,
            seed: cfg.train.seed,
            beta,
            sigma,
        };
        let model = checkpoint::load_model(&final_checkpoint(runs, &runs.a))?;
        let (mut mae, mut min_gain, mut mean_gain) = (0.0, f64::INFINITY, 0.0);
        for i in 0..count {
            let tr = source.triple(i)?;
            let pred = model.infer(&tr.blended)?;
            mae += loss(&pred, &tr.transmission)? / count as f64;
            let gain = psnr(&pred, &tr.transmission)? - psnr(&tr.blended, &tr.transmission)?;
            min_gain = min_gain.min(gain);
            mean_gain += gain / count as f64;
        }
        let iters = cfg.train.total_iters;
        let ok = mae < 0.02 && min_gain >= 3.0 && iters <= 2000 && runs.seconds < 900.0;
        Ok((
            ok,
            format!(
                "{count} triples, {iters} iterations: MAE {mae:.4}, PSNR gain mean {mean_gain:.2} dB (min {min_gain:.2}), {:.0}s",
                runs.seconds
            ),
        ))
    };
    match run() {
        Ok((ok, d)) => verdict(ok, d),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn reproducibility(runs: &DeskRuns) -> Verdict {
    let run = || -> Result<(bool, String)> {
        let mut same_runs = true;
        let mut n = 0;
        for entry in std::fs::read_dir(&runs.a)? {
            let name = entry?.file_name();
            if name.to_string_lossy().ends_with(".safetensors") {
                same_runs &= std::fs::read(runs.a.join(&name))? == std::fs::read(runs.b.join(&name))?;
                n += 1;
            }
        }
        let end_a = std::fs::read(final_checkpoint(runs, &runs.a))?;
        let end_r = std::fs::read(final_checkpoint(runs, &runs.resumed))?;
        let curve_a = std::fs::read_to_string(runs.a.join("loss.csv"))?;
        let curve_r = std::fs::read_to_string(runs.resumed.join("loss.csv"))?;
        let resumed = end_a == end_r && curve_a == curve_r;
        Ok((
            same_runs && resumed && n >= 2,
            format!(
                "{n} checkpoints byte-identical across runs: {same_runs}; resumed run matches loss curve and final checkpoint: {resumed}"
            ),
        ))
    };
    match run() {
        Ok((ok, d)) => verdict(ok, d),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn subsets(root: &Path) -> Vec<PathBuf> {
    if root.join("blended").is_dir() {
        return vec![root.to_path_buf()];
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.join("blended").is_dir())
        .collect();
    dirs.sort();
    dirs
}

fn benchmark() -> Verdict {
    let Some(root) = std::env::var_os("F2T2HIT_SIR2_DIR") else {
        return Verdict::Skip("F2T2HIT_SIR2_DIR not set".into());
    };
    let run = || -> Result<(bool, String)> {
        let model = build_model(&ModelConfig::desk(), Variant::Full, 0)?;
        let mut images = Vec::new();
        for dir in subsets(Path::new(&root)) {
            images.extend(evaluate_dataset(&model, &DatasetSpec::new(dir))?.images);
        }
        if images.is_empty() {
            return Ok((false, "no blended/transmission pairs found".into()));
        }
        let rep = MetricReport::from_images("SIR²", images)?;
        let ok = (rep.mean_psnr - 22.76).abs() <= 0.3 && (rep.mean_ssim - 0.885).abs() <= 0.01;
        Ok((ok, format!("{} images: PSNR {:.2}, SSIM {:.3}", rep.count, rep.mean_psnr, rep.mean_ssim)))
    };
    match run() {
        Ok((ok, d)) => verdict(ok, d),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn main() {
    // `cargo test -- --list` and filters are meaningless here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    let mut report = |id: usize, title: &str, v: Verdict| {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} {title}: {detail}");
    };
    report(1, "gradient correctness", gradients());
    report(2, "spectral sanity", spectral());
    report(3, "structural exactness", structure());
    report(4, "schedule fidelity", schedule());
    report(5, "ablation construction", ablation());
    let scratch = tempfile::tempdir().expect("temp dir");
    let runs = desk_runs(scratch.path());
    match &runs {
        Ok(r) => report(6, "desk learning signal", learning_signal(r)),
        Err(e) => report(6, "desk learning signal", Verdict::Fail(e.to_string())),
    }
    report(7, "metric oracles", metrics_oracles());
    report(8, "attention locality", locality());
    match &runs {
        Ok(r) => report(9, "reproducibility", reproducibility(r)),
        Err(e) => report(9, "reproducibility", Verdict::Fail(e.to_string())),
    }
    report(10, "benchmark input row", benchmark());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria met");
}
