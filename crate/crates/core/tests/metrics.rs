use f2t2hit::data::{DatasetSpec, EvalPair};
use f2t2hit::metrics::{evaluate_dataset, evaluate_pairs, psnr, ssim, PSNR_CAP};
use f2t2hit::verify::ssim_oracle;
use f2t2hit::{build_model, Image, ModelConfig, Tensor, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng)).unwrap()
}

fn offset(a: &Image, d: f64) -> Image {
    Image::new(a.tensor().map(|v| v + d)).unwrap()
}

#[test]
fn uniform_tenth_offset_is_twenty_db() {
    let a = Image::from_fn(20, 30, |c, y, x| 0.1 + 0.7 * ((c * 13 + y * 7 + x) % 10) as f64 / 10.0);
    let b = offset(&a, 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_matches_a_direct_loop() {
    let (a, b) = (random_image(17, 23, 1), random_image(17, 23, 2));
    let mut se = 0.0;
    for c in 0..3 {
        for y in 0..17 {
            for x in 0..23 {
                let d = a.at(c, y, x) - b.at(c, y, x);
                se += d * d;
            }
        }
    }
    let expect = 10.0 * (1.0 / (se / (3.0 * 17.0 * 23.0))).log10();
    assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &random_image(17, 22, 2)).is_err());
}

fn fixture_pair() -> (Image, Image) {
    let a = Image::from_fn(32, 32, |c, y, x| {
        0.5 + 0.4 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = Tensor::uniform(&[3, 32, 32], -0.1, 0.1, &mut rng);
    let b = Image::new(a.tensor().zip_map(&noise, |p, q| (p + q).clamp(0.0, 1.0)).unwrap()).unwrap();
    (a, b)
}

#[test]
fn ssim_matches_sliding_window_oracle() {
    let (a, b) = fixture_pair();
    let got = ssim(&a, &b).unwrap();
    let want = ssim_oracle(&a, &b);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got < 1.0 && got > 0.0);
}

#[test]
fn ssim_is_symmetric_and_flip_invariant() {
    let (a, b) = (random_image(24, 30, 5), random_image(24, 30, 6));
    let ab = ssim(&a, &b).unwrap();
    assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
    let flipped = ssim(&a.flip_horizontal(), &b.flip_horizontal()).unwrap();
    assert!((ab - flipped).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psnr_falls_as_noise_grows(seed in 0u64..1000, lo in 0.01f64..0.1, step in 0.01f64..0.1) {
        let base = Image::new(random_image(12, 12, seed).tensor().map(|v| 0.3 + 0.4 * v)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let pattern = Tensor::uniform(&[3, 12, 12], -1.0, 1.0, &mut rng);
        let noisy = |amp: f64| Image::new(base.tensor().zip_map(&pattern, |p, q| p + amp * q).unwrap()).unwrap();
        prop_assert!(psnr(&base, &noisy(lo)).unwrap() > psnr(&base, &noisy(lo + step)).unwrap());
    }

    #[test]
    fn ssim_bounded_and_self_one(seed in 0u64..1000) {
        let (a, b) = (random_image(12, 14, seed), random_image(12, 14, seed + 5000));
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s > -1.0 && s <= 1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn report_means_equal_hand_averages() {
    let (a, b) = fixture_pair();
    let pairs = vec![
        EvalPair { name: "a.png".into(), blended: b.clone(), transmission: a.clone() },
        EvalPair { name: "b.png".into(), blended: offset(&a, 0.05), transmission: a.clone() },
    ];
    let report = evaluate_pairs("toy", &pairs, |i| Ok(i.clone())).unwrap();
    let p = [psnr(&b, &a).unwrap(), psnr(&offset(&a, 0.05), &a).unwrap()];
    let s = [ssim(&b, &a).unwrap(), ssim(&offset(&a, 0.05), &a).unwrap()];
    assert_eq!(report.count, 2);
    assert!((report.mean_psnr - (p[0] + p[1]) / 2.0).abs() < 1e-9);
    assert!((report.mean_ssim - (s[0] + s[1]) / 2.0).abs() < 1e-9);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    let back: f2t2hit::metrics::MetricReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn identity_model_on_identical_pairs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["blended", "transmission"] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    for (i, seed) in [3u64, 4].iter().enumerate() {
        let img = random_image(20, 24, *seed);
        for sub in ["blended", "transmission"] {
            img.save_png(&dir.path().join(sub).join(format!("{i}.png"))).unwrap();
        }
    }
    let model = build_model(&ModelConfig::desk(), Variant::Full, 0).unwrap();
    let report = evaluate_dataset(&model, &DatasetSpec::new(dir.path())).unwrap();
    assert_eq!(report.count, 2);
    assert_eq!(report.mean_psnr, PSNR_CAP);
    assert!((report.mean_ssim - 1.0).abs() < 1e-12);
}
