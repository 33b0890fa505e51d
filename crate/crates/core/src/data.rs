//! Reflection triples: synthesis, paired folders, cropping and augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::image::Image;
use crate::ops::reflect_index;

/// Blended image `I`, transmission `T` and reflection `R`, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionTriple {
    pub blended: Image,
    pub transmission: Image,
    pub reflection: Image,
}

impl ReflectionTriple {
    pub fn new(blended: Image, transmission: Image, reflection: Image) -> Result<Self> {
        if blended.dims() != transmission.dims() || blended.dims() != reflection.dims() {
            return Err(shape_err!(
                "triple sizes differ: I {:?}, T {:?}, R {:?}",
                blended.dims(),
                transmission.dims(),
                reflection.dims()
            ));
        }
        Ok(ReflectionTriple {
            blended,
            transmission,
            reflection,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.blended.dims()
    }

    fn map(&self, f: impl Fn(&Image) -> Image) -> ReflectionTriple {
        ReflectionTriple {
            blended: f(&self.blended),
            transmission: f(&self.transmission),
            reflection: f(&self.reflection),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub beta: f64,
    pub sigma: f64,
    pub rng_seed: u64,
}

pub const MAX_SIGMA: f64 = 5.0;

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config_err!("beta {} outside [0, 1]", self.beta));
        }
        if !(0.0..=MAX_SIGMA).contains(&self.sigma) {
            return Err(config_err!("sigma {} outside [0, {MAX_SIGMA}]", self.sigma));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`; `σ = 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let taps = gaussian_kernel(sigma);
    if taps.len() == 1 {
        return img.clone();
    }
    let r = (taps.len() / 2) as isize;
    let (h, w) = img.dims();
    let rows = Image::from_fn(h, w, |c, y, x| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * img.at(c, y, reflect_index(x as isize + i as isize - r, w)))
            .sum()
    });
    Image::from_fn(h, w, |c, y, x| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * rows.at(c, reflect_index(y as isize + i as isize - r, h), x))
            .sum()
    })
}

/// `I = clip(T + β·blur_σ(R), 0, 1)`.
pub fn synthesize_pair(t: &Image, r: &Image, p: &SynthesisParams) -> Result<ReflectionTriple> {
    p.validate()?;
    if t.dims() != r.dims() {
        return Err(shape_err!("T is {:?} but R is {:?}", t.dims(), r.dims()));
    }
    let blurred = gaussian_blur(r, p.sigma);
    let blended = t
        .tensor()
        .zip_map(blurred.tensor(), |a, b| (a + p.beta * b).clamp(0.0, 1.0))?;
    ReflectionTriple::new(Image::new(blended)?, t.clone(), r.clone())
}

/// Aligned `size×size` crop at a uniform offset. Smaller images are first
/// mirror-extended to `size`.
pub fn random_crop(triple: &ReflectionTriple, size: usize, rng: &mut impl Rng) -> ReflectionTriple {
    let (h, w) = triple.dims();
    let padded;
    let src = if h < size || w < size {
        padded = triple.map(|i| i.reflect_pad_to(size, size));
        &padded
    } else {
        triple
    };
    let (h, w) = src.dims();
    let y = rng.gen_range(0..=h - size);
    let x = rng.gen_range(0..=w - size);
    src.map(|i| i.crop(y, x, size, size).expect("offset drawn inside the image"))
}

/// A flip and a number of quarter turns, applied to all three images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: usize,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        quarter_turns: 0,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Augmentation {
            flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let img = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        img.rot90(self.quarter_turns)
    }
}

pub fn augment(triple: &ReflectionTriple, rng: &mut impl Rng) -> ReflectionTriple {
    let a = Augmentation::draw(rng);
    triple.map(|i| a.apply(i))
}

/// A folder with `blended/` and `transmission/` holding same-named images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    #[serde(default)]
    pub name: Option<String>,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            root: root.into(),
            name: None,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.root.display().to_string())
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub name: String,
    pub blended: Image,
    pub transmission: Image,
}

fn is_image_file(path: &Path) -> bool {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    path.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg")
}

/// Image files of `dir` keyed by file name.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image_file(&path) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Matched `(name, blended, transmission)` paths in file-name order.
pub fn list_eval_pairs(spec: &DatasetSpec) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let blended = list_images(&spec.root.join("blended"))?;
    let transmission = list_images(&spec.root.join("transmission"))?;
    let orphans: Vec<String> = blended
        .keys()
        .filter(|k| !transmission.contains_key(*k))
        .map(|k| format!("blended/{k}"))
        .chain(
            transmission
                .keys()
                .filter(|k| !blended.contains_key(*k))
                .map(|k| format!("transmission/{k}")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Validation(format!(
            "files without a counterpart in {}: {}",
            spec.root.display(),
            orphans.join(", ")
        )));
    }
    if blended.is_empty() {
        return Err(Error::Validation(format!("no image pairs under {}", spec.root.display())));
    }
    Ok(blended
        .into_iter()
        .map(|(name, b)| {
            let t = transmission[&name].clone();
            (name, b, t)
        })
        .collect())
}

pub fn load_eval_pairs(spec: &DatasetSpec) -> Result<Vec<EvalPair>> {
    list_eval_pairs(spec)?
        .into_iter()
        .map(|(name, b, t)| {
            let blended = Image::load(&b)?;
            let transmission = Image::load(&t)?;
            if blended.dims() != transmission.dims() {
                return Err(Error::Validation(format!(
                    "pair `{name}`: blended is {:?} but transmission is {:?}",
                    blended.dims(),
                    transmission.dims()
                )));
            }
            Ok(EvalPair {
                name,
                blended,
                transmission,
            })
        })
        .collect()
}

/// Independent generator for sample `index` of a run seeded with `seed`, so
/// the draw sequence does not depend on who asks or in what order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Something that yields training triples.
pub trait DataSource {
    /// Number of distinct base samples.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Triple for `index` (taken modulo `len`); `rng` drives any randomness.
    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<ReflectionTriple>;
}

/// Fixed triples held in memory.
#[derive(Clone, Debug)]
pub struct InMemorySource {
    pub triples: Vec<ReflectionTriple>,
}

impl DataSource for InMemorySource {
    fn len(&self) -> usize {
        self.triples.len()
    }

    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<ReflectionTriple> {
        if self.triples.is_empty() {
            return Err(Error::Argument("in-memory source is empty".into()));
        }
        Ok(self.triples[index % self.triples.len()].clone())
    }
}

/// Smooth random layers: a colour ramp plus a few low-frequency waves and a
/// soft-edged rectangle. `detail` scales the wave frequencies.
pub fn procedural_layer(h: usize, w: usize, detail: f64, rng: &mut impl Rng) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.55));
    let ramp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0..3),
                rng.gen_range(0.06..0.18),
                rng.gen_range(-1.0..1.0) * detail * 0.25,
                rng.gen_range(-1.0..1.0) * detail * 0.25,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let (ry, rx) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6));
    let (rh, rw) = (rng.gen_range(0.2..0.4), rng.gen_range(0.2..0.4));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
    Image::from_fn(h, w, |c, y, x| {
        let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
        let mut val = base[c] + ramp[c] * (u + v - 1.0);
        for &(wc, amp, fy, fx, ph) in &waves {
            if wc == c {
                val += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
            }
        }
        let inside = |a: f64, lo: f64, len: f64| {
            let d = (a - lo).min(lo + len - a);
            (d * 20.0).clamp(0.0, 1.0)
        };
        val += tint[c] * inside(u, ry, rh) * inside(v, rx, rw);
        val.clamp(0.0, 1.0)
    })
}

/// Endless synthetic triples built from [`procedural_layer`] pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralSource {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub beta: (f64, f64),
    pub sigma: (f64, f64),
}

impl ProceduralSource {
    pub fn triple(&self, index: usize) -> Result<ReflectionTriple> {
        let mut rng = sample_rng(self.seed ^ 0x5eed_da7a, (index % self.count.max(1)) as u64);
        let t = procedural_layer(self.height, self.width, 1.0, &mut rng);
        let r = procedural_layer(self.height, self.width, 2.5, &mut rng);
        let p = SynthesisParams {
            beta: draw_in(self.beta, &mut rng),
            sigma: draw_in(self.sigma, &mut rng),
            rng_seed: self.seed,
        };
        synthesize_pair(&t, &r, &p)
    }

    pub fn materialize(&self) -> Result<InMemorySource> {
        let triples = (0..self.count).map(|i| self.triple(i)).collect::<Result<_>>()?;
        Ok(InMemorySource { triples })
    }
}

fn draw_in((lo, hi): (f64, f64), rng: &mut impl Rng) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl DataSource for ProceduralSource {
    fn len(&self) -> usize {
        self.count
    }

    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<ReflectionTriple> {
        if self.count == 0 {
            return Err(Error::Argument("procedural source has count 0".into()));
        }
        self.triple(index)
    }
}

/// Real `(I, T)` pairs from a [`DatasetSpec`] folder. The reflection slot
/// holds the positive residual `max(I − T, 0)`.
pub struct PairedDirSource {
    pairs: Vec<EvalPair>,
}

impl PairedDirSource {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        Ok(PairedDirSource {
            pairs: load_eval_pairs(spec)?,
        })
    }
}

impl DataSource for PairedDirSource {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn sample(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<ReflectionTriple> {
        let p = &self.pairs[index % self.pairs.len()];
        let r = p
            .blended
            .tensor()
            .zip_map(p.transmission.tensor(), |i, t| (i - t).max(0.0))?;
        ReflectionTriple::new(p.blended.clone(), p.transmission.clone(), Image::new(r)?)
    }
}

/// Blends transmission images with randomly chosen reflection images.
pub struct SynthesizeDirSource {
    transmissions: Vec<Image>,
    reflections: Vec<Image>,
    beta: (f64, f64),
    sigma: (f64, f64),
}

impl SynthesizeDirSource {
    pub fn open(
        transmission_dir: &Path,
        reflection_dir: &Path,
        beta: (f64, f64),
        sigma: (f64, f64),
    ) -> Result<Self> {
        let load = |dir: &Path| -> Result<Vec<Image>> {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::Validation(format!("no images in {}", dir.display())));
            }
            files.values().map(|p| Image::load(p)).collect()
        };
        Ok(SynthesizeDirSource {
            transmissions: load(transmission_dir)?,
            reflections: load(reflection_dir)?,
            beta,
            sigma,
        })
    }
}

impl DataSource for SynthesizeDirSource {
    fn len(&self) -> usize {
        self.transmissions.len()
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<ReflectionTriple> {
        let t = &self.transmissions[index % self.transmissions.len()];
        let r = &self.reflections[rng.gen_range(0..self.reflections.len())];
        // Fit R to T: mirror-extend if small, then a random aligned window.
        let (h, w) = t.dims();
        let r = r.reflect_pad_to(h, w);
        let (y, x) = (rng.gen_range(0..=r.height() - h), rng.gen_range(0..=r.width() - w));
        let r = r.crop(y, x, h, w)?;
        let p = SynthesisParams {
            beta: draw_in(self.beta, rng),
            sigma: draw_in(self.sigma, rng),
            rng_seed: 0,
        };
        synthesize_pair(t, &r, &p)
    }
}

/// Serializable choice of training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Procedural {
        count: usize,
        height: usize,
        width: usize,
        #[serde(default = "default_beta")]
        beta: (f64, f64),
        #[serde(default = "default_sigma")]
        sigma: (f64, f64),
    },
    Paired {
        root: PathBuf,
    },
    Synthesize {
        transmission_dir: PathBuf,
        reflection_dir: PathBuf,
        #[serde(default = "default_beta")]
        beta: (f64, f64),
        #[serde(default = "default_sigma")]
        sigma: (f64, f64),
    },
}

fn default_beta() -> (f64, f64) {
    (0.2, 0.6)
}

fn default_sigma() -> (f64, f64) {
    (0.0, 3.0)
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Procedural {
            count: 4,
            height: 64,
            width: 64,
            beta: default_beta(),
            sigma: default_sigma(),
        }
    }
}

impl DataConfig {
    pub fn open(&self, seed: u64) -> Result<Box<dyn DataSource>> {
        Ok(match self {
            DataConfig::Procedural {
                count,
                height,
                width,
                beta,
                sigma,
            } => {
                let src = ProceduralSource {
                    count: *count,
                    height: *height,
                    width: *width,
                    seed,
                    beta: *beta,
                    sigma: *sigma,
                };
                Box::new(src.materialize()?)
            }
            DataConfig::Paired { root } => Box::new(PairedDirSource::open(&DatasetSpec::new(root))?),
            DataConfig::Synthesize {
                transmission_dir,
                reflection_dir,
                beta,
                sigma,
            } => Box::new(SynthesizeDirSource::open(transmission_dir, reflection_dir, *beta, *sigma)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_with_radius_three_sigma() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
        assert_eq!(gaussian_kernel(0.3).len(), 3);
    }

    #[test]
    fn beta_outside_range_is_rejected() {
        let t = Image::filled(4, 4, 0.5);
        let p = SynthesisParams {
            beta: 1.5,
            sigma: 0.0,
            rng_seed: 0,
        };
        assert!(matches!(synthesize_pair(&t, &t, &p), Err(Error::Config(_))));
    }

    #[test]
    fn procedural_is_deterministic_and_in_range() {
        let src = ProceduralSource {
            count: 3,
            height: 16,
            width: 20,
            seed: 4,
            beta: (0.2, 0.6),
            sigma: (0.0, 2.0),
        };
        let a = src.triple(1).unwrap();
        assert_eq!(a, src.triple(4).unwrap());
        assert_ne!(a, src.triple(2).unwrap());
        for img in [&a.blended, &a.transmission, &a.reflection] {
            assert!(img.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
