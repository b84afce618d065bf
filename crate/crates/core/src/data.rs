//! Procedural texture corpus for few-shot base/novel experiments.
//!
//! Each class is a sinusoidal grating with its own spatial frequency
//! (cycles per image) and orientation, drawn from the grid
//! `{2..=8} x {k * π/12 : k in 0..12}`. An image of class `c` is
//!
//! `clip(0.5 + A * sin(2π f (x cos θ + y sin θ) / S + φ_c + j π u) + σ n, 0, 1)`
//!
//! with `x, y` pixel coordinates, `S` the image side, `φ_c` a per-class
//! base phase, `u ~ U(-1, 1)` the phase jitter draw and `n ~ N(0, 1)` pixel
//! noise. Class prompts are `text_len` tokens taken from
//! `sha256("class:" || class_id as u64 LE)`, one byte per token, mod vocab.
//!
//! Random streams: class selection uses stream 0 of the dataset seed; the
//! images of class `c` use stream `c + 1`, so classes can be generated in
//! any order.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HebaError, Result};
use crate::rng::Rng;
use crate::serialize::{read_bytes, read_json, write_bytes, write_json};
use crate::tensor::Tensor;
use crate::Scalar;

pub const FORMAT: &str = "heba-texture-v1";
pub const MIN_FREQ: usize = 2;
pub const MAX_FREQ: usize = 8;
pub const ORIENTATION_STEPS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub amplitude: f64,
    /// Half-width of the phase jitter, as a fraction of π.
    pub phase_jitter: f64,
    pub noise_sigma: f64,
    pub text_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 8,
            images_per_class: 48,
            image_size: 28,
            amplitude: 0.4,
            phase_jitter: 0.25,
            noise_sigma: 0.1,
            text_len: 8,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HebaError::InvalidConfig(m));
        if self.num_classes < 4 {
            return bad(format!("need at least 4 classes, got {}", self.num_classes));
        }
        if self.images_per_class == 0
            || self.image_size == 0
            || self.text_len == 0
            || self.vocab_size == 0
        {
            return bad("dataset sizes must be positive".into());
        }
        if self.vocab_size > 256 {
            return bad(format!("vocab_size {} exceeds 256", self.vocab_size));
        }
        if self.text_len > 32 {
            return bad(format!("text_len {} exceeds 32 hash bytes", self.text_len));
        }
        for (n, v) in [
            ("amplitude", self.amplitude),
            ("phase_jitter", self.phase_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{n} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureClass {
    pub class_id: usize,
    pub frequency: usize,
    /// Orientation grid index; the angle is `orientation_step * π / 12`.
    pub orientation_step: usize,
    pub orientation: f64,
    pub base_phase: f64,
    pub prompt_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: DataConfig,
    pub classes: Vec<TextureClass>,
    pub num_images: usize,
    /// SHA-256 of `images.bin` followed by `labels.bin`.
    pub content_hash: String,
    pub split: SplitConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// `[num_images, 1, S, S]` row-major, grouped by class.
    pub images: Vec<f64>,
    pub labels: Vec<u32>,
}

pub fn prompt_tokens(class_id: usize, text_len: usize, vocab: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(b"class:");
    h.update((class_id as u64).to_le_bytes());
    h.finalize()
        .iter()
        .take(text_len)
        .map(|&b| b as usize % vocab)
        .collect()
}

fn angle_gap(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(ORIENTATION_STEPS - d)
}

/// Picks `n` grid cells. A first pass keeps classes far apart (frequency gap
/// of 2 or orientation gap of 3 steps); the remainder only needs a distinct
/// cell, which already satisfies the grid spacing.
fn select_classes(n: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let mut grid: Vec<(usize, usize)> = (MIN_FREQ..=MAX_FREQ)
        .flat_map(|f| (0..ORIENTATION_STEPS).map(move |o| (f, o)))
        .collect();
    if n > grid.len() {
        return Err(HebaError::InvalidConfig(format!(
            "{n} classes requested but only {} separable (frequency, orientation) cells exist",
            grid.len()
        )));
    }
    rng.shuffle(&mut grid);
    let mut picked: Vec<(usize, usize)> = Vec::with_capacity(n);
    for &(f, o) in &grid {
        if picked.len() == n {
            break;
        }
        if picked
            .iter()
            .all(|&(pf, po)| pf.abs_diff(f) >= 2 || angle_gap(po, o) >= 3)
        {
            picked.push((f, o));
        }
    }
    for &cell in &grid {
        if picked.len() == n {
            break;
        }
        if !picked.contains(&cell) {
            picked.push(cell);
        }
    }
    Ok(picked)
}

fn render(c: &TextureClass, cfg: &DataConfig, rng: &mut Rng, out: &mut Vec<f64>) {
    let s = cfg.image_size as f64;
    let (sin_t, cos_t) = c.orientation.sin_cos();
    let phase = c.base_phase + cfg.phase_jitter * PI * rng.uniform_in(-1.0, 1.0);
    let k = 2.0 * PI * c.frequency as f64 / s;
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let arg = k * (x as f64 * cos_t + y as f64 * sin_t) + phase;
            let v = 0.5 + cfg.amplitude * arg.sin() + cfg.noise_sigma * rng.standard_normal();
            out.push(v.clamp(0.0, 1.0));
        }
    }
}

fn content_hash(images: &[u8], labels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(images);
    h.update(labels);
    hex::encode(h.finalize())
}

fn images_bytes(images: &[f64]) -> Vec<u8> {
    images.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn labels_bytes(labels: &[u32]) -> Vec<u8> {
    labels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let cells = select_classes(cfg.num_classes, &mut Rng::with_stream(cfg.seed, 0))?;
    let mut phase_rng = Rng::with_stream(cfg.seed, u64::MAX);
    let classes: Vec<TextureClass> = cells
        .into_iter()
        .enumerate()
        .map(|(id, (f, o))| TextureClass {
            class_id: id,
            frequency: f,
            orientation_step: o,
            orientation: o as f64 * PI / ORIENTATION_STEPS as f64,
            base_phase: phase_rng.uniform_in(0.0, 2.0 * PI),
            prompt_tokens: prompt_tokens(id, cfg.text_len, cfg.vocab_size),
        })
        .collect();
    let px = cfg.image_size * cfg.image_size;
    let n = cfg.num_classes * cfg.images_per_class;
    let mut images = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for c in &classes {
        let mut rng = Rng::with_stream(cfg.seed, c.class_id as u64 + 1);
        for _ in 0..cfg.images_per_class {
            render(c, cfg, &mut rng, &mut images);
            labels.push(c.class_id as u32);
        }
    }
    let hash = content_hash(&images_bytes(&images), &labels_bytes(&labels));
    Ok(Dataset {
        manifest: DatasetManifest {
            format: FORMAT.into(),
            config: cfg.clone(),
            classes,
            num_images: n,
            content_hash: hash,
            split: SplitConfig::default(),
        },
        images,
        labels,
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn pixels_per_image(&self) -> usize {
        let s = self.manifest.config.image_size;
        s * s
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[index * p..(index + 1) * p]
    }

    /// `[n, 1, S, S]` batch of the given image indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let s = self.manifest.config.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            if i >= self.labels.len() {
                return Err(HebaError::IndexOutOfRange {
                    what: "image",
                    index: i,
                    limit: self.labels.len(),
                });
            }
            data.extend(self.image(i).iter().map(|&v| T::of(v)));
        }
        Tensor::new(vec![indices.len(), 1, s, s], data)
    }

    pub fn prompts(&self, classes: &[usize]) -> Vec<Vec<usize>> {
        classes
            .iter()
            .map(|&c| self.manifest.classes[c].prompt_tokens.clone())
            .collect()
    }

    /// Image indices of one class, in file order.
    pub fn class_indices(&self, class: usize) -> std::ops::Range<usize> {
        let m = self.manifest.config.images_per_class;
        class * m..(class + 1) * m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join("images.bin"), &images_bytes(&self.images))?;
        write_bytes(&dir.join("labels.bin"), &labels_bytes(&self.labels))?;
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    /// Loads and verifies the content hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest = read_json(&mpath)?;
        if manifest.format != FORMAT {
            return Err(HebaError::format(
                &mpath,
                format!("unknown format {}", manifest.format),
            ));
        }
        let ib = read_bytes(&dir.join("images.bin"))?;
        let lb = read_bytes(&dir.join("labels.bin"))?;
        let found = content_hash(&ib, &lb);
        if found != manifest.content_hash {
            return Err(HebaError::HashMismatch {
                what: "dataset",
                expected: manifest.content_hash.clone(),
                found,
            });
        }
        let px = manifest.config.image_size * manifest.config.image_size;
        if ib.len() != manifest.num_images * px * 8 || lb.len() != manifest.num_images * 4 {
            return Err(HebaError::format(
                dir,
                "payload size does not match manifest",
            ));
        }
        let images = ib
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let labels: Vec<u32> = lb
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        if let Some(&l) = labels
            .iter()
            .find(|&&l| l as usize >= manifest.classes.len())
        {
            return Err(HebaError::format(dir, format!("label {l} out of range")));
        }
        Ok(Dataset {
            manifest,
            images,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub base_fraction: f64,
    pub shots: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base_fraction: 0.5,
            shots: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub shots: usize,
    /// First `shots` images of each base class.
    pub train: Vec<usize>,
    /// Remaining images of each base class.
    pub base_test: Vec<usize>,
    /// All images of each novel class except the first `shots`, so base and
    /// novel test sets have equal size per class.
    pub novel_test: Vec<usize>,
}

/// Seeded class shuffle, then the first `round(fraction * K)` classes are
/// base and the rest novel. Each side is returned in ascending order.
pub fn split_base_novel(ds: &Dataset, cfg: &SplitConfig) -> Result<FewShotSplit> {
    let k = ds.num_classes();
    if !(cfg.base_fraction > 0.0 && cfg.base_fraction < 1.0) {
        return Err(HebaError::InvalidConfig(format!(
            "base_fraction {} not in (0, 1)",
            cfg.base_fraction
        )));
    }
    let n_base = (cfg.base_fraction * k as f64).round() as usize;
    if n_base < 2 || k - n_base < 2 {
        return Err(HebaError::InvalidConfig(format!(
            "split of {k} classes gives {n_base} base / {} novel; need at least 2 per side",
            k - n_base
        )));
    }
    let per_class = ds.manifest.config.images_per_class;
    if cfg.shots == 0 || cfg.shots >= per_class {
        return Err(HebaError::InvalidConfig(format!(
            "shots {} must be in 1..{per_class}",
            cfg.shots
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    Rng::new(cfg.seed).shuffle(&mut order);
    let mut base_classes = order[..n_base].to_vec();
    let mut novel_classes = order[n_base..].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();
    let mut train = Vec::new();
    let mut base_test = Vec::new();
    for &c in &base_classes {
        let r = ds.class_indices(c);
        train.extend(r.start..r.start + cfg.shots);
        base_test.extend(r.start + cfg.shots..r.end);
    }
    let novel_test = novel_classes
        .iter()
        .flat_map(|&c| {
            let r = ds.class_indices(c);
            r.start + cfg.shots..r.end
        })
        .collect();
    let split = FewShotSplit {
        base_classes,
        novel_classes,
        shots: cfg.shots,
        train,
        base_test,
        novel_test,
    };
    split.check_disjoint(ds)?;
    Ok(split)
}

impl FewShotSplit {
    /// Class sets are disjoint and no evaluation image is a training image.
    pub fn check_disjoint(&self, ds: &Dataset) -> Result<()> {
        if self
            .base_classes
            .iter()
            .any(|c| self.novel_classes.contains(c))
        {
            return Err(HebaError::Invariant(
                "base and novel classes overlap".into(),
            ));
        }
        let train: std::collections::BTreeSet<usize> = self.train.iter().copied().collect();
        if self
            .novel_test
            .iter()
            .chain(&self.base_test)
            .any(|i| train.contains(i))
        {
            return Err(HebaError::Invariant(
                "evaluation set contains training images".into(),
            ));
        }
        for (set, classes, what) in [
            (&self.train, &self.base_classes, "train"),
            (&self.base_test, &self.base_classes, "base test"),
            (&self.novel_test, &self.novel_classes, "novel test"),
        ] {
            if set
                .iter()
                .any(|&i| !classes.contains(&(ds.labels[i] as usize)))
            {
                return Err(HebaError::Invariant(format!(
                    "{what} set contains a foreign class"
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of images whose nearest class centroid (Euclidean, over the
/// supplied features) is their own class. Centroids come from `train`.
pub fn nearest_centroid_accuracy(
    features: &dyn Fn(usize) -> Vec<f64>,
    labels: &[u32],
    train: &[usize],
    test: &[usize],
    classes: &[usize],
) -> f64 {
    let centroids: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let members: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| labels[i] as usize == c)
                .collect();
            let mut acc = features(members[0]).iter().map(|_| 0.0).collect::<Vec<_>>();
            for &i in &members {
                for (a, v) in acc.iter_mut().zip(features(i)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / members.len() as f64).collect()
        })
        .collect();
    let correct = test
        .iter()
        .filter(|&&i| {
            let f = features(i);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    (
                        k,
                        c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                    )
                })
                .fold(
                    (0, f64::INFINITY),
                    |m, (k, d)| if d < m.1 { (k, d) } else { m },
                );
            classes[best.0] == labels[i] as usize
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Normalized intensity histogram with `bins` equal-width bins on `[0, 1]`.
pub fn intensity_histogram(pixels: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &p in pixels {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    h.iter().map(|c| c / pixels.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: usize) -> DataConfig {
        DataConfig {
            num_classes: classes,
            images_per_class: 20,
            ..DataConfig::default()
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let cfg = DataConfig {
            noise_sigma: 0.0,
            phase_jitter: 0.0,
            ..small(4)
        };
        let ds = generate_dataset(&cfg).unwrap();
        for c in 0..4 {
            let r = ds.class_indices(c);
            let first = ds.image(r.start).to_vec();
            assert!(r.clone().all(|i| ds.image(i) == first.as_slice()));
        }
    }

    #[test]
    fn classes_are_grid_separated() {
        let ds = generate_dataset(&small(40)).unwrap();
        let cls = &ds.manifest.classes;
        for a in 0..cls.len() {
            for b in a + 1..cls.len() {
                let (x, y) = (&cls[a], &cls[b]);
                assert!(x.frequency != y.frequency || x.orientation_step != y.orientation_step);
            }
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        assert!(generate_dataset(&small(85)).is_err());
        assert!(generate_dataset(&small(3)).is_err());
    }

    #[test]
    fn split_sizes() {
        let ds = generate_dataset(&small(8)).unwrap();
        let s = split_base_novel(
            &ds,
            &SplitConfig {
                shots: 4,
                ..SplitConfig::default()
            },
        )
        .unwrap();
        assert_eq!(s.base_classes.len(), 4);
        assert_eq!(s.novel_classes.len(), 4);
        assert_eq!(s.train.len(), 16);
        assert_eq!(s.base_test.len(), 64);
        assert_eq!(s.novel_test.len(), 64);
        let bad = SplitConfig {
            base_fraction: 0.1,
            ..SplitConfig::default()
        };
        assert!(split_base_novel(&ds, &bad).is_err());
    }

    #[test]
    fn prompts_in_vocab() {
        let t = prompt_tokens(3, 8, 64);
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|&v| v < 64));
        assert_ne!(t, prompt_tokens(4, 8, 64));
    }
}
