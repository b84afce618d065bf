//! Few-shot training and evaluation: train adapters on base-class shots,
//! evaluate base and novel splits at their inference scales, write
//! checkpoints, curves and result tables, and run the variant grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, ScaleSchedule, Variant};
use crate::backbone::{
    class_logits, encode_image, encode_text, Adapted, BackboneConfig, HebaModel, ModelAdapters,
    ToyBackbone,
};
use crate::data::{split_base_novel, Dataset, FewShotSplit, SplitConfig};
use crate::error::{HebaError, Result};
use crate::graph::Graph;
use crate::objective::{lsce_loss, subsample_negatives, LossConfig};
use crate::optim::{OptimConfig, ParamSpec, Sgd};
use crate::rng::Rng;
use crate::serialize::{
    decode_tensors, encode_tensors, read_bytes, read_json, sha256_hex, write_bytes, write_json,
    TensorEntry,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "heba-checkpoint-v1";
const EVAL_BATCH: usize = 64;

// Sub-streams of the run seed.
const STREAM_ADAPTER_INIT: u64 = 1;
const STREAM_SCALE: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_NEGATIVES: u64 = 4;

/// `2ab / (a + b)`; both inputs must be positive.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) {
        return Err(HebaError::InvalidConfig(format!(
            "harmonic mean needs positive inputs, got {base} and {novel}"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// HM for reporting: a zero accuracy on either side gives 0.
pub fn report_hm(base: f64, novel: f64) -> f64 {
    harmonic_mean(base, novel).unwrap_or(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Base,
    Novel,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Base => "base",
            SplitKind::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(SplitKind::Base),
            "novel" => Some(SplitKind::Novel),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub dataset: PathBuf,
    pub split: SplitConfig,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub alpha_eval_sweep: Vec<f64>,
    /// Seed of the frozen backbone, shared by every run.
    pub backbone_seed: u64,
    pub expected_backbone_hash: Option<String>,
    pub expected_dataset_hash: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            dataset: PathBuf::from("data"),
            split: SplitConfig::default(),
            seeds: vec![1, 2, 3],
            variant: Variant::Full,
            alpha_eval_sweep: vec![0.075, 0.05, 0.025, 0.0125],
            backbone_seed: 0,
            expected_backbone_hash: None,
            expected_dataset_hash: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.adapter.embed_dim != self.backbone.embed_dim {
            return Err(HebaError::InvalidConfig(format!(
                "adapter embed_dim {} != backbone embed_dim {}",
                self.adapter.embed_dim, self.backbone.embed_dim
            )));
        }
        if self.seeds.is_empty() {
            return Err(HebaError::InvalidConfig("seeds must not be empty".into()));
        }
        if self
            .alpha_eval_sweep
            .iter()
            .any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return Err(HebaError::InvalidConfig(
                "alpha_eval_sweep values must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn alpha_for(&self, split: SplitKind) -> f64 {
        match split {
            SplitKind::Base => self.adapter.alpha_base,
            SplitKind::Novel => self.adapter.alpha_novel,
        }
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if let Some(h) = &self.expected_dataset_hash {
            if h != &ds.manifest.content_hash {
                return Err(HebaError::HashMismatch {
                    what: "dataset",
                    expected: h.clone(),
                    found: ds.manifest.content_hash.clone(),
                });
            }
        }
        let dc = &ds.manifest.config;
        if dc.image_size != self.backbone.image_size
            || dc.text_len != self.backbone.text_len
            || dc.vocab_size > self.backbone.vocab_size
        {
            return Err(HebaError::InvalidConfig(format!(
                "dataset (image {}, text_len {}, vocab {}) incompatible with backbone (image {}, text_len {}, vocab {})",
                dc.image_size,
                dc.text_len,
                dc.vocab_size,
                self.backbone.image_size,
                self.backbone.text_len,
                self.backbone.vocab_size
            )));
        }
        Ok(())
    }

    fn frozen_backbone(&self) -> Result<ToyBackbone<f64>> {
        let bb = ToyBackbone::init(&self.backbone, &mut Rng::new(self.backbone_seed))?;
        if let Some(h) = &self.expected_backbone_hash {
            let found = bb.hash();
            if &found != h {
                return Err(HebaError::HashMismatch {
                    what: "backbone",
                    expected: h.clone(),
                    found,
                });
            }
        }
        Ok(bb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub fast: bool,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,lr,loss,fast_flag\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.step, p.lr, p.loss, u8::from(p.fast));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRun {
    pub cfg: RunConfig,
    pub seed: u64,
    pub model: HebaModel<f64>,
    pub optimizer: Sgd<f64>,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub dataset_hash: String,
}

impl TrainedRun {
    pub fn run_id(&self) -> String {
        run_id(self.cfg.variant, self.seed)
    }
}

pub fn run_id(variant: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", variant.as_str())
}

/// Train the adapters of `cfg.variant` on the base-class shots.
pub fn train_run(cfg: &RunConfig, seed: u64, ds: &Dataset) -> Result<TrainedRun> {
    cfg.validate()?;
    cfg.check_dataset(ds)?;
    let split = split_base_novel(ds, &cfg.split)?;
    let backbone = cfg.frozen_backbone()?;
    let backbone_hash = backbone.hash();
    let mut adapters = ModelAdapters::new(
        &cfg.adapter,
        &cfg.backbone,
        cfg.variant,
        &mut Rng::with_stream(seed, STREAM_ADAPTER_INIT),
    )?;
    let specs = adapters
        .trainable_params()
        .into_iter()
        .zip(
            adapters
                .named_tensors()
                .into_iter()
                .filter(|(i, _)| i.trainable),
        )
        .map(|(p, (_, t))| ParamSpec {
            name: p.name,
            shape: t.shape().to_vec(),
            decay: p.decay,
        })
        .collect();
    let mut opt = Sgd::new(cfg.optim.clone(), specs)?;
    let schedule = ScaleSchedule::train(&cfg.adapter);
    let mut scale_rng = Rng::with_stream(seed, STREAM_SCALE);
    let mut order_rng = Rng::with_stream(seed, STREAM_ORDER);
    let mut neg_rng = Rng::with_stream(seed, STREAM_NEGATIVES);

    let k = split.base_classes.len();
    let local = |i: usize| -> usize {
        let label = ds.labels[i] as usize;
        split
            .base_classes
            .iter()
            .position(|&c| c == label)
            .expect("train image of a base class")
    };
    let prompts = ds.prompts(&split.base_classes);
    let ratio = cfg.loss.negative_ratio;
    let subsample = ratio > 0 && ratio < k - 1;
    if ratio >= k - 1 && ratio > 0 {
        log::debug!(
            "negative_ratio {ratio} covers all {} negatives; using the full class set",
            k - 1
        );
    }
    let bs = cfg.optim.batch_size;
    let total = cfg.optim.epochs * split.train.len().div_ceil(bs);
    let mut curve = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..cfg.optim.epochs {
        let mut order = split.train.clone();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(bs) {
            let draw = schedule.sample_scale(&mut scale_rng);
            let targets: Vec<usize> = chunk.iter().map(|&i| local(i)).collect();
            let subsets = if subsample {
                Some(
                    targets
                        .iter()
                        .map(|&t| subsample_negatives(k, t, ratio, &mut neg_rng))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let images = ds.batch::<f64>(chunk)?;
            let mut g = Graph::new();
            let bb = backbone.bind(&mut g);
            let bound = adapters.bind(&mut g);
            let ad = Adapted {
                adapters: &bound,
                scale: draw.scale,
            };
            let iv = g.constant(images);
            let fi = encode_image(&mut g, &bb, iv, Some(&ad))?;
            let ft = encode_text(&mut g, &bb, &prompts, Some(&ad))?;
            let logits = class_logits(&mut g, fi, ft, cfg.backbone.logit_temperature)?;
            let loss = lsce_loss(
                &mut g,
                logits,
                &targets,
                cfg.loss.epsilon,
                subsets.as_deref(),
            )?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(HebaError::NonFiniteLoss { step });
            }
            let grads = g.backward(loss)?;
            let grefs: Vec<Option<&Tensor<f64>>> =
                bound.params.iter().map(|&v| grads.get(v)).collect();
            let lr = opt.step(&mut adapters.trainable_tensors_mut(), &grefs, step, total)?;
            curve.push(CurvePoint {
                step,
                lr,
                loss: lv,
                fast: draw.fast,
            });
            step += 1;
        }
    }
    if backbone.hash() != backbone_hash {
        return Err(HebaError::Invariant(
            "backbone weights changed during training".into(),
        ));
    }
    Ok(TrainedRun {
        cfg: cfg.clone(),
        seed,
        model: HebaModel { backbone, adapters },
        optimizer: opt,
        curve,
        steps: step,
        dataset_hash: ds.manifest.content_hash.clone(),
    })
}

fn split_members(split: &FewShotSplit, which: SplitKind) -> (&[usize], &[usize]) {
    match which {
        SplitKind::Base => (&split.base_test, &split.base_classes),
        SplitKind::Novel => (&split.novel_test, &split.novel_classes),
    }
}

/// Logits over the split's own classes for its evaluation images.
/// `scale = None` runs the frozen model.
pub fn split_logits(
    model: &HebaModel<f64>,
    ds: &Dataset,
    split: &FewShotSplit,
    which: SplitKind,
    scale: Option<f64>,
) -> Result<Tensor<f64>> {
    let (indices, classes) = split_members(split, which);
    if indices.is_empty() {
        return Err(HebaError::InvalidConfig(format!(
            "{} split is empty",
            which.as_str()
        )));
    }
    let prompts = ds.prompts(classes);
    let mut data = Vec::with_capacity(indices.len() * classes.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let imgs = ds.batch::<f64>(chunk)?;
        data.extend_from_slice(model.logits(&imgs, &prompts, scale)?.data());
    }
    Tensor::new(vec![indices.len(), classes.len()], data)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Percentage of rows whose argmax is the true local class.
pub fn accuracy_from_logits(
    logits: &Tensor<f64>,
    ds: &Dataset,
    split: &FewShotSplit,
    which: SplitKind,
) -> f64 {
    let (indices, classes) = split_members(split, which);
    let correct = argmax_rows(logits)
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| classes[p] == ds.labels[i] as usize)
        .count();
    100.0 * correct as f64 / indices.len() as f64
}

/// Eval-mode accuracy at `alpha` (or the split's default scale).
pub fn evaluate(
    model: &HebaModel<f64>,
    cfg: &RunConfig,
    ds: &Dataset,
    which: SplitKind,
    alpha_override: Option<f64>,
) -> Result<f64> {
    let split = split_base_novel(ds, &cfg.split)?;
    let alpha = alpha_override.unwrap_or_else(|| cfg.alpha_for(which));
    let logits = split_logits(model, ds, &split, which, Some(alpha))?;
    Ok(accuracy_from_logits(&logits, ds, &split, which))
}

/// Frozen-backbone accuracy, adapters disabled.
pub fn zero_shot_accuracy(
    model: &HebaModel<f64>,
    cfg: &RunConfig,
    ds: &Dataset,
    which: SplitKind,
) -> Result<f64> {
    let split = split_base_novel(ds, &cfg.split)?;
    let logits = split_logits(model, ds, &split, which, None)?;
    Ok(accuracy_from_logits(&logits, ds, &split, which))
}

// ---- checkpoints ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
    pub backbone_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

fn optim_name(param: &str) -> String {
    format!("optim.v.{param}")
}

/// Writes `path` (manifest JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(run: &TrainedRun, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f64>)> = run.model.backbone.named_tensors();
    named.extend(
        run.model
            .adapters
            .named_tensors()
            .into_iter()
            .map(|(i, t)| (i.name, t)),
    );
    for (spec, v) in run.optimizer.specs.iter().zip(&run.optimizer.velocity) {
        named.push((optim_name(&spec.name), v));
    }
    let (blob, tensors) = encode_tensors(&named);
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| HebaError::format(path, "checkpoint path has no file name"))?
        .to_string();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        blob: blob_name,
        blob_sha256: sha256_hex(&blob),
        backbone_hash: run.model.backbone.hash(),
        dataset_hash: run.dataset_hash.clone(),
        seed: run.seed,
        steps: run.steps,
        config: run.cfg.clone(),
        tensors,
    };
    write_bytes(&blob_path, &blob)?;
    write_json(path, &manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub model: HebaModel<f64>,
    pub optimizer: Sgd<f64>,
}

impl LoadedCheckpoint {
    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    /// Loads the training dataset and checks it is the one trained on.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = Dataset::load(&self.manifest.config.dataset)?;
        if ds.manifest.content_hash != self.manifest.dataset_hash {
            return Err(HebaError::HashMismatch {
                what: "dataset",
                expected: self.manifest.dataset_hash.clone(),
                found: ds.manifest.content_hash,
            });
        }
        Ok(ds)
    }
}

fn fill(
    targets: Vec<(String, &mut Tensor<f64>)>,
    store: &mut std::collections::BTreeMap<String, Tensor<f64>>,
    path: &Path,
) -> Result<()> {
    for (name, t) in targets {
        let v = store
            .remove(&name)
            .ok_or_else(|| HebaError::format(path, format!("missing tensor {name}")))?;
        if v.shape() != t.shape() {
            return Err(HebaError::format(
                path,
                format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                ),
            ));
        }
        *t = v;
    }
    Ok(())
}

/// Loads a checkpoint and verifies the blob and backbone hashes.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let manifest: CheckpointManifest = read_json(path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(HebaError::format(
            path,
            format!("unknown format {}", manifest.format),
        ));
    }
    let blob_path = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let blob = read_bytes(&blob_path)?;
    let found = sha256_hex(&blob);
    if found != manifest.blob_sha256 {
        return Err(HebaError::HashMismatch {
            what: "checkpoint blob",
            expected: manifest.blob_sha256.clone(),
            found,
        });
    }
    let mut store: std::collections::BTreeMap<String, Tensor<f64>> =
        decode_tensors(&blob, &manifest.tensors, &blob_path)?
            .into_iter()
            .collect();
    let cfg = &manifest.config;
    cfg.validate()?;
    let mut backbone = ToyBackbone::<f64>::init(&cfg.backbone, &mut Rng::new(cfg.backbone_seed))?;
    fill(backbone.named_tensors_mut(), &mut store, path)?;
    let found = backbone.hash();
    if found != manifest.backbone_hash {
        return Err(HebaError::HashMismatch {
            what: "backbone",
            expected: manifest.backbone_hash.clone(),
            found,
        });
    }
    let mut adapters =
        ModelAdapters::<f64>::new(&cfg.adapter, &cfg.backbone, cfg.variant, &mut Rng::new(0))?;
    fill(adapters.named_tensors_mut(), &mut store, path)?;
    let specs: Vec<ParamSpec> = adapters
        .named_tensors()
        .into_iter()
        .filter(|(i, _)| i.trainable)
        .map(|(i, t)| ParamSpec {
            name: i.name,
            shape: t.shape().to_vec(),
            decay: i.decay,
        })
        .collect();
    let mut optimizer = Sgd::new(cfg.optim.clone(), specs)?;
    let vel: Vec<(String, &mut Tensor<f64>)> = optimizer
        .specs
        .iter()
        .map(|s| optim_name(&s.name))
        .zip(optimizer.velocity.iter_mut())
        .collect();
    fill(vel, &mut store, path)?;
    if let Some(name) = store.keys().next() {
        return Err(HebaError::format(path, format!("unexpected tensor {name}")));
    }
    Ok(LoadedCheckpoint {
        manifest,
        model: HebaModel { backbone, adapters },
        optimizer,
    })
}

// ---- results ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub variant: Variant,
    pub seed: u64,
    pub alpha_base: f64,
    pub alpha_novel: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub config_hash: String,
    /// Logged, not written to report files.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for one value).
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub runs: usize,
    pub base_acc: MeanStd,
    pub novel_acc: MeanStd,
    pub hm: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub config_hash: String,
    pub runs: Vec<SeedResult>,
    pub aggregates: Vec<Aggregate>,
}

impl Report {
    pub fn new(cfg: &RunConfig, runs: Vec<SeedResult>) -> Self {
        let mut variants: Vec<Variant> = runs.iter().map(|r| r.variant).collect();
        variants.dedup();
        let aggregates = variants
            .into_iter()
            .map(|v| {
                let rs: Vec<&SeedResult> = runs.iter().filter(|r| r.variant == v).collect();
                let col = |f: &dyn Fn(&SeedResult) -> f64| {
                    mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                Aggregate {
                    variant: v,
                    runs: rs.len(),
                    base_acc: col(&|r| r.base_acc),
                    novel_acc: col(&|r| r.novel_acc),
                    hm: col(&|r| r.hm),
                }
            })
            .collect();
        Report {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            runs,
            aggregates,
        }
    }

    /// One row per run and split.
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,split,alpha,accuracy,hm\n");
        for r in &self.runs {
            for (split, alpha, acc) in [
                ("base", r.alpha_base, r.base_acc),
                ("novel", r.alpha_novel, r.novel_acc),
            ] {
                let _ = writeln!(
                    s,
                    "{},{},{split},{alpha},{acc},{}",
                    r.variant.as_str(),
                    r.seed,
                    r.hm
                );
            }
        }
        s
    }

    /// Recomputes every HM from its accuracies.
    pub fn check_hm(&self) -> Result<()> {
        for r in &self.runs {
            let hm = report_hm(r.base_acc, r.novel_acc);
            if (hm - r.hm).abs() > 1e-9 {
                return Err(HebaError::Invariant(format!(
                    "{} seed {}: stored hm {} != recomputed {hm}",
                    r.variant.as_str(),
                    r.seed,
                    r.hm
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join("results.csv"), self.csv().as_bytes())?;
        write_json(&dir.join("results.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join("results.json"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", &self.config_hash[..12]);
        let _ = writeln!(
            s,
            "{:<14} {:>4} {:>16} {:>16} {:>16}",
            "variant", "runs", "base", "novel", "hm"
        );
        for a in &self.aggregates {
            let f = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
            let _ = writeln!(
                s,
                "{:<14} {:>4} {:>16} {:>16} {:>16}",
                a.variant.as_str(),
                a.runs,
                f(&a.base_acc),
                f(&a.novel_acc),
                f(&a.hm)
            );
        }
        s
    }
}

/// Train, checkpoint, and evaluate one (variant, seed) under `out`.
pub fn run_single(
    cfg: &RunConfig,
    seed: u64,
    ds: &Dataset,
    out: &Path,
) -> Result<(SeedResult, TrainedRun)> {
    let start = Instant::now();
    let run = train_run(cfg, seed, ds)?;
    let id = run.run_id();
    save_checkpoint(&run, &out.join("checkpoints").join(format!("{id}.json")))?;
    write_bytes(
        &out.join("curves").join(format!("{id}.csv")),
        curve_csv(&run.curve).as_bytes(),
    )?;
    let base_acc = evaluate(&run.model, cfg, ds, SplitKind::Base, None)?;
    let novel_acc = evaluate(&run.model, cfg, ds, SplitKind::Novel, None)?;
    let wall = start.elapsed().as_secs_f64();
    log::info!("{id}: base {base_acc:.2} novel {novel_acc:.2} ({wall:.1}s)");
    let res = SeedResult {
        variant: cfg.variant,
        seed,
        alpha_base: cfg.adapter.alpha_base,
        alpha_novel: cfg.adapter.alpha_novel,
        base_acc,
        novel_acc,
        hm: report_hm(base_acc, novel_acc),
        steps: run.steps,
        final_loss: run.curve.last().map(|p| p.loss),
        config_hash: cfg.hash(),
        wall_clock_s: wall,
    };
    Ok((res, run))
}

/// Run-level parallelism from `HEBA_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("HEBA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Runs `jobs` on up to `threads` threads; results keep job order.
fn run_parallel<J: Sync, R: Send>(
    jobs: &[J],
    threads: usize,
    f: impl Fn(&J) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

/// Every run over `variants × cfg.seeds`, with the other settings held
/// fixed. Results are written after each batch of `threads` runs; on a
/// failure the runs finished so far are written before the error returns.
pub fn run_grid(
    cfg: &RunConfig,
    variants: &[Variant],
    ds: &Dataset,
    out: &Path,
    threads: usize,
) -> Result<Report> {
    cfg.validate()?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut done = Vec::new();
    for batch in jobs.chunks(threads.max(1)) {
        let results = run_parallel(batch, threads, |&(v, s)| {
            let c = RunConfig {
                variant: v,
                ..cfg.clone()
            };
            run_single(&c, s, ds, out).map(|(r, _)| r)
        });
        for r in results {
            match r {
                Ok(r) => done.push(r),
                Err(e) => {
                    Report::new(cfg, done).write(out)?;
                    return Err(e);
                }
            }
        }
        Report::new(cfg, done.clone()).write(out)?;
    }
    Ok(Report::new(cfg, done))
}

pub fn run_ablation_grid(
    cfg: &RunConfig,
    ds: &Dataset,
    out: &Path,
    threads: usize,
) -> Result<Report> {
    run_grid(cfg, &Variant::ALL, ds, out, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

/// Both splits evaluated at each inference scale.
pub fn sweep_alpha(
    model: &HebaModel<f64>,
    cfg: &RunConfig,
    ds: &Dataset,
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    alphas
        .iter()
        .map(|&a| {
            let base_acc = evaluate(model, cfg, ds, SplitKind::Base, Some(a))?;
            let novel_acc = evaluate(model, cfg, ds, SplitKind::Novel, Some(a))?;
            Ok(SweepRow {
                alpha: a,
                base_acc,
                novel_acc,
                hm: report_hm(base_acc, novel_acc),
            })
        })
        .collect()
}

// ---- table audit ----

pub const BUNDLED_TABLES: &str = include_str!("../data/reference_tables.csv");
pub const HM_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub table: String,
    pub dataset: String,
    pub method: String,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

/// Parses `table,dataset,method,base,novel,hm` rows (header required, no quoting).
pub fn parse_table_csv(text: &str, origin: &Path) -> Result<Vec<TableCell>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| HebaError::format(origin, "empty table file"))?;
    if header.trim() != "table,dataset,method,base,novel,hm" {
        return Err(HebaError::format(
            origin,
            format!("unexpected header {header:?}"),
        ));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(HebaError::format(
                    origin,
                    format!("row {}: expected 6 fields", i + 2),
                ));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    HebaError::format(origin, format!("row {}: bad number {s:?}", i + 2))
                })
            };
            Ok(TableCell {
                table: f[0].into(),
                dataset: f[1].into(),
                method: f[2].into(),
                base: num(f[3])?,
                novel: num(f[4])?,
                hm: num(f[5])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub cell: TableCell,
    pub recomputed: f64,
    pub diff: f64,
    pub ok: bool,
}

pub fn audit_hm(cells: &[TableCell], tol: f64) -> Result<Vec<AuditRow>> {
    cells
        .iter()
        .map(|c| {
            let r = harmonic_mean(c.base, c.novel)?;
            let diff = r - c.hm;
            Ok(AuditRow {
                cell: c.clone(),
                recomputed: r,
                diff,
                ok: diff.abs() <= tol,
            })
        })
        .collect()
}
