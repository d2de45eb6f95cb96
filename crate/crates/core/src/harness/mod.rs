//! The commands behind the `forgetalk` binary: dataset synthesis, the two
//! training stages, inference, evaluation, QC and statistics.

mod fpn;
mod stage2;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fpn::{cmd_train_fpn, fpn_sgd_step, load_fpn, random_set_plm, EpochLog, TrainFpnReport};
pub use stage2::{
    cmd_infer, cmd_train_stage2, load_stage2, mention_rate, split_inputs, InferFailure, InferInput,
    InferReport, Stage2EpochLog, TrainStage2Report,
};

use crate::error::{config_err, contract_err, Error, Result};
use crate::forge::{
    dangling_paths, generate_triplet, image_to_tensor, read_manifest, read_rgb_png, triplet_id,
    triplet_seed, write_manifest, write_triplet, ForgeConfig, ManifestEntry, REGISTRY,
};
use crate::instruct::QFormerConfig;
use crate::mask::{read_mask_png, MaskDecoderConfig, MaskGrid};
use crate::metrics::{evaluate_run, MetricsReport};
use crate::prompter::{extract_region_labels, FpnConfig, Registry};
use crate::qc::{compute_stats, split_dataset, validate_corpus, DatasetStats, QcReport, Split};
use crate::tensor::Tensor;

pub const SPLIT: &str = "split.json";
pub const CONFIG: &str = "config.toml";
pub const FPN_CHECKPOINT: &str = "fpn.ckpt";
pub const FPN_META: &str = "fpn.json";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const STAGE2_META: &str = "stage2.json";
pub const VOCAB: &str = "vocab.json";
pub const PREDICTIONS: &str = "predictions.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    /// train : val : test
    pub split: [u32; 3],
    pub forge: ForgeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            split: [8, 1, 1],
            forge: ForgeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Global gradient-norm ceiling; 0 turns clipping off.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            momentum: 0.9,
            warmup_steps: 100,
            epochs: 12,
            batch: 16,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("{name}.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(config_err!("{name}: epochs and batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("{name}.momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(config_err!("{name}.clip_norm must be finite and non-negative, got {}", self.clip_norm));
        }
        Ok(())
    }

    pub(crate) fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

/// Which region list fills the instruction template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    /// Regions predicted by the frozen prompter.
    Predicted,
    /// The triplet's true modified regions.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Options {
    /// Template source while training; inference chooses separately.
    pub train_prompt: PromptSource,
    pub caption_max_len: usize,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            train_prompt: PromptSource::GroundTruth,
            caption_max_len: 160,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub region: f64,
    pub mask: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            region: 0.5,
            mask: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub fpn: FpnConfig,
    pub qformer: QFormerConfig,
    pub mask_decoder: MaskDecoderConfig,
    pub train_fpn: OptimConfig,
    pub train_stage2: OptimConfig,
    pub stage2: Stage2Options,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            fpn: FpnConfig::default(),
            qformer: QFormerConfig::default(),
            mask_decoder: MaskDecoderConfig::default(),
            train_fpn: OptimConfig::default(),
            train_stage2: OptimConfig {
                lr: 0.3,
                warmup_steps: 50,
                epochs: 6,
                batch: 8,
                ..OptimConfig::default()
            },
            stage2: Stage2Options::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.forge.validate()?;
        self.fpn.validate()?;
        self.qformer.validate()?;
        self.train_fpn.validate("train_fpn")?;
        self.train_stage2.validate("train_stage2")?;
        if self.data.forge.image_size != self.fpn.image_size {
            return Err(config_err!(
                "data.forge.image_size {} differs from fpn.image_size {}",
                self.data.forge.image_size,
                self.fpn.image_size
            ));
        }
        if self.fpn.channels != 3 {
            return Err(config_err!("images are RGB; fpn.channels must be 3"));
        }
        if self.data.split.contains(&0) {
            return Err(config_err!("split ratios must be positive, got {:?}", self.data.split));
        }
        for (name, t) in [("region", self.thresholds.region), ("mask", self.thresholds.mask)] {
            if !(0.0..1.0).contains(&t) {
                return Err(config_err!("thresholds.{name} {t} outside [0, 1)"));
            }
        }
        if self.stage2.caption_max_len == 0 || self.stage2.caption_max_len > self.qformer.max_len {
            return Err(config_err!(
                "stage2.caption_max_len {} outside 1..={}",
                self.stage2.caption_max_len,
                self.qformer.max_len
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => config_err!("{}: {msg}", path.display()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Independent generator for one purpose (`stream`) under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_FPN_INIT: u64 = 2;
pub(crate) const STREAM_FPN_ORDER: u64 = 3;
pub(crate) const STREAM_STAGE2_INIT: u64 = 4;
pub(crate) const STREAM_STAGE2_ORDER: u64 = 5;
pub(crate) const STREAM_BASELINE: u64 = 6;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_file(path, &text)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(path, e))
}

pub(crate) fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Creates `dir` and records `cfg` in it. A run directory belongs to one
/// configuration: an existing, different `config.toml` is refused.
pub fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG);
    let text = cfg.to_toml();
    if path.exists() {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if old != text {
            return Err(config_err!(
                "{} holds a different configuration; use a fresh run directory",
                path.display()
            ));
        }
        return Ok(());
    }
    write_file(&path, &text)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub registry: Registry,
    pub split: Split<String>,
}

/// One triplet ready for the models.
#[derive(Clone, Debug)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub image: Tensor,
    pub mask: MaskGrid,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = read_manifest(root)?;
        let registry = Registry::load(&root.join(REGISTRY))?;
        let split: Split<String> = read_json(&root.join(SPLIT))?;
        let known: std::collections::HashSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if !known.contains(id.as_str()) {
                return Err(Error::decode(root.join(SPLIT), format!("id {id} is not in the manifest")));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            registry,
            split,
        })
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Loads images, masks and caption-derived region labels for `ids`.
    pub fn load(&self, ids: &[String]) -> Result<Vec<Sample>> {
        let by_id: std::collections::HashMap<&str, &ManifestEntry> =
            self.entries.iter().map(|e| (e.id.as_str(), e)).collect();
        ids.iter()
            .map(|id| {
                let entry = by_id[id.as_str()];
                let image = read_rgb_png(&self.root.join(&entry.image))?;
                let mask = read_mask_png(&self.root.join(&entry.mask))?;
                Ok(Sample {
                    entry: entry.clone(),
                    image: image_to_tensor(&image),
                    mask,
                    labels: extract_region_labels(&entry.caption, &self.registry),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// SHA-256 of `manifest.jsonl`.
    pub manifest_sha256: String,
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::nn::hex_string(&Sha256::digest(&bytes)))
}

/// Generates `cfg.data.samples` triplets into `out` with manifest, registry
/// and split files.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<SynthReport> {
    cfg.validate()?;
    let n = cfg.data.samples;
    if n == 0 {
        return Err(config_err!("data.samples must be positive"));
    }
    if !force && is_nonempty_dir(out)? {
        return Err(config_err!(
            "{} exists and is not empty; pass --force to write into it",
            out.display()
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let t = generate_triplet(triplet_id(i), triplet_seed(cfg.seed, i as u64), &cfg.data.forge)?;
        entries.push(write_triplet(out, &t)?);
    }
    write_manifest(out, &entries)?;
    let registry = Registry::default();
    registry.save(&out.join(REGISTRY))?;
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let split = if n >= 10 {
        split_dataset(&ids, cfg.data.split, stream_rng(cfg.seed, STREAM_SPLIT).next_u64())?
    } else {
        Split {
            train: ids,
            val: Vec::new(),
            test: Vec::new(),
        }
    };
    write_json(&out.join(SPLIT), &split)?;
    Ok(SynthReport {
        samples: n,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        manifest_sha256: file_sha256(&out.join(crate::forge::MANIFEST))?,
    })
}

/// Quality control over a dataset directory; missing files count as failures
/// of the triplets that reference them.
pub fn cmd_qc(data: &Path) -> Result<QcReport> {
    let entries = read_manifest(data)?;
    let registry = Registry::load(&data.join(REGISTRY))?;
    let dangling = dangling_paths(data, &entries);
    if !dangling.is_empty() {
        let list: Vec<String> = dangling.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::io(
            data,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("manifest references missing files: {}", list.join(", ")),
            ),
        ));
    }
    Ok(validate_corpus(&entries, &registry))
}

pub fn cmd_stats(data: &Path) -> Result<DatasetStats> {
    let entries = read_manifest(data)?;
    let registry = Registry::load(&data.join(REGISTRY))?;
    compute_stats(&entries, &registry)
}

/// Scores a predictions file and writes the report next to it as `metrics.json`.
pub fn cmd_eval(predictions: &Path, data: &Path) -> Result<MetricsReport> {
    let registry = Registry::load(&data.join(REGISTRY))?;
    let report = evaluate_run(predictions, data, &registry)?;
    let dir = predictions.parent().unwrap_or(Path::new("."));
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Plain-text table of the headline metrics.
pub fn metrics_table(r: &MetricsReport) -> String {
    let cider = r.cider.map_or("n/a".to_string(), |c| format!("{c:.4}"));
    let rows = [
        ("samples", r.samples.to_string()),
        ("PLM", format!("{:.4}", r.plm)),
        ("IoU", format!("{:.4}", r.iou)),
        ("precision", format!("{:.4}", r.precision)),
        ("recall", format!("{:.4}", r.recall)),
        ("BLEU-1", format!("{:.4}", r.bleu[0])),
        ("BLEU-2", format!("{:.4}", r.bleu[1])),
        ("BLEU-3", format!("{:.4}", r.bleu[2])),
        ("BLEU-4", format!("{:.4}", r.bleu[3])),
        ("ROUGE-L", format!("{:.4}", r.rouge_l)),
        ("CIDEr", cider),
    ];
    rows.iter().map(|(k, v)| format!("{k:<10} {v}\n")).collect()
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn require_split(ids: &[String], name: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(contract_err!("the {name} split is empty"));
    }
    Ok(())
}
