//! Synthetic forgery triplets: procedural faces, region masks, compositing,
//! captions, and the on-disk dataset layout.

mod caption;
mod face;
mod perturb;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use caption::{synth_caption, MAX_CAPTION_WORDS};
pub use face::{render_face, sample_mask, FaceLayout};
pub use perturb::{blend_masked, composite_forgery, perturb, Method, PerturbKind, PerturbationSpec};

use crate::error::{config_err, dim_err, Error, Result};
use crate::mask::{read_mask_png, write_mask_png, MaskGrid};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const REGISTRY: &str = "registry.json";

/// One forged image with its mask, caption and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub image: RgbImage,
    pub mask: MaskGrid,
    pub caption: String,
    pub method: Method,
    pub regions: Vec<String>,
    pub seed: u64,
    pub annotation_seconds: u32,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub caption: String,
    pub method: Method,
    pub regions: Vec<String>,
    pub seed: u64,
    pub annotation_seconds: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub image_size: usize,
    /// Chance that a sample replaces every face region instead of `k` of them.
    pub full_face_prob: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            full_face_prob: 0.2,
            k_min: 1,
            k_max: 11,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(config_err!("image_size {} is below 16", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.full_face_prob) {
            return Err(config_err!("full_face_prob {} outside [0, 1]", self.full_face_prob));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(config_err!("bad region range {}..={}", self.k_min, self.k_max));
        }
        Ok(())
    }
}

/// Seed of sample `index` in a corpus drawn with `base`.
pub fn triplet_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn triplet_id(index: usize) -> String {
    format!("t{index:05}")
}

/// Builds one triplet; everything is a function of `seed`.
pub fn generate_triplet(id: String, seed: u64, cfg: &ForgeConfig) -> Result<Triplet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (source, layout) = render_face(rng.random(), cfg.image_size);
    let (mask, regions, full) = sample_mask(&layout, &mut rng, cfg.full_face_prob, cfg.k_min, cfg.k_max)?;
    let kind = if full {
        PerturbKind::TextureSwap
    } else {
        PerturbKind::LOCAL[rng.random_range(0..PerturbKind::LOCAL.len())]
    };
    let spec = PerturbationSpec {
        kind,
        strength: rng.random_range(0.5..=1.0),
    };
    let image = composite_forgery(&source, &mask, &spec, &mut rng)?;
    let caption = synth_caption(&regions, kind, &mut rng);
    Ok(Triplet {
        id,
        image,
        mask,
        caption,
        method: kind.method(),
        regions,
        seed,
        annotation_seconds: rng.random_range(60..=300),
    })
}

/// `C×H×W` tensor scaled to `[-1, 1]`.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 127.5 - 1.0;
        }
    }
    Tensor::from_parts([3, h, w], data)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::decode(path, e))?;
    Ok(img.to_rgb8())
}

pub fn write_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::decode(path, e))
}

/// Writes the image and mask PNGs under `root` and returns the manifest line.
pub fn write_triplet(root: &Path, t: &Triplet) -> Result<ManifestEntry> {
    let entry = ManifestEntry {
        id: t.id.clone(),
        image: format!("img/{}.png", t.id),
        mask: format!("mask/{}.png", t.id),
        caption: t.caption.clone(),
        method: t.method,
        regions: t.regions.clone(),
        seed: t.seed,
        annotation_seconds: t.annotation_seconds,
    };
    for dir in ["img", "mask"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
    }
    write_rgb_png(&t.image, &root.join(&entry.image))?;
    write_mask_png(&t.mask, &root.join(&entry.mask))?;
    Ok(entry)
}

pub fn read_triplet(root: &Path, entry: &ManifestEntry) -> Result<Triplet> {
    let image = read_rgb_png(&root.join(&entry.image))?;
    let mask = read_mask_png(&root.join(&entry.mask))?;
    if (mask.width as u32, mask.height as u32) != image.dimensions() {
        return Err(dim_err!(
            "{}: mask {}×{} does not match image {:?}",
            entry.id,
            mask.width,
            mask.height,
            image.dimensions()
        ));
    }
    Ok(Triplet {
        id: entry.id.clone(),
        image,
        mask,
        caption: entry.caption.clone(),
        method: entry.method,
        regions: entry.regions.clone(),
        seed: entry.seed,
        annotation_seconds: entry.annotation_seconds,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row).expect("rows serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::decode(path, format!("line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_jsonl(&root.join(MANIFEST), entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    read_jsonl(&root.join(MANIFEST))
}

/// Manifest entries whose image or mask file is missing.
pub fn dangling_paths(root: &Path, entries: &[ManifestEntry]) -> Vec<PathBuf> {
    entries
        .iter()
        .flat_map(|e| [root.join(&e.image), root.join(&e.mask)])
        .filter(|p| !p.is_file())
        .collect()
}

#[cfg(test)]
mod tests;
