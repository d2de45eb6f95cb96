//! Annotation quality control, corpus statistics and train/val/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::forge::{ManifestEntry, Method};
use crate::instruct::word_count;
use crate::prompter::Registry;

pub const MAX_WORDS: usize = 120;
pub const MIN_SECONDS: u32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    OverLength,
    UnderTime,
    FalsePositiveRegion,
    EmptyCaption,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

/// Outcome for one triplet. False-positive regions are fixed by dropping the
/// sentence that mentions them, so they are reported but do not fail the
/// triplet; every other violation does.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletQc {
    pub id: String,
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub removed_sentences: Vec<String>,
    pub screened_caption: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcReport {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub counts: BTreeMap<ViolationKind, usize>,
    pub triplets: Vec<TripletQc>,
}

impl QcReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

/// Splits after each `.`, `!` or `?`, keeping the terminator.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

pub fn validate_triplet(entry: &ManifestEntry, registry: &Registry) -> TripletQc {
    let mut violations = Vec::new();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for s in sentences(&entry.caption) {
        let strays: Vec<&str> = registry
            .mentions(&s)
            .into_iter()
            .map(|i| registry.name(i))
            .filter(|name| !entry.regions.iter().any(|r| r == name))
            .collect();
        if strays.is_empty() {
            kept.push(s);
            continue;
        }
        for name in strays {
            violations.push(Violation {
                kind: ViolationKind::FalsePositiveRegion,
                detail: format!("{name} is not in the mask; removed {s:?}"),
            });
        }
        removed.push(s);
    }
    let screened = kept.join(" ");

    let words = word_count(&screened);
    if words == 0 {
        violations.push(Violation {
            kind: ViolationKind::EmptyCaption,
            detail: if removed.is_empty() {
                "caption has no words".into()
            } else {
                "nothing left after screening".into()
            },
        });
    }
    if words > MAX_WORDS {
        violations.push(Violation {
            kind: ViolationKind::OverLength,
            detail: format!("{words} words, limit {MAX_WORDS}"),
        });
    }
    if entry.annotation_seconds < MIN_SECONDS {
        violations.push(Violation {
            kind: ViolationKind::UnderTime,
            detail: format!("{} s, minimum {MIN_SECONDS}", entry.annotation_seconds),
        });
    }
    let passed = violations
        .iter()
        .all(|v| v.kind == ViolationKind::FalsePositiveRegion);
    TripletQc {
        id: entry.id.clone(),
        passed,
        violations,
        removed_sentences: removed,
        screened_caption: screened,
    }
}

pub fn validate_corpus(entries: &[ManifestEntry], registry: &Registry) -> QcReport {
    let triplets: Vec<TripletQc> = entries.iter().map(|e| validate_triplet(e, registry)).collect();
    let mut counts = BTreeMap::new();
    for v in triplets.iter().flat_map(|t| &t.violations) {
        *counts.entry(v.kind).or_insert(0) += 1;
    }
    let passed = triplets.iter().filter(|t| t.passed).count();
    QcReport {
        total: triplets.len(),
        passed,
        failed: triplets.len() - passed,
        counts,
        triplets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLengths {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    pub total_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub methods: BTreeMap<String, usize>,
    /// Per region: samples whose mask includes it.
    pub mask_regions: BTreeMap<String, usize>,
    /// Per region: samples whose caption mentions it.
    pub caption_regions: BTreeMap<String, usize>,
    /// Modified-region count → samples, over localized edits only.
    pub regions_per_image: BTreeMap<usize, usize>,
    /// Full-face samples left out of `regions_per_image`.
    pub full_face: usize,
    pub caption_length: CaptionLengths,
}

/// Corpus statistics. Full-face samples (method `swap`) have no localized
/// edit and are kept out of the per-image region histogram.
pub fn compute_stats(entries: &[ManifestEntry], registry: &Registry) -> Result<DatasetStats> {
    if entries.is_empty() {
        return Err(contract_err!("statistics need a non-empty corpus"));
    }
    let mut methods = BTreeMap::new();
    let mut mask_regions: BTreeMap<String, usize> =
        registry.names().iter().map(|n| (n.clone(), 0)).collect();
    let mut caption_regions = mask_regions.clone();
    let mut hist = BTreeMap::new();
    let mut full_face = 0;
    let (mut total, mut min, mut max) = (0, usize::MAX, 0);
    for e in entries {
        *methods.entry(e.method.as_str().to_string()).or_insert(0) += 1;
        for r in &e.regions {
            *mask_regions.entry(r.clone()).or_insert(0) += 1;
        }
        for i in registry.mentions(&e.caption) {
            *caption_regions.get_mut(registry.name(i)).expect("registry name") += 1;
        }
        if e.method == Method::Swap {
            full_face += 1;
        } else {
            *hist.entry(e.regions.len()).or_insert(0) += 1;
        }
        let w = word_count(&e.caption);
        total += w;
        min = min.min(w);
        max = max.max(w);
    }
    Ok(DatasetStats {
        samples: entries.len(),
        methods,
        mask_regions,
        caption_regions,
        regions_per_image: hist,
        full_face,
        caption_length: CaptionLengths {
            mean: total as f64 / entries.len() as f64,
            min,
            max,
            total_words: total,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then contiguous train/val/test blocks. Val and test get
/// `floor(n·r/Σr)` items each; the rounding remainder goes to train.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [u32; 3], seed: u64) -> Result<Split<T>> {
    if ratios.contains(&0) {
        return Err(config_err!("split ratios must be positive, got {ratios:?}"));
    }
    if items.len() < 10 {
        return Err(contract_err!("splitting needs at least 10 items, got {}", items.len()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sum = u64::from(ratios.iter().sum::<u32>());
    let n = items.len() as u64;
    let n_val = (n * u64::from(ratios[1]) / sum) as usize;
    let n_test = (n * u64::from(ratios[2]) / sum) as usize;
    let n_train = items.len() - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}
