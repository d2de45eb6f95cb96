use std::fs;
use std::path::Path;

use crate::error::{config_err, contract_err, Error, Result};

pub const NUM_REGIONS: usize = 21;

/// Default face-part list. Left/right pairs are folded into one entry.
pub const DEFAULT_REGIONS: [&str; NUM_REGIONS] = [
    "facial skin",
    "nose",
    "eye",
    "eyebrow",
    "ear",
    "mouth",
    "lip",
    "teeth",
    "hair",
    "neck",
    "forehead",
    "chin",
    "cheek",
    "jaw",
    "nostril",
    "eyelid",
    "eyeglasses",
    "earring",
    "necklace",
    "cloth",
    "hat",
];

const ALIASES: &[(&str, &[&str])] = &[
    ("eyebrow", &["brow", "brows"]),
    ("teeth", &["tooth"]),
    ("jaw", &["jawline"]),
    ("eyeglasses", &["glasses", "spectacles"]),
    ("cloth", &["clothes", "clothing"]),
];

/// Ordered list of exactly 21 region names, with the phrases that count as a
/// mention of each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    names: Vec<String>,
    phrases: Vec<Vec<Vec<String>>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::from_names(DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect())
            .expect("default registry is valid")
    }
}

impl Registry {
    /// Builds a registry; each name also matches its plural and any built-in aliases.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() != NUM_REGIONS {
            return Err(config_err!(
                "registry needs {NUM_REGIONS} regions, got {}",
                names.len()
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if words(n).is_empty() {
                return Err(config_err!("registry entry {i} has no words"));
            }
            if names[..i].contains(n) {
                return Err(config_err!("duplicate registry entry {n:?}"));
            }
        }
        let phrases = names
            .iter()
            .map(|name| {
                let mut forms = vec![name.to_lowercase()];
                if !name.ends_with('s') {
                    forms.push(format!("{}s", name.to_lowercase()));
                }
                if let Some((_, extra)) = ALIASES.iter().find(|(k, _)| *k == name) {
                    forms.extend(extra.iter().map(|s| s.to_string()));
                }
                forms.iter().map(|f| words(f)).collect()
            })
            .collect();
        Ok(Self { names, phrases })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// 0/1 vector with a one at each named region.
    pub fn indicator<S: AsRef<str>>(&self, regions: &[S]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.len()];
        for r in regions {
            let i = self
                .index_of(r.as_ref())
                .ok_or_else(|| contract_err!("unknown region {:?}", r.as_ref()))?;
            v[i] = 1.0;
        }
        Ok(v)
    }

    /// Region names at the positive entries of `v`, in registry order.
    pub fn names_where(&self, v: &[f64]) -> Vec<String> {
        v.iter()
            .zip(&self.names)
            .filter(|(x, _)| **x > 0.5)
            .map(|(_, n)| n.clone())
            .collect()
    }

    /// Sorts region names into registry order; unknown names are an error.
    pub fn canonical_order<S: AsRef<str>>(&self, regions: &[S]) -> Result<Vec<String>> {
        Ok(self.names_where(&self.indicator(regions)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.names).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let names: Vec<String> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::from_names(names).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|reason| Error::decode(path, reason))
    }

    /// Indices of every region mentioned in `text`, in registry order.
    pub fn mentions(&self, text: &str) -> Vec<usize> {
        let toks = words(text);
        (0..self.len())
            .filter(|&i| self.phrases[i].iter().any(|p| contains_seq(&toks, p)))
            .collect()
    }
}

/// Ground-truth label vector: bit `i` is set iff region `i` is mentioned in the caption.
pub fn extract_region_labels(caption: &str, registry: &Registry) -> Vec<f64> {
    let mut v = vec![0.0; registry.len()];
    for i in registry.mentions(caption) {
        v[i] = 1.0;
    }
    v
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
