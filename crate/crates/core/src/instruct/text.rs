use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{contract_err, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const PUNCT: [char; 6] = ['.', ',', ':', ';', '!', '?'];

const TEMPLATE_HEAD: &str = "These facial areas may be manipulated by AI: ";
const TEMPLATE_TAIL: &str = ". Please describe the specific issues in these areas.";

pub fn is_punct(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCT.contains(&c))
}

/// Lowercased word and punctuation tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens with single spaces, attaching punctuation to the token on its left.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !is_punct(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// The form every string takes after one tokenize/detokenize pass.
pub fn canonical_form(text: &str) -> String {
    join_tokens(&split_tokens(text))
}

/// Number of non-punctuation tokens.
pub fn word_count(text: &str) -> usize {
    split_tokens(text).iter().filter(|t| !is_punct(t)).count()
}

/// Word-level vocabulary. Ids 0..4 are PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Every token of `texts` plus the template words and punctuation, in sorted order.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(split_tokens(t.as_ref()));
        }
        set.extend(split_tokens(TEMPLATE_HEAD));
        set.extend(split_tokens(TEMPLATE_TAIL));
        set.extend(PUNCT.iter().map(|p| p.to_string()));
        for r in RESERVED {
            set.remove(r);
        }
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids`, skipping PAD, BOS and EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect();
        join_tokens(&toks)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("map serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let ids: BTreeMap<String, usize> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut tokens = vec![None; ids.len()];
        for (t, &i) in &ids {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => return Err(format!("token id {i} is out of range or repeated")),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err("ids 0..4 must be <pad>, <bos>, <eos>, <unk>".into());
        }
        Ok(Self { tokens, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|reason| Error::decode(path, reason))
    }
}

/// Region prompt rendered into the fixed instruction sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub regions: Vec<String>,
    pub text: String,
}

impl Instruction {
    pub fn token_ids(&self, vocab: &Vocab) -> Vec<usize> {
        vocab.tokenize(&self.text)
    }
}

pub fn build_instruction<S: AsRef<str>>(regions: &[S]) -> Result<Instruction> {
    if regions.is_empty() {
        return Err(contract_err!(
            "instruction needs at least one region; apply the top-1 fallback upstream"
        ));
    }
    let regions: Vec<String> = regions.iter().map(|r| r.as_ref().to_string()).collect();
    let text = format!("{TEMPLATE_HEAD}{}{TEMPLATE_TAIL}", regions.join(", "));
    Ok(Instruction { regions, text })
}
