//! Region, mask and caption metrics, and end-to-end scoring of a prediction file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::forge::{read_jsonl, read_manifest};
use crate::instruct::split_tokens;
use crate::mask::{read_mask_png, MaskGrid};
use crate::prompter::Registry;

fn region_set<S: AsRef<str>>(regions: &[S], registry: &Registry) -> Result<BTreeSet<usize>> {
    regions
        .iter()
        .map(|r| {
            registry
                .index_of(r.as_ref())
                .ok_or_else(|| contract_err!("unknown region {:?}", r.as_ref()))
        })
        .collect()
}

/// Positive label matching: `|P ∩ G| / |P ∪ G|`, and 1 when both are empty.
pub fn plm<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gt: &[G], registry: &Registry) -> Result<f64> {
    let p = region_set(pred, registry)?;
    let g = region_set(gt, registry)?;
    let union = p.union(&g).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(p.intersection(&g).count() as f64 / union as f64)
}

/// `(iou, precision, recall)` of two binary masks. An empty denominator gives
/// 1 when the other side is empty too, else 0.
pub fn mask_iou_pr(pred: &MaskGrid, gt: &MaskGrid) -> Result<(f64, f64, f64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(dim_err!(
            "mask shapes {}×{} and {}×{} differ",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(contract_err!("masks must be binary"));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.values.iter().zip(&gt.values) {
        let (p, g) = (*p > 0.5, *g > 0.5);
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    let union = np + ng - inter;
    let ratio = |num: usize, den: usize, other_empty: bool| {
        if den == 0 {
            if other_empty { 1.0 } else { 0.0 }
        } else {
            num as f64 / den as f64
        }
    };
    Ok((
        ratio(inter, union, true),
        ratio(inter, np, ng == 0),
        ratio(inter, ng, np == 0),
    ))
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per candidate: clipped n-gram precisions
/// for orders `1..=n`, uniform geometric mean, brevity penalty. Any zero
/// precision makes the score 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(contract_err!("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(dim_err!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        ));
    }
    if !(1..=4).contains(&n) {
        return Err(contract_err!("BLEU order {n} outside 1..=4"));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngrams(r, k);
            for (g, cnt) in ngrams(c, k) {
                matched += cnt.min(rc.get(&g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with `β = 1.2`; 0 when either side is empty.
pub fn rouge_l<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn tf_idf<'a>(counts: &BTreeMap<Vec<&'a str>, usize>, idf: &impl Fn(&Vec<&str>) -> f64) -> BTreeMap<Vec<&'a str>, f64> {
    counts.iter().map(|(g, &k)| (g.clone(), k as f64 * idf(g))).collect()
}

fn l2<K>(v: &BTreeMap<K, f64>) -> f64 {
    v.values().map(|x| x * x).sum::<f64>().sqrt()
}

pub const CIDER_SIGMA: f64 = 6.0;

/// Per-sample consensus scores and their mean. Document frequencies come
/// from the references; `idf = ln(N / max(df, 1))`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<(f64, Vec<f64>)> {
    if candidates.len() != references.len() {
        return Err(dim_err!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        ));
    }
    let distinct: BTreeSet<&Vec<String>> = references.iter().collect();
    if distinct.len() < 2 {
        return Err(contract_err!(
            "CIDEr needs at least 2 distinct reference documents, got {}",
            distinct.len()
        ));
    }
    let docs = references.len() as f64;
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let ref_grams: Vec<_> = references.iter().map(|r| ngrams(r, n)).collect();
        let mut df: HashMap<&Vec<&str>, usize> = HashMap::new();
        for g in &ref_grams {
            for key in g.keys() {
                *df.entry(key).or_insert(0) += 1;
            }
        }
        let idf = |g: &Vec<&str>| (docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (c, r)) in candidates.iter().zip(&ref_grams).enumerate() {
            let vc = tf_idf(&ngrams(c, n), &idf);
            let vr = tf_idf(r, &idf);
            let (nc, nr) = (l2(&vc), l2(&vr));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().filter_map(|(g, x)| vr.get(g).map(|y| x * y)).sum();
            let delta = c.len() as f64 - references[i].len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            scores[i] += dot / (nc * nr) * penalty;
        }
    }
    for s in &mut scores {
        *s *= 10.0 / 4.0;
    }
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok((mean, scores))
}

/// One line of a predictions file. `mask` is relative to the file's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub mask: String,
    pub caption: String,
    pub regions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub plm: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub plm: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Corpus BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// `None` when the references have fewer than two distinct documents.
    pub cider: Option<f64>,
    pub conventions: Vec<String>,
    pub per_sample: Vec<SampleMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Scores `predictions_path` against the dataset at `dataset_root`.
pub fn evaluate_run(predictions_path: &Path, dataset_root: &Path, registry: &Registry) -> Result<MetricsReport> {
    let preds: Vec<Prediction> = read_jsonl(predictions_path)?;
    if preds.is_empty() {
        return Err(contract_err!("{} holds no predictions", predictions_path.display()));
    }
    let manifest = read_manifest(dataset_root)?;
    let by_id: HashMap<&str, _> = manifest.iter().map(|e| (e.id.as_str(), e)).collect();
    let missing: Vec<&str> = preds
        .iter()
        .map(|p| p.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::io(
            predictions_path,
            io::Error::new(
                io::ErrorKind::NotFound,
                format!("ids not in the dataset manifest: {}", missing.join(", ")),
            ),
        ));
    }
    let base = predictions_path.parent().unwrap_or(Path::new("."));
    let mut per_sample = Vec::with_capacity(preds.len());
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    for p in &preds {
        let gt = by_id[p.id.as_str()];
        let pm = read_mask_png(&base.join(&p.mask))?;
        let gm = read_mask_png(&dataset_root.join(&gt.mask))?;
        let (iou, precision, recall) = mask_iou_pr(&pm, &gm)?;
        let c = split_tokens(&p.caption);
        let r = split_tokens(&gt.caption);
        per_sample.push(SampleMetrics {
            id: p.id.clone(),
            plm: plm(&p.regions, &gt.regions, registry)?,
            iou,
            precision,
            recall,
            rouge_l: rouge_l(&c, &r),
            cider: 0.0,
        });
        cands.push(c);
        refs.push(r);
    }
    let cider_scores = cider(&cands, &refs).ok();
    if let Some((_, scores)) = &cider_scores {
        for (s, v) in per_sample.iter_mut().zip(scores) {
            s.cider = *v;
        }
    }
    let mut b = [0.0; 4];
    for (n, slot) in b.iter_mut().enumerate() {
        *slot = bleu(&cands, &refs, n + 1)?;
    }
    Ok(MetricsReport {
        samples: per_sample.len(),
        plm: mean(per_sample.iter().map(|s| s.plm)),
        iou: mean(per_sample.iter().map(|s| s.iou)),
        precision: mean(per_sample.iter().map(|s| s.precision)),
        recall: mean(per_sample.iter().map(|s| s.recall)),
        bleu: b,
        rouge_l: mean(per_sample.iter().map(|s| s.rouge_l)),
        cider: cider_scores.map(|(m, _)| m),
        conventions: vec![
            "plm, iou, precision, recall, rouge_l and cider are means over samples".into(),
            "bleu is corpus-level without smoothing".into(),
            "plm of two empty sets is 1".into(),
            "precision with an empty prediction is 1 if the truth is empty, else 0; recall likewise".into(),
            "iou of two empty masks is 1".into(),
        ],
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn plm_examples() {
        let reg = Registry::default();
        assert_eq!(plm(&["eye", "nose"], &["eye", "nose"], &reg).unwrap(), 1.0);
        assert_eq!(plm(&["eye"], &["lip"], &reg).unwrap(), 0.0);
        assert_eq!(plm(&["eye", "nose"], &["eye", "lip"], &reg).unwrap(), 1.0 / 3.0);
        assert_eq!(plm::<&str, &str>(&[], &[], &reg).unwrap(), 1.0);
        assert!(matches!(plm(&["wing"], &["eye"], &reg), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_hand_grids() {
        let p = MaskGrid::new(4, 4, [1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.].to_vec()).unwrap();
        let g = MaskGrid::new(4, 4, [0., 0., 1., 1., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.].to_vec()).unwrap();
        assert_eq!(mask_iou_pr(&p, &g).unwrap(), (2.0 / 6.0, 0.5, 0.5));
        assert_eq!(mask_iou_pr(&p, &p).unwrap(), (1.0, 1.0, 1.0));
        let comp = MaskGrid::new(4, 4, p.values.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert_eq!(mask_iou_pr(&comp, &p).unwrap(), (0.0, 0.0, 0.0));
        let z = MaskGrid::zeros(4, 4);
        assert_eq!(mask_iou_pr(&z, &z).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(mask_iou_pr(&z, &g).unwrap(), (0.0, 0.0, 0.0));
        assert!(matches!(mask_iou_pr(&z, &MaskGrid::zeros(3, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn iou_bounded_by_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let p = MaskGrid::from_fn(5, 6, |_, _| f64::from(u8::from(rng.random_bool(0.3))));
            let g = MaskGrid::from_fn(5, 6, |_, _| f64::from(u8::from(rng.random_bool(0.3))));
            let (i, pr, re) = mask_iou_pr(&p, &g).unwrap();
            assert!(i <= pr && i <= re);
        }
    }

    #[test]
    fn bleu_hand_counts() {
        // unigrams: "the cat sat" vs "the cat sat on the mat": 3/3, bigrams 2/2; c=3, r=6
        let c = vec![toks("the cat sat")];
        let r = vec![toks("the cat sat on the mat")];
        let bp = (1.0 - 6.0 / 3.0f64).exp();
        assert!((bleu(&c, &r, 1).unwrap() - bp).abs() < 1e-15);
        assert!((bleu(&c, &r, 2).unwrap() - bp).abs() < 1e-15);
        assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);

        // clipping: "the the the" against "the cat": 1/3
        let c = vec![toks("the the the")];
        let r = vec![toks("the cat")];
        assert!((bleu(&c, &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        assert_eq!(bleu(&[toks("x y")], &[toks("a b")], 1).unwrap(), 0.0);
        assert_eq!(bleu(&r, &r, 1).unwrap(), 1.0);
        assert!(matches!(bleu(&[], &[], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn rouge_hand_value() {
        let f = rouge_l(&["a", "b", "c", "d"], &["a", "c", "d"]);
        let (p, r) = (0.75, 1.0);
        let want = (1.0 + 1.44) * p * r / (r + 1.44 * p);
        assert!((f - want).abs() < 1e-15);
        assert_eq!(rouge_l(&["a"], &["a"]), 1.0);
        assert_eq!(rouge_l(&["a"], &["b"]), 0.0);
        assert_eq!(rouge_l::<&str>(&[], &["b"]), 0.0);
    }

    #[test]
    fn cider_properties() {
        let refs = vec![toks("a b c"), toks("a d e"), toks("f g h")];
        let (_, s) = cider(&refs, &refs).unwrap();
        // "a" appears in two of three documents, so every sample keeps some weight
        for v in &s {
            assert!(*v > 0.0 && *v <= 10.0 + 1e-12);
        }
        assert!(cider(&[toks("x y z")], &[toks("a b c")]).is_err());
        let cands = vec![toks("x y z"), toks("q r s"), toks("t u v")];
        let (m, _) = cider(&cands, &refs).unwrap();
        assert_eq!(m, 0.0);
        assert!(matches!(
            cider(&[toks("a"), toks("a")], &[toks("a"), toks("a")]),
            Err(Error::Contract(_))
        ));
    }
}
