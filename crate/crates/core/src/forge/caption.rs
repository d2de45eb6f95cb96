use rand::Rng;

use super::perturb::PerturbKind;
use crate::instruct::word_count;

pub const MAX_CAPTION_WORDS: usize = 120;

/// `(singular, plural)` predicates per manipulation kind. None of them may
/// contain a region name or alias.
fn descriptors(kind: PerturbKind) -> &'static [(&'static str, &'static str)] {
    match kind {
        PerturbKind::Blur => &[
            ("looks unnaturally smooth and blurred", "look unnaturally smooth and blurred"),
            ("has lost its fine texture", "have lost their fine texture"),
            ("appears soft and smeared", "appear soft and smeared"),
        ],
        PerturbKind::Noise => &[
            ("shows grainy speckles", "show grainy speckles"),
            ("is covered in noisy, uneven pixels", "are covered in noisy, uneven pixels"),
            ("has a coarse, speckled texture", "have a coarse, speckled texture"),
        ],
        PerturbKind::ColorShift => &[
            ("has an unnatural color cast", "have an unnatural color cast"),
            ("looks tinted compared with its surroundings", "look tinted compared with their surroundings"),
            ("does not match the surrounding colors", "do not match the surrounding colors"),
        ],
        PerturbKind::GeometryWarp => &[
            ("looks warped and misshapen", "look warped and misshapen"),
            ("has distorted, wavy edges", "have distorted, wavy edges"),
            ("appears bent out of its natural shape", "appear bent out of their natural shape"),
        ],
        PerturbKind::TextureSwap => &[
            ("seems to come from a different person", "seem to come from a different person"),
            ("does not match the original identity", "do not match the original identity"),
            ("shows blending seams at its border", "show blending seams at their border"),
        ],
    }
}

fn plural_noun(region: &str) -> bool {
    matches!(region, "teeth" | "eyeglasses")
}

fn list(regions: &[String]) -> String {
    match regions {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// One sentence per region, or a single grouped sentence when that would run
/// past the word limit. Every region is named exactly once.
pub fn synth_caption<R: Rng + ?Sized>(regions: &[String], kind: PerturbKind, rng: &mut R) -> String {
    let bank = descriptors(kind);
    let sentences: Vec<String> = regions
        .iter()
        .map(|r| {
            let (one, many) = bank[rng.random_range(0..bank.len())];
            let verb = if plural_noun(r) { many } else { one };
            format!("The {r} {verb}.")
        })
        .collect();
    let caption = sentences.join(" ");
    if word_count(&caption) <= MAX_CAPTION_WORDS {
        return caption;
    }
    let (_, many) = bank[rng.random_range(0..bank.len())];
    format!("The {} {many}.", list(regions))
}
