use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::face::render_face;
use crate::error::{dim_err, Result};
use crate::mask::MaskGrid;

/// Kind of synthetic manipulation used to produce the generated image `I_g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    Blur,
    Noise,
    ColorShift,
    TextureSwap,
    GeometryWarp,
}

impl PerturbKind {
    pub const LOCAL: [PerturbKind; 4] = [
        PerturbKind::Blur,
        PerturbKind::Noise,
        PerturbKind::ColorShift,
        PerturbKind::GeometryWarp,
    ];

    pub fn method(self) -> Method {
        match self {
            PerturbKind::TextureSwap => Method::Swap,
            PerturbKind::Blur | PerturbKind::Noise => Method::InpaintT,
            PerturbKind::ColorShift | PerturbKind::GeometryWarp => Method::InpaintD,
        }
    }
}

/// Manipulation family recorded in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "swap")]
    Swap,
    #[serde(rename = "inpaint-T")]
    InpaintT,
    #[serde(rename = "inpaint-D")]
    InpaintD,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Swap => "swap",
            Method::InpaintT => "inpaint-T",
            Method::InpaintD => "inpaint-D",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// In `[0, 1]`; scales blur radius, noise amplitude, tint, blend and warp.
    pub strength: f64,
}

/// The generated image `I_g`: the whole of `image` under `spec`, carrying
/// the period-2 checkerboard that upsampling generators leave behind.
pub fn perturb<R: Rng + ?Sized>(image: &RgbImage, spec: &PerturbationSpec, rng: &mut R) -> RgbImage {
    let s = spec.strength.clamp(0.0, 1.0);
    let mut out = transform(image, spec.kind, s, rng);
    let amp = (50.0 + 10.0 * s) as i32;
    for (x, y, px) in out.enumerate_pixels_mut() {
        let sign = if (x + y) % 2 == 0 { 1 } else { -1 };
        for c in 0..3 {
            px[c] = (i32::from(px[c]) + sign * amp).clamp(0, 255) as u8;
        }
    }
    out
}

fn transform<R: Rng + ?Sized>(image: &RgbImage, kind: PerturbKind, s: f64, rng: &mut R) -> RgbImage {
    let (w, h) = image.dimensions();
    match kind {
        PerturbKind::Blur => {
            let r = 1 + (s * 1.999) as i64;
            RgbImage::from_fn(w, h, |x, y| {
                let mut acc = [0u32; 3];
                let mut n = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let px = image.get_pixel(
                            (i64::from(x) + dx).clamp(0, i64::from(w) - 1) as u32,
                            (i64::from(y) + dy).clamp(0, i64::from(h) - 1) as u32,
                        );
                        for c in 0..3 {
                            acc[c] += u32::from(px[c]);
                        }
                        n += 1;
                    }
                }
                Rgb(acc.map(|v| ((v + n / 2) / n) as u8))
            })
        }
        PerturbKind::Noise => {
            let amp = (25.0 + 35.0 * s) as i32;
            let mut out = image.clone();
            for px in out.pixels_mut() {
                for c in 0..3 {
                    let v = i32::from(px[c]) + rng.random_range(-amp..=amp);
                    px[c] = v.clamp(0, 255) as u8;
                }
            }
            out
        }
        PerturbKind::ColorShift => {
            let max = 40.0 + 50.0 * s;
            let shift: [i32; 3] = [0; 3].map(|_| {
                let mag = rng.random_range(0.5..=1.0) * max;
                if rng.random_bool(0.5) { mag as i32 } else { -(mag as i32) }
            });
            let mut out = image.clone();
            for px in out.pixels_mut() {
                for c in 0..3 {
                    px[c] = (i32::from(px[c]) + shift[c]).clamp(0, 255) as u8;
                }
            }
            out
        }
        PerturbKind::TextureSwap => {
            let (donor, _) = render_face(rng.random(), w as usize);
            let alpha = 0.6 + 0.4 * s;
            RgbImage::from_fn(w, h, |x, y| {
                let (a, b) = (image.get_pixel(x, y), donor.get_pixel(x, y));
                Rgb([0, 1, 2].map(|c| {
                    (f64::from(a[c]) * (1.0 - alpha) + f64::from(b[c]) * alpha).round() as u8
                }))
            })
        }
        PerturbKind::GeometryWarp => {
            let amp = 1.5 + 1.5 * s;
            let period = rng.random_range(6.0..12.0);
            let (px, py): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            let tau = std::f64::consts::TAU;
            RgbImage::from_fn(w, h, |x, y| {
                let dx = amp * (tau * f64::from(y) / period + px).sin();
                let dy = amp * (tau * f64::from(x) / period + py).cos();
                let sx = (f64::from(x) + dx).round().clamp(0.0, f64::from(w - 1)) as u32;
                let sy = (f64::from(y) + dy).round().clamp(0.0, f64::from(h - 1)) as u32;
                *image.get_pixel(sx, sy)
            })
        }
    }
}

/// `(1 − M)·I + M·I_g` per pixel and channel.
pub fn blend_masked(image: &RgbImage, mask: &MaskGrid, generated: &RgbImage) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if generated.dimensions() != (w, h) || (mask.width, mask.height) != (w as usize, h as usize) {
        return Err(dim_err!(
            "image {w}×{h}, generated {:?} and mask {}×{} must agree",
            generated.dimensions(),
            mask.width,
            mask.height
        ));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let m = mask.get(y as usize, x as usize);
        let (a, b) = (image.get_pixel(x, y), generated.get_pixel(x, y));
        Rgb([0, 1, 2].map(|c| ((1.0 - m) * f64::from(a[c]) + m * f64::from(b[c])) as u8))
    }))
}

/// Forged image: `spec` applied to `image`, kept only inside `mask`.
pub fn composite_forgery<R: Rng + ?Sized>(
    image: &RgbImage,
    mask: &MaskGrid,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if (mask.width, mask.height) != (w as usize, h as usize) {
        return Err(dim_err!(
            "mask {}×{} does not match image {w}×{h}",
            mask.width,
            mask.height
        ));
    }
    let generated = perturb(image, spec, rng);
    blend_masked(image, mask, &generated)
}
