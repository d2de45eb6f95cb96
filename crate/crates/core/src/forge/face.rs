use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};
use crate::mask::MaskGrid;
use crate::prompter::{DEFAULT_REGIONS, NUM_REGIONS};

/// Per-region occupancy of one rendered face. Entries follow the default
/// registry order; `None` marks a region this face does not have.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLayout {
    pub height: usize,
    pub width: usize,
    regions: Vec<Option<MaskGrid>>,
}

impl FaceLayout {
    pub fn region(&self, name: &str) -> Option<&MaskGrid> {
        let i = DEFAULT_REGIONS.iter().position(|r| *r == name)?;
        self.regions[i].as_ref()
    }

    pub fn region_at(&self, index: usize) -> Option<&MaskGrid> {
        self.regions.get(index).and_then(Option::as_ref)
    }

    /// Registry indices of the regions present on this face.
    pub fn present(&self) -> Vec<usize> {
        (0..NUM_REGIONS).filter(|&i| self.regions[i].is_some()).collect()
    }

    pub fn present_names(&self) -> Vec<&'static str> {
        self.present().into_iter().map(|i| DEFAULT_REGIONS[i]).collect()
    }

    /// Pixel-wise union of the given regions; absent ones contribute nothing.
    pub fn union(&self, indices: &[usize]) -> MaskGrid {
        let mut out = MaskGrid::zeros(self.height, self.width);
        for &i in indices {
            if let Some(g) = self.region_at(i) {
                for (o, v) in out.values.iter_mut().zip(&g.values) {
                    if *v > 0.5 {
                        *o = 1.0;
                    }
                }
            }
        }
        out
    }

    /// Mean `(y, x)` pixel position of a region.
    pub fn centroid(&self, name: &str) -> Option<(f64, f64)> {
        let g = self.region(name)?;
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..g.height {
            for x in 0..g.width {
                if g.get(y, x) > 0.5 {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        (n > 0.0).then(|| (sy / n, sx / n))
    }
}

/// Binary grid built in normalised `[0, 1]` image coordinates.
struct Canvas {
    h: usize,
    w: usize,
}

impl Canvas {
    fn shape(&self, inside: impl Fn(f64, f64) -> bool) -> MaskGrid {
        MaskGrid::from_fn(self.h, self.w, |y, x| {
            let v = (y as f64 + 0.5) / self.h as f64;
            let u = (x as f64 + 0.5) / self.w as f64;
            f64::from(u8::from(inside(u, v)))
        })
    }

    /// Axis-aligned ellipse; radii never shrink below ~0.6 px so small parts
    /// keep at least their centre pixel.
    fn ellipse(&self, cx: f64, cy: f64, rx: f64, ry: f64) -> MaskGrid {
        let rx = rx.max(0.6 / self.w as f64);
        let ry = ry.max(0.6 / self.h as f64);
        self.shape(|u, v| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0)
    }
}

fn minus(a: &MaskGrid, b: &MaskGrid) -> MaskGrid {
    zip(a, b, |p, q| p && !q)
}

fn and(a: &MaskGrid, b: &MaskGrid) -> MaskGrid {
    zip(a, b, |p, q| p && q)
}

fn or(a: &MaskGrid, b: &MaskGrid) -> MaskGrid {
    zip(a, b, |p, q| p || q)
}

fn zip(a: &MaskGrid, b: &MaskGrid, f: impl Fn(bool, bool) -> bool) -> MaskGrid {
    MaskGrid {
        height: a.height,
        width: a.width,
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(p, q)| f64::from(u8::from(f(*p > 0.5, *q > 0.5))))
            .collect(),
    }
}

fn jitter<R: Rng>(rng: &mut R, base: f64, spread: f64) -> f64 {
    base + rng.random_range(-spread..=spread)
}

fn color<R: Rng>(rng: &mut R, base: [u8; 3], spread: i32) -> [i32; 3] {
    base.map(|c| i32::from(c) + rng.random_range(-spread..=spread))
}

fn shade(c: [i32; 3], delta: i32) -> [i32; 3] {
    c.map(|v| v + delta)
}

fn mix(a: [i32; 3], b: [i32; 3], t: f64) -> [i32; 3] {
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = (f64::from(a[i]) * (1.0 - t) + f64::from(b[i]) * t).round() as i32;
    }
    out
}

const SKIN: [[u8; 3]; 5] = [
    [241, 204, 177],
    [224, 172, 138],
    [198, 140, 100],
    [160, 105, 70],
    [110, 72, 48],
];
const HAIR: [[u8; 3]; 5] = [
    [30, 24, 20],
    [85, 55, 35],
    [170, 130, 70],
    [140, 60, 30],
    [200, 195, 185],
];
const IRIS: [[u8; 3]; 4] = [[70, 45, 25], [60, 110, 160], [80, 120, 70], [40, 40, 40]];

fn pick<R: Rng>(rng: &mut R, table: &[[u8; 3]]) -> [u8; 3] {
    table[rng.random_range(0..table.len())]
}

fn random_color<R: Rng>(rng: &mut R) -> [i32; 3] {
    [0; 3].map(|_| rng.random_range(20..=235))
}

/// Draws a frontal cartoon face. The same seed always gives the same image
/// and layout; size is `size×size`.
pub fn render_face(seed: u64, size: usize) -> (RgbImage, FaceLayout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Canvas { h: size, w: size };

    let fx = jitter(&mut rng, 0.5, 0.02);
    let fy = jitter(&mut rng, 0.5, 0.02);
    let frx = jitter(&mut rng, 0.27, 0.02);
    let fry = jitter(&mut rng, 0.33, 0.02);
    let eye_dx = jitter(&mut rng, 0.11, 0.01);
    let eye_y = fy - jitter(&mut rng, 0.11, 0.01);
    let mouth_y = fy + jitter(&mut rng, 0.18, 0.01);
    let has_teeth = rng.random_bool(0.6);
    let has_glasses = rng.random_bool(0.3);
    let has_earring = rng.random_bool(0.3);
    let has_necklace = rng.random_bool(0.3);
    let has_hat = rng.random_bool(0.25);

    let face = c.ellipse(fx, fy, frx, fry);
    let eye = or(
        &c.ellipse(fx - eye_dx, eye_y, 0.055, 0.028),
        &c.ellipse(fx + eye_dx, eye_y, 0.055, 0.028),
    );
    let eyelid = minus(
        &or(
            &c.ellipse(fx - eye_dx, eye_y - 0.03, 0.055, 0.016),
            &c.ellipse(fx + eye_dx, eye_y - 0.03, 0.055, 0.016),
        ),
        &eye,
    );
    let eyebrow = or(
        &c.ellipse(fx - eye_dx, eye_y - 0.075, 0.065, 0.016),
        &c.ellipse(fx + eye_dx, eye_y - 0.075, 0.065, 0.016),
    );
    let nose = c.ellipse(fx, fy + 0.01, 0.035, 0.085);
    let nostril = or(
        &c.ellipse(fx - 0.022, fy + 0.08, 0.012, 0.01),
        &c.ellipse(fx + 0.022, fy + 0.08, 0.012, 0.01),
    );
    let mouth = c.ellipse(fx, mouth_y, 0.1, 0.04);
    let band = 0.6 / size as f64;
    let teeth = has_teeth.then(|| and(&mouth, &c.shape(|_, v| (v - mouth_y).abs() <= band)));
    let lip = match &teeth {
        Some(t) => minus(&mouth, t),
        None => mouth.clone(),
    };
    let cheek = minus(
        &and(
            &or(
                &c.ellipse(fx - 0.16, fy + 0.06, 0.06, 0.05),
                &c.ellipse(fx + 0.16, fy + 0.06, 0.06, 0.05),
            ),
            &face,
        ),
        &nose,
    );
    let chin = and(&c.ellipse(fx, fy + fry - 0.05, 0.08, 0.04), &face);
    let jaw = minus(
        &minus(
            &and(&face, &c.shape(|_, v| v > fy + 0.12)),
            &c.ellipse(fx, fy, frx - 0.045, fry - 0.045),
        ),
        &chin,
    );
    let forehead = and(&face, &c.shape(|_, v| v < eye_y - 0.1));
    let mut parts = or(&or(&eye, &eyebrow), &or(&nose, &mouth));
    parts = or(&parts, &or(&nostril, &eyelid));
    let skin = minus(&face, &parts);

    let ear_x = frx + 0.015;
    let ear = minus(
        &or(
            &c.ellipse(fx - ear_x, fy - 0.03, 0.03, 0.07),
            &c.ellipse(fx + ear_x, fy - 0.03, 0.03, 0.07),
        ),
        &face,
    );
    let earring = has_earring.then(|| {
        or(
            &c.ellipse(fx - ear_x, fy + 0.05, 0.014, 0.018),
            &c.ellipse(fx + ear_x, fy + 0.05, 0.014, 0.018),
        )
    });
    let hat = has_hat.then(|| {
        let top = fy - fry;
        and(
            &c.ellipse(fx, top + 0.02, frx + 0.08, 0.1),
            &c.shape(|_, v| v < top + 0.06),
        )
    });
    let mut hair = minus(
        &and(
            &c.ellipse(fx, fy - 0.05, frx + 0.06, fry + 0.05),
            &c.shape(|_, v| v < fy),
        ),
        &or(&face, &ear),
    );
    if let Some(h) = &hat {
        hair = minus(&hair, h);
    }
    let cloth = c.ellipse(0.5, 1.12, 0.42, 0.24);
    let neck_top = fy + fry - 0.08;
    let neck = minus(
        &minus(
            &c.shape(|u, v| (u - fx).abs() <= 0.085 && v >= neck_top),
            &face,
        ),
        &cloth,
    );
    let necklace = has_necklace.then(|| {
        let y = 1.12 - 0.24;
        minus(&c.ellipse(fx, y, 0.1, 0.025), &c.ellipse(fx, y - 0.012, 0.075, 0.014))
    });
    let glasses = has_glasses.then(|| {
        let ring = |cx: f64| {
            minus(
                &c.ellipse(cx, eye_y, 0.085, 0.06),
                &c.ellipse(cx, eye_y, 0.062, 0.04),
            )
        };
        let bridge = c.shape(|u, v| (u - fx).abs() <= eye_dx - 0.06 && (v - eye_y).abs() <= 0.012);
        or(&or(&ring(fx - eye_dx), &ring(fx + eye_dx)), &bridge)
    });

    let by_name: [(&str, Option<MaskGrid>); NUM_REGIONS] = [
        ("facial skin", Some(skin)),
        ("nose", Some(nose)),
        ("eye", Some(eye)),
        ("eyebrow", Some(eyebrow)),
        ("ear", Some(ear)),
        ("mouth", Some(mouth)),
        ("lip", Some(lip)),
        ("teeth", teeth),
        ("hair", Some(hair)),
        ("neck", Some(neck)),
        ("forehead", Some(forehead)),
        ("chin", Some(chin)),
        ("cheek", Some(cheek)),
        ("jaw", Some(jaw)),
        ("nostril", Some(nostril)),
        ("eyelid", Some(eyelid)),
        ("eyeglasses", glasses),
        ("earring", earring),
        ("necklace", necklace),
        ("cloth", Some(cloth)),
        ("hat", hat),
    ];
    let regions = by_name
        .into_iter()
        .enumerate()
        .map(|(i, (name, g))| {
            debug_assert_eq!(name, DEFAULT_REGIONS[i]);
            g.filter(|g| g.count_on() > 0)
        })
        .collect();
    let layout = FaceLayout {
        height: size,
        width: size,
        regions,
    };

    let base = pick(&mut rng, &SKIN);
    let skin_c = color(&mut rng, base, 10);
    let base = pick(&mut rng, &HAIR);
    let hair_c = color(&mut rng, base, 12);
    let base = pick(&mut rng, &IRIS);
    let iris_c = color(&mut rng, base, 10);
    let lip_c = color(&mut rng, [185, 80, 85], 20);
    let background = random_color(&mut rng);
    let cloth_c = random_color(&mut rng);
    let hat_c = random_color(&mut rng);
    let metal = color(&mut rng, [212, 175, 55], 30);
    let frame = color(&mut rng, [40, 40, 45], 20);

    let mut img = vec![[0i32; 3]; size * size];
    img.fill(background);
    let paint = |img: &mut Vec<[i32; 3]>, name: &str, col: [i32; 3]| {
        if let Some(g) = layout.region(name) {
            for (p, v) in img.iter_mut().zip(&g.values) {
                if *v > 0.5 {
                    *p = col;
                }
            }
        }
    };
    paint(&mut img, "cloth", cloth_c);
    paint(&mut img, "neck", shade(skin_c, -18));
    paint(&mut img, "hair", hair_c);
    paint(&mut img, "hat", hat_c);
    paint(&mut img, "ear", shade(skin_c, -8));
    paint(&mut img, "earring", metal);
    for (p, v) in img.iter_mut().zip(&face.values) {
        if *v > 0.5 {
            *p = skin_c;
        }
    }
    paint(&mut img, "forehead", shade(skin_c, 8));
    paint(&mut img, "cheek", mix(skin_c, lip_c, 0.25));
    paint(&mut img, "jaw", shade(skin_c, -12));
    paint(&mut img, "chin", shade(skin_c, -5));
    paint(&mut img, "nose", shade(skin_c, -15));
    paint(&mut img, "nostril", shade(skin_c, -70));
    paint(&mut img, "eyelid", shade(skin_c, -25));
    paint(&mut img, "eye", [235, 235, 230]);
    let dx_px = eye_dx * size as f64;
    for side in [-1.0, 1.0] {
        let cx = ((fx * size as f64 + side * dx_px) as usize).min(size - 1);
        let cy = ((eye_y * size as f64) as usize).min(size - 1);
        img[cy * size + cx] = iris_c;
    }
    paint(&mut img, "eyebrow", shade(hair_c, -15));
    paint(&mut img, "lip", lip_c);
    paint(&mut img, "teeth", [240, 238, 225]);
    paint(&mut img, "eyeglasses", frame);
    paint(&mut img, "necklace", metal);

    let mut out = RgbImage::new(size as u32, size as u32);
    for (i, px) in img.iter().enumerate() {
        let grain = rng.random_range(-6..=6);
        let rgb = px.map(|v| (v + grain).clamp(0, 255) as u8);
        out.put_pixel((i % size) as u32, (i / size) as u32, Rgb(rgb));
    }
    (out, layout)
}

/// Draws a forgery mask from a face layout.
///
/// With probability `full_face_prob` the mask is the union of every present
/// region. Otherwise `k` is uniform in `k_min..=min(k_max, available)` and
/// `k` distinct regions are merged. Regions come back in registry order.
pub fn sample_mask<R: Rng + ?Sized>(
    layout: &FaceLayout,
    rng: &mut R,
    full_face_prob: f64,
    k_min: usize,
    k_max: usize,
) -> Result<(MaskGrid, Vec<String>, bool)> {
    let present = layout.present();
    if k_min == 0 || k_min > k_max {
        return Err(contract_err!("region count range {k_min}..={k_max} is empty"));
    }
    if present.len() < k_min {
        return Err(contract_err!(
            "layout has {} regions, fewer than k_min = {k_min}",
            present.len()
        ));
    }
    let full = rng.random_bool(full_face_prob.clamp(0.0, 1.0));
    let mut chosen = if full {
        present
    } else {
        let hi = k_max.min(present.len());
        let k = rng.random_range(k_min..=hi);
        rand::seq::index::sample(rng, present.len(), k)
            .into_iter()
            .map(|j| present[j])
            .collect()
    };
    chosen.sort_unstable();
    let names = chosen.iter().map(|&i| DEFAULT_REGIONS[i].to_string()).collect();
    Ok((layout.union(&chosen), names, full))
}
