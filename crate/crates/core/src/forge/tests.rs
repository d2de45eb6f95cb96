use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prompter::{extract_region_labels, Registry, DEFAULT_REGIONS};

#[test]
fn render_is_deterministic() {
    let (a, la) = render_face(17, 48);
    let (b, lb) = render_face(17, 48);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, _) = render_face(18, 48);
    assert_ne!(a, c);
}

#[test]
fn layouts_are_frontal_and_in_bounds() {
    for seed in 0..100 {
        let (img, layout) = render_face(seed, 48);
        assert_eq!(img.dimensions(), (48, 48));
        let eye = layout.centroid("eye").unwrap();
        let nose = layout.centroid("nose").unwrap();
        let brow = layout.centroid("eyebrow").unwrap();
        assert!(eye.0 < nose.0, "seed {seed}");
        assert!(brow.0 < eye.0, "seed {seed}");
        let mut present = 0;
        for i in 0..DEFAULT_REGIONS.len() {
            if let Some(g) = layout.region_at(i) {
                present += 1;
                assert_eq!((g.height, g.width), (48, 48));
                assert!(g.is_binary());
                assert!(g.count_on() > 0);
            }
        }
        assert!(present >= 16, "seed {seed}: only {present} regions");
        // lip lies inside the mouth
        let (mouth, lip) = (layout.region("mouth").unwrap(), layout.region("lip").unwrap());
        assert!(lip.values.iter().zip(&mouth.values).all(|(l, m)| *l <= *m));
    }
}

#[test]
fn forced_mask_branches() {
    let (_, layout) = render_face(3, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, regions, full) = sample_mask(&layout, &mut rng, 1.0, 1, 11).unwrap();
    assert!(full);
    assert_eq!(m, layout.union(&layout.present()));
    assert_eq!(regions.len(), layout.present().len());

    for _ in 0..20 {
        let (m, regions, full) = sample_mask(&layout, &mut rng, 0.0, 1, 1).unwrap();
        assert!(!full);
        assert_eq!(regions.len(), 1);
        assert_eq!(&m, layout.region(&regions[0]).unwrap());
    }
    assert!(matches!(
        sample_mask(&layout, &mut rng, 0.0, 30, 40),
        Err(Error::Contract(_))
    ));
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskGrid {
    MaskGrid::from_fn(h, w, |_, _| f64::from(u8::from(rng.random_bool(0.5))))
}

#[test]
fn compositing_identities() {
    let (img, _) = render_face(5, 32);
    for kind in [PerturbKind::Blur, PerturbKind::TextureSwap, PerturbKind::GeometryWarp] {
        let spec = PerturbationSpec { kind, strength: 0.8 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = composite_forgery(&img, &MaskGrid::zeros(32, 32), &spec, &mut rng).unwrap();
        assert_eq!(zero, img);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = composite_forgery(&img, &MaskGrid::filled(32, 32, 1.0), &spec, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(full, perturb(&img, &spec, &mut rng));
    }
}

#[test]
fn compositing_changes_only_masked_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (img, _) = render_face(6, 32);
    let m = random_mask(&mut rng, 32, 32);
    let spec = PerturbationSpec { kind: PerturbKind::Noise, strength: 1.0 };
    let mut r1 = ChaCha8Rng::seed_from_u64(4);
    let out = composite_forgery(&img, &m, &spec, &mut r1).unwrap();
    let mut r2 = ChaCha8Rng::seed_from_u64(4);
    let generated = perturb(&img, &spec, &mut r2);
    for (x, y, px) in out.enumerate_pixels() {
        let want = if m.get(y as usize, x as usize) > 0.5 {
            generated.get_pixel(x, y)
        } else {
            img.get_pixel(x, y)
        };
        assert_eq!(px, want);
    }
    let wrong = MaskGrid::zeros(31, 32);
    assert!(matches!(
        composite_forgery(&img, &wrong, &spec, &mut r1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn caption_templates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = synth_caption(&["nose".to_string()], PerturbKind::Blur, &mut rng);
    assert!(c.starts_with("The nose "), "{c}");
    assert!(["smooth", "texture", "smeared"].iter().any(|w| c.contains(w)), "{c}");
}

#[test]
fn captions_round_trip_through_label_extraction() {
    let reg = Registry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let all: Vec<String> = DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect();
    for trial in 0..500 {
        let k = 1 + trial % 21;
        let mut idx = rand::seq::index::sample(&mut rng, 21, k).into_vec();
        idx.sort_unstable();
        let regions: Vec<String> = idx.iter().map(|&i| all[i].clone()).collect();
        let kind = [
            PerturbKind::Blur,
            PerturbKind::Noise,
            PerturbKind::ColorShift,
            PerturbKind::TextureSwap,
            PerturbKind::GeometryWarp,
        ][trial % 5];
        let caption = synth_caption(&regions, kind, &mut rng);
        assert!(crate::instruct::word_count(&caption) <= MAX_CAPTION_WORDS, "{caption}");
        assert_eq!(reg.names_where(&extract_region_labels(&caption, &reg)), regions, "{caption}");
        for r in &regions {
            assert_eq!(caption.matches(&format!(" {r} ")).count() + caption.matches(&format!(" {r},")).count()
                + caption.matches(&format!(" {r}.")).count(), 1, "{r} in {caption}");
        }
    }
}

#[test]
fn triplets_are_consistent_and_reproducible() {
    let cfg = ForgeConfig::default();
    let reg = Registry::default();
    for i in 0..30 {
        let seed = triplet_seed(7, i);
        let t = generate_triplet(triplet_id(i as usize), seed, &cfg).unwrap();
        assert_eq!(t, generate_triplet(triplet_id(i as usize), seed, &cfg).unwrap());
        assert!(!t.regions.is_empty());
        assert!(t.mask.count_on() > 0);
        assert!(t.annotation_seconds >= 60);
        assert_eq!(reg.names_where(&extract_region_labels(&t.caption, &reg)), t.regions);
    }
    assert_ne!(triplet_seed(7, 0), triplet_seed(7, 1));
    assert_ne!(triplet_seed(7, 0), triplet_seed(8, 0));
}

#[test]
fn triplet_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ForgeConfig::default();
    let mut entries = Vec::new();
    let mut originals = Vec::new();
    for i in 0..20 {
        let t = generate_triplet(triplet_id(i), triplet_seed(1, i as u64), &cfg).unwrap();
        entries.push(write_triplet(dir.path(), &t).unwrap());
        originals.push(t);
    }
    write_manifest(dir.path(), &entries).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(back, entries);
    assert!(dangling_paths(dir.path(), &back).is_empty());
    for (e, t) in back.iter().zip(&originals) {
        assert_eq!(&read_triplet(dir.path(), e).unwrap(), t);
    }

    let path = dir.path().join(&entries[0].image);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_triplet(dir.path(), &entries[0]), Err(Error::Decode { .. })));
    fs::remove_file(dir.path().join(&entries[1].mask)).unwrap();
    assert!(matches!(read_triplet(dir.path(), &entries[1]), Err(Error::Io { .. })));
    assert_eq!(dangling_paths(dir.path(), &back).len(), 1);
}

#[test]
fn manifest_line_shape() {
    let cfg = ForgeConfig::default();
    let t = generate_triplet("t00003".into(), 99, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let e = write_triplet(dir.path(), &t).unwrap();
    let v: serde_json::Value = serde_json::to_value(&e).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["id", "image", "mask", "caption", "method", "regions", "seed", "annotation_seconds"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(v["image"], "img/t00003.png");
    assert!(["swap", "inpaint-T", "inpaint-D"].contains(&v["method"].as_str().unwrap()));
}

#[test]
fn image_tensor_range() {
    let (img, _) = render_face(0, 16);
    let t = image_to_tensor(&img);
    assert_eq!(t.shape(), &[3, 16, 16]);
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let px = img.get_pixel(3, 5);
    assert_eq!(t.data()[16 * 16 + 5 * 16 + 3], f64::from(px[1]) / 127.5 - 1.0);
}

