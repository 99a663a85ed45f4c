mod common;

use std::collections::BTreeSet;
use std::path::Path;

use aplsam_core::episodes::io::{overlay, read_image, read_mask, write_image, write_mask};
use aplsam_core::episodes::synth::{shadow_term, write_dataset, MAX_ATTEMPTS};
use aplsam_core::episodes::{
    default_classes, generate_synthetic, load_dataset, sample_episode, ClassParams, SyntheticConfig,
};
use aplsam_core::{rng, Error, Tensor};
use common::*;

fn write_pair(root: &Path, class: &str, name: &str, seed: u64, size: (usize, usize), mask_size: (usize, usize)) {
    let (img, msk) = (root.join(class).join("images"), root.join(class).join("masks"));
    std::fs::create_dir_all(&img).unwrap();
    std::fs::create_dir_all(&msk).unwrap();
    write_image(&img.join(name), &uniform(&[size.0, size.1], seed)).unwrap();
    let m = uniform(&[mask_size.0, mask_size.1], seed + 100).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    write_mask(&msk.join(name), &m).unwrap();
}

#[test]
fn empty_root_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
    std::fs::create_dir_all(dir.path().join("a/images")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::EmptyDataset(_))));
}

#[test]
fn loads_two_classes_of_three_pairs() {
    let dir = tempfile::tempdir().unwrap();
    for (k, class) in ["beta", "alpha"].iter().enumerate() {
        for i in 0..3 {
            write_pair(dir.path(), class, &format!("s{i}.png"), (k * 10 + i) as u64, (8, 8), (8, 8));
        }
    }
    std::fs::write(dir.path().join("README.txt"), "not a class").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.class_names(), vec!["alpha", "beta"]);
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.image_size().unwrap(), 8);
    let s = &ds.classes["alpha"][1];
    assert_eq!(s.name, "s1");
    assert_eq!(s.image.shape(), &[1, 8, 8]);
    assert_eq!(s.mask.shape(), &[8, 8]);
}

#[test]
fn mismatched_dimensions_name_both_files() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "c", "x.png", 1, (8, 8), (4, 8));
    match load_dataset(dir.path()) {
        Err(e @ Error::DimensionMismatch { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("images/x.png") && msg.contains("masks/x.png"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_mask_and_grey_mask_values() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "c", "x.png", 1, (8, 8), (8, 8));
    std::fs::remove_file(dir.path().join("c/masks/x.png")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::MissingMask(_))));

    let path = dir.path().join("c/masks/x.png");
    let mut img = image::GrayImage::new(8, 8);
    img.put_pixel(3, 2, image::Luma([128]));
    img.save(&path).unwrap();
    assert!(matches!(read_mask(&path), Err(Error::InvalidMaskValue { value: 128, .. })));
}

#[test]
fn image_and_mask_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = uniform(&[9, 7], 3).map(|v| if v > 0.4 { 1.0 } else { 0.0 });
    let mp = dir.path().join("m.png");
    write_mask(&mp, &m).unwrap();
    assert_eq!(read_mask(&mp).unwrap(), m);
    let x = uniform(&[9, 7], 4);
    let ip = dir.path().join("i.png");
    write_image(&ip, &x).unwrap();
    assert!(read_image(&ip).unwrap().max_abs_diff(&x) <= 1.0 / 510.0 + 1e-12);
}

#[test]
fn overlay_blends_foreground_toward_red() {
    let img = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    let mask = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let o = overlay(&img, &mask).unwrap();
    assert_eq!(o.dimensions(), (2, 1));
    assert_eq!(o.get_pixel(0, 0).0, [128, 0, 0]);
    assert_eq!(o.get_pixel(1, 0).0, [255, 255, 255]);
}

fn two_sample_dataset() -> (tempfile::TempDir, aplsam_core::episodes::Dataset) {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..2 {
        write_pair(dir.path(), "only", &format!("{i}.png"), i, (8, 8), (8, 8));
    }
    write_pair(dir.path(), "single", "0.png", 9, (8, 8), (8, 8));
    let ds = load_dataset(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn episodes_use_both_orders_and_are_deterministic() {
    let (_dir, ds) = two_sample_dataset();
    let classes: BTreeSet<String> = ["only".to_string()].into();
    let mut r = rng::stream(1, 0);
    let mut orders = BTreeSet::new();
    for _ in 0..50 {
        let ep = sample_episode(&ds, &classes, &mut r).unwrap();
        assert_ne!(ep.support_index, ep.query_index);
        let q = &ds.classes["only"][ep.query_index];
        assert_eq!(ep.query_gt, q.mask);
        orders.insert((ep.support_index, ep.query_index));
    }
    assert_eq!(orders.len(), 2);
    let draw = |seed| {
        let mut r = rng::stream(seed, 0);
        (0..10)
            .map(|_| {
                let e = sample_episode(&ds, &classes, &mut r).unwrap();
                (e.support_index, e.query_index)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    let lonely: BTreeSet<String> = ["single".to_string()].into();
    assert!(matches!(
        sample_episode(&ds, &lonely, &mut r),
        Err(Error::TooFewSamples { count: 1, .. })
    ));
}

#[test]
fn class_choice_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["a", "b"] {
        for i in 0..2 {
            write_pair(dir.path(), c, &format!("{i}.png"), i, (8, 8), (8, 8));
        }
    }
    let ds = load_dataset(dir.path()).unwrap();
    let classes: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
    let mut r = rng::stream(11, 0);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| sample_episode(&ds, &classes, &mut r).unwrap().class == "a")
        .count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((hits - n as f64 / 2.0).abs() < 3.0 * sigma, "{hits}");
}

fn clean() -> SyntheticConfig {
    SyntheticConfig { noise: 0.0, scanline: 0.0, shadow: 0.0, ..Default::default() }
}

#[test]
fn clean_single_blob_image_equals_its_mask() {
    let class = ClassParams { count: (1, 1), ..default_classes()[2].clone() };
    let s = generate_synthetic(&clean(), &class, 4).unwrap();
    assert_eq!(s.image, s.mask);
    assert!(s.shadow.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shadow_is_a_forward_difference() {
    let s = generate_synthetic(&SyntheticConfig::default(), &default_classes()[1], 6).unwrap();
    let n = 64;
    let again = shadow_term(&s.elevation, 0.6);
    for r in 0..n {
        for c in 0..n {
            let want = if c + 1 < n { 0.6 * (s.elevation.at2(r, c + 1) - s.elevation.at2(r, c)) } else { 0.0 };
            assert!((s.shadow.at2(r, c) - want).abs() < 1e-12);
            assert_eq!(again.at2(r, c), s.shadow.at2(r, c));
        }
    }
}

#[test]
fn synthetic_samples_are_reproducible_and_bounded() {
    let cfg = SyntheticConfig::default();
    for class in default_classes() {
        let a = generate_synthetic(&cfg, &class, 17).unwrap();
        let b = generate_synthetic(&cfg, &class, 17).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let frac = a.mask.sum() / 4096.0;
        assert!(frac >= cfg.min_foreground && frac < 0.9);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let class = &default_classes()[0];
    let differing = (0..100)
        .filter(|&s| {
            generate_synthetic(&cfg, class, s).unwrap().mask
                != generate_synthetic(&cfg, class, s + 1000).unwrap().mask
        })
        .count();
    assert_eq!(differing, 100);
}

#[test]
fn impossible_foreground_fails_generation() {
    let cfg = SyntheticConfig { min_foreground: 0.95, ..Default::default() };
    assert!(matches!(
        generate_synthetic(&cfg, &default_classes()[0], 1),
        Err(Error::GenerationFailed(MAX_ATTEMPTS))
    ));
    assert!(generate_synthetic(&SyntheticConfig { image_size: 48, ..Default::default() }, &default_classes()[0], 1).is_err());
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { image_size: 16, ..Default::default() };
    let counts = write_dataset(dir.path(), &cfg, &default_classes()[..2], 3, 1).unwrap();
    assert_eq!(counts.values().sum::<usize>(), 6);
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.len(), 6);
    assert!(dir.path().join("grains/images/grains_002.png").is_file());
}
