mod support;

use proptest::prelude::*;
use rand::Rng;
use steeradv_core::data::{
    bilinear_resize, generate_synthetic, kfold_split, load_steering_log, preprocess, read_image, tensor_to_image,
    write_ppm, write_steering_log, Direction, PreprocessConfig, RgbImage, SynthConfig,
};
use steeradv_core::{l2_distance, Tensor};

fn checkerboard(size: usize, block: usize) -> RgbImage {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let v = if (y / block + x / block).is_multiple_of(2) { 255 } else { 0 };
            pixels.extend([v, v, v]);
        }
    }
    RgbImage::new(size, size, pixels).unwrap()
}

#[test]
fn halving_a_block_checkerboard_gives_a_pixel_checkerboard() {
    // every destination centre sits midway between two same-coloured sources
    let out = bilinear_resize(&checkerboard(16, 2), 8, 8);
    let expected = checkerboard(8, 1);
    for (a, b) in out.iter().zip(&expected.pixels) {
        assert_eq!(*a, *b as f64);
    }
}

#[test]
fn halving_a_pixel_checkerboard_gives_uniform_grey() {
    let out = bilinear_resize(&checkerboard(16, 1), 8, 8);
    assert!(out.iter().all(|v| (v - 127.5).abs() < 1e-12));
}

#[test]
fn resize_to_same_size_is_identity() {
    let img = checkerboard(6, 1);
    let out = bilinear_resize(&img, 6, 6);
    assert!(out.iter().zip(&img.pixels).all(|(a, b)| *a == *b as f64));
}

#[test]
fn crop_keeps_bottom_rows() {
    // top half white, bottom half black: cropping to the bottom leaves black
    let (w, h) = (8, 8);
    let pixels = (0..w * h * 3).map(|i| if i < w * h * 3 / 2 { 255 } else { 0 }).collect();
    let img = RgbImage::new(w, h, pixels).unwrap();
    let cfg = PreprocessConfig {
        keep_rows: Some(4),
        height: 4,
        width: 8,
    };
    let t = preprocess(&img, &cfg).unwrap();
    assert_eq!(t.shape(), &[4, 8, 3]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn adversarial_ppm_round_trip_stays_within_quantization_bound() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = support::rng(3);
    let (h, w) = (16, 16);
    let d = (h * w * 3) as f64;
    let bound = d.sqrt() / 510.0;
    for i in 0..20 {
        let orig = Tensor::<f32>::from_fn(&[h, w, 3], |_| r.random_range(0u8..=255) as f32 / 255.0);
        let adv = Tensor::<f32>::from_fn(&[h, w, 3], |j| (orig.data()[j] + r.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
        let exact = l2_distance(&orig, &adv).unwrap();
        let path = dir.path().join(format!("adv_{i}.ppm"));
        write_ppm(&path, &tensor_to_image(&adv).unwrap()).unwrap();
        let cfg = PreprocessConfig {
            keep_rows: None,
            height: h,
            width: w,
        };
        let back = preprocess(&read_image(&path).unwrap(), &cfg).unwrap();
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let reread = l2_distance(&orig, &back).unwrap();
        assert!((reread - exact).abs() <= bound, "{reread} vs {exact}, bound {bound}");
    }
}

#[test]
fn steering_log_loads_written_frames_and_scales_angles() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::filled(64, 48, [10, 20, 30]);
    write_ppm(dir.path().join("a.ppm"), &img).unwrap();
    write_ppm(dir.path().join("b.ppm"), &img).unwrap();
    let log = dir.path().join("log.csv");
    write_steering_log(&log, [("a.ppm", 5.0), ("gone.ppm", 0.0), ("b.ppm", -1.0)]).unwrap();
    let cfg = PreprocessConfig {
        keep_rows: Some(40),
        height: 16,
        width: 16,
    };
    let loaded = load_steering_log(&log, dir.path(), &cfg).unwrap();
    assert_eq!(loaded.samples.len(), 2);
    assert_eq!(loaded.missing_count(), 1);
    assert!((loaded.samples[0].scaled_angle - 0.2).abs() < 1e-12);
    assert_eq!(loaded.samples[0].label, Direction::Right);
    assert_eq!(loaded.samples[1].label, Direction::Straight);
    assert_eq!(loaded.samples[0].image.shape(), &[16, 16, 3]);
}

#[test]
fn synthetic_samples_are_reproducible_and_in_range() {
    let a = generate_synthetic(&SynthConfig::new(12, 32, 9)).unwrap();
    let b = generate_synthetic(&SynthConfig::new(12, 32, 9)).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert_eq!(s.image.shape(), &[32, 32, 3]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((-2.05..=1.9).contains(&s.scaled_angle));
    }
}

proptest! {
    #[test]
    fn kfold_partitions_every_index_once(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0usize; n];
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.validation.len(), n);
            for &i in &f.validation {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.validation).copied().collect();
            all.sort_unstable();
            prop_assert!(all.iter().enumerate().all(|(i, &v)| i == v));
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
