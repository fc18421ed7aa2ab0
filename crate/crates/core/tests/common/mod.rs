#![allow(dead_code)]

pub mod grad;

use std::fs;
use std::path::Path;

use cardionet::model::CardioNetConfig;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASS_DIRS: [&str; 3] = ["Large", "Normal", "Small"];

/// Relative error with an absolute floor, so entries whose true gradient is
/// essentially zero are compared on an absolute scale instead of amplifying
/// rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn small_config() -> CardioNetConfig {
    CardioNetConfig {
        input_size: 16,
        conv_channels: vec![2, 3, 4, 5],
        fc_widths: vec![6, 5, 4],
        ..CardioNetConfig::default()
    }
}

pub fn tiny_config() -> CardioNetConfig {
    CardioNetConfig {
        input_size: 16,
        conv_channels: vec![2, 2, 2, 2],
        fc_widths: vec![4, 4, 4],
        ..CardioNetConfig::default()
    }
}

/// Dark noisy background with a bright square whose position encodes the
/// class: top-left for Large, center for Normal, bottom-right for Small.
pub fn pattern_image(class: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let side = (size / 3).max(2);
    let origin = match class {
        0 => size / 10,
        1 => (size - side) / 2,
        _ => size - side - size / 10,
    };
    let inside = |v: u32| v >= origin && v < origin + side;
    RgbImage::from_fn(size, size, |x, y| {
        let v = if inside(x) && inside(y) {
            rng.random_range(200..=255)
        } else {
            rng.random_range(0..=60)
        };
        Rgb([v, v, v])
    })
}

/// Labeled splits of pattern images plus an unlabeled test split.
pub fn write_pattern_dataset(
    root: &Path,
    size: u32,
    train_per_class: usize,
    valid_per_class: usize,
    test_count: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (split, per_class) in [("train", train_per_class), ("valid", valid_per_class)] {
        for (class, dir) in CLASS_DIRS.iter().enumerate() {
            let d = root.join(split).join(dir);
            fs::create_dir_all(&d).unwrap();
            for i in 0..per_class {
                pattern_image(class, size, &mut rng)
                    .save(d.join(format!("{dir}_{i:03}.png")))
                    .unwrap();
            }
        }
    }
    let d = root.join("test");
    fs::create_dir_all(&d).unwrap();
    for i in 0..test_count {
        pattern_image(i % 3, size, &mut rng)
            .save(d.join(format!("img_{i:04}.png")))
            .unwrap();
    }
}

/// A tree with the given per-class counts of 4x4 images.
pub fn write_count_tree(root: &Path, train: [usize; 3], valid: [usize; 3], test: usize) {
    let mut bytes = Vec::new();
    RgbImage::from_pixel(4, 4, Rgb([90, 90, 90]))
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .unwrap();
    for (split, counts) in [("train", train), ("valid", valid)] {
        for (dir, n) in CLASS_DIRS.iter().zip(counts) {
            let d = root.join(split).join(dir);
            fs::create_dir_all(&d).unwrap();
            for i in 0..n {
                fs::write(d.join(format!("{i:04}.png")), &bytes).unwrap();
            }
        }
    }
    let d = root.join("test");
    fs::create_dir_all(&d).unwrap();
    for i in 0..test {
        fs::write(d.join(format!("{i:04}.png")), &bytes).unwrap();
    }
}
