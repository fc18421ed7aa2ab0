//! Dataset ingestion and batching.
//!
//! Expected layout under a dataset root:
//!
//! ```text
//! <root>/train/{Large,Normal,Small}/*.{png,jpg}
//! <root>/valid/{Large,Normal,Small}/*.{png,jpg}
//! <root>/test/*.{png,jpg}
//! ```
//!
//! Images are decoded to RGB (grayscale is replicated across channels),
//! scaled from 8-bit to `[0, 1]` and bilinearly resized to a square of
//! `image_size` pixels.

mod resize;
mod vhs;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use resize::resize_bilinear;
pub use vhs::{vhs_to_class, VhsScore, LARGE_ABOVE, SMALL_BELOW};

pub const NUM_CLASSES: usize = 3;
pub const DEFAULT_IMAGE_SIZE: usize = 75;
pub const CHANNELS: usize = 3;

/// Heart-size class. The index order follows the alphabetical folder names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Large = 0,
    Normal = 1,
    Small = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] =
        [ClassLabel::Large, ClassLabel::Normal, ClassLabel::Small];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Input(format!("no class with index {index}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Large => "Large",
            ClassLabel::Normal => "Normal",
            ClassLabel::Small => "Small",
        }
    }

    /// Human-readable `Large=0, Normal=1, Small=2`.
    pub fn mapping() -> String {
        Self::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), c.index()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown class name {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 3] = [SplitRole::Train, SplitRole::Valid, SplitRole::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Valid => "valid",
            SplitRole::Test => "test",
        }
    }

    pub fn is_labeled(self) -> bool {
        !matches!(self, SplitRole::Test)
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitRole::Train),
            "valid" | "val" | "validation" => Ok(SplitRole::Valid),
            "test" => Ok(SplitRole::Test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

/// One decoded image, `[3, S, S]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor<f32>,
    pub label: Option<ClassLabel>,
    pub path: PathBuf,
}

impl LabeledSample {
    /// File name without directories.
    pub fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub samples: Vec<LabeledSample>,
    /// Per-class counts, indexed by [`ClassLabel::index`]. All zero for the
    /// unlabeled test split.
    pub class_counts: [usize; NUM_CLASSES],
    /// Files that were skipped, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetSplit {
    /// Assemble a split from already decoded samples.
    pub fn from_samples(role: SplitRole, samples: Vec<LabeledSample>) -> Result<Self> {
        let mut class_counts = [0; NUM_CLASSES];
        for s in &samples {
            match (role.is_labeled(), s.label) {
                (true, Some(l)) => class_counts[l.index()] += 1,
                (false, None) => {}
                (true, None) => {
                    return Err(Error::Data(format!(
                        "{} has no label in the {role} split",
                        s.path.display()
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Data(format!(
                        "{} carries a label in the unlabeled {role} split",
                        s.path.display()
                    )))
                }
            }
        }
        Ok(Self {
            role,
            samples,
            class_counts,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.role.is_labeled()
    }

    /// Side length of the (square) sample images, if any samples exist.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }

    /// `Large 619 | Normal 573 | Small 208 | total 1400`
    pub fn summary(&self) -> String {
        if self.is_labeled() {
            let parts: Vec<String> = ClassLabel::ALL
                .iter()
                .map(|c| format!("{} {}", c.name(), self.class_counts[c.index()]))
                .collect();
            format!("{} | total {}", parts.join(" | "), self.len())
        } else {
            format!("unlabeled | total {}", self.len())
        }
    }

    /// Stack the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let images: Vec<&Tensor<f32>> = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).map(|s| &s.image).ok_or_else(|| {
                    Error::Input(format!("sample index {i} out of range ({})", self.len()))
                })
            })
            .collect::<Result<_>>()?;
        let targets = if self.is_labeled() {
            Some(
                indices
                    .iter()
                    .map(|&i| self.samples[i].label.expect("labeled split").index())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Batch {
            images: Tensor::stack(&images)?,
            targets,
            indices: indices.to_vec(),
        })
    }
}

/// Stacked images `[n, 3, S, S]` with their class indices (absent for
/// unlabeled splits) and positions in the source split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub targets: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub image_size: usize,
    /// Promote skipped files and empty splits to errors.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            strict: false,
        }
    }
}

fn is_supported_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Regular files of a directory, sorted by file name. Dotfiles are ignored.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Decode one image file into a `[3, size, size]` tensor in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut planar = vec![0f32; CHANNELS * h * w];
    for (px, rgb) in raw.chunks_exact(CHANNELS).enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            planar[c * h * w + px] = f32::from(v) / 255.0;
        }
    }
    let tensor = Tensor::new(vec![CHANNELS, h, w], planar)?;
    let mut resized = resize_bilinear(&tensor, size, size)?;
    for v in resized.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(resized)
}

/// Load one split from a dataset root. Files are visited in sorted order
/// (class folder, then file name) and decoded in parallel; the resulting
/// sample order does not depend on the worker count.
pub fn load_split(root: &Path, role: SplitRole, opts: &LoadOptions) -> Result<DatasetSplit> {
    if opts.image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let dir = root.join(role.dir_name());
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir));
    }
    let mut candidates: Vec<(PathBuf, Option<ClassLabel>)> = Vec::new();
    if role.is_labeled() {
        for class in ClassLabel::ALL {
            for path in list_files(&dir.join(class.name()))? {
                candidates.push((path, Some(class)));
            }
        }
    } else {
        candidates.extend(list_files(&dir)?.into_iter().map(|p| (p, None)));
    }

    let decoded: Vec<std::result::Result<LabeledSample, (PathBuf, String)>> = candidates
        .into_par_iter()
        .map(|(path, label)| {
            if !is_supported_image(&path) {
                return Err((path, "unsupported file type (expected png or jpeg)".into()));
            }
            match load_image(&path, opts.image_size) {
                Ok(image) => Ok(LabeledSample { image, label, path }),
                Err(e) => Err((path, e.to_string())),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(decoded.len());
    let mut skipped = Vec::new();
    for item in decoded {
        match item {
            Ok(s) => samples.push(s),
            Err((path, reason)) => {
                if opts.strict {
                    return Err(Error::Data(format!("{}: {reason}", path.display())));
                }
                warn!("skipping {}: {reason}", path.display());
                skipped.push((path, reason));
            }
        }
    }
    if !skipped.is_empty() {
        warn!("{role}: skipped {} file(s)", skipped.len());
    }
    if samples.is_empty() {
        if opts.strict {
            return Err(Error::Data(format!(
                "no samples found in {}",
                dir.display()
            )));
        }
        warn!("no samples found in {}", dir.display());
    }
    let mut split = DatasetSplit::from_samples(role, samples)?;
    split.skipped = skipped;
    Ok(split)
}

/// Partition `0..len` into consecutive batches, optionally after a seeded
/// shuffle. The last batch may be partial.
pub fn batch_indices(
    len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    batch_indices(split.len(), batch_size, seed, shuffle)?
        .iter()
        .map(|idx| split.batch(idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(w, h, image::Luma([value]))
            .save(path)
            .unwrap();
    }

    fn tiny_split(n: usize) -> DatasetSplit {
        let samples = (0..n)
            .map(|i| LabeledSample {
                image: Tensor::full(&[3, 2, 2], i as f32).unwrap(),
                label: Some(ClassLabel::ALL[i % 3]),
                path: PathBuf::from(format!("img{i:04}.png")),
            })
            .collect();
        DatasetSplit::from_samples(SplitRole::Train, samples).unwrap()
    }

    #[test]
    fn class_label_bijection() {
        for c in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_index(c.index()).unwrap(), c);
            assert_eq!(c.name().parse::<ClassLabel>().unwrap(), c);
        }
        assert!(ClassLabel::from_index(3).is_err());
        assert_eq!(ClassLabel::mapping(), "Large=0, Normal=1, Small=2");
    }

    #[test]
    fn loads_sorted_labeled_split() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_png(&root.join("train/Normal/b.png"), 10, 8, 255);
        write_png(&root.join("train/Normal/a.png"), 10, 8, 0);
        write_png(&root.join("train/Large/z.png"), 4, 4, 128);
        fs::create_dir_all(root.join("train/Small")).unwrap();
        fs::write(root.join("train/Small/notes.txt"), "x").unwrap();
        fs::write(root.join("train/Small/broken.png"), "not a png").unwrap();

        let opts = LoadOptions {
            image_size: 5,
            strict: false,
        };
        let split = load_split(root, SplitRole::Train, &opts).unwrap();
        let names: Vec<String> = split.samples.iter().map(|s| s.file_name()).collect();
        assert_eq!(names, ["z.png", "a.png", "b.png"]);
        assert_eq!(split.class_counts, [1, 2, 0]);
        assert_eq!(split.skipped.len(), 2);
        for s in &split.samples {
            assert_eq!(s.image.shape(), &[3, 5, 5]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(split.samples[2].image.data().iter().all(|&v| v == 1.0));
        assert!(split.samples[1].image.data().iter().all(|&v| v == 0.0));

        let strict = LoadOptions {
            image_size: 5,
            strict: true,
        };
        assert!(matches!(
            load_split(root, SplitRole::Train, &strict),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn missing_and_empty_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_split(dir.path(), SplitRole::Test, &LoadOptions::default()),
            Err(Error::MissingPath(_))
        ));
        fs::create_dir_all(dir.path().join("test")).unwrap();
        let split = load_split(dir.path(), SplitRole::Test, &LoadOptions::default()).unwrap();
        assert!(split.is_empty());
        let strict = LoadOptions {
            strict: true,
            ..Default::default()
        };
        let err = load_split(dir.path(), SplitRole::Test, &strict).unwrap_err();
        assert!(err.to_string().contains("no samples found"), "{err}");
    }

    #[test]
    fn batch_counts() {
        let b = batch_indices(1400, 32, 0, true).unwrap();
        assert_eq!(b.len(), 44);
        assert_eq!(b.last().unwrap().len(), 24);
        assert!(batch_indices(10, 0, 0, false).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_ordered() {
        let split = tiny_split(10);
        let a = make_batches(&split, 4, 9, true).unwrap();
        let b = make_batches(&split, 4, 9, true).unwrap();
        assert_eq!(
            a.iter().map(|x| x.indices.clone()).collect::<Vec<_>>(),
            b.iter().map(|x| x.indices.clone()).collect::<Vec<_>>()
        );
        let plain = make_batches(&split, 4, 9, false).unwrap();
        assert_eq!(plain[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(plain[2].indices, vec![8, 9]);
        assert_eq!(plain[0].images.shape(), &[4, 3, 2, 2]);
        assert_eq!(plain[0].targets.as_deref(), Some(&[0, 1, 2, 0][..]));
    }

    proptest! {
        #[test]
        fn batches_cover_split_exactly(n in 1usize..80, bs in 1usize..20, seed in any::<u64>(), shuffle in any::<bool>()) {
            let batches = batch_indices(n, bs, seed, shuffle).unwrap();
            prop_assert_eq!(batches.len(), n.div_ceil(bs));
            let mut all: Vec<usize> = batches.into_iter().flatten().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mixed_size_images_are_normalized(w in 1u32..40, h in 1u32..40, v in any::<u8>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.png");
            image::RgbImage::from_fn(w, h, |x, y| image::Rgb([v, (x * 7) as u8, (y * 13) as u8]))
                .save(&path)
                .unwrap();
            let t = load_image(&path, 75).unwrap();
            prop_assert_eq!(t.shape(), &[3, 75, 75]);
            prop_assert!(t.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
