//! Prediction export for unlabeled splits.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::data::{batch_indices, ClassLabel, DatasetSplit, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, softmax};

pub const PREDICTIONS_CSV: &str = "predictions.csv";
const BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    /// Basename of the source image.
    pub image: String,
    pub label: ClassLabel,
    /// Indexed by [`ClassLabel::index`].
    pub probabilities: [f32; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvFormat {
    /// `image,label,prob_large,prob_normal,prob_small`
    #[default]
    Full,
    /// `image,class` with the class name.
    Names,
}

impl FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "names" => Ok(Self::Names),
            other => Err(Error::Usage(format!(
                "unknown prediction format `{other}` (expected `full` or `names`)"
            ))),
        }
    }
}

impl fmt::Display for CsvFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Names => "names",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSummary {
    pub rows: Vec<PredictionRow>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl PredictionSummary {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} predictions ({})\n",
            self.rows.len(),
            ClassLabel::mapping()
        );
        for class in ClassLabel::ALL {
            writeln!(
                out,
                "  {:<7}{:>6}",
                class.name(),
                self.class_counts[class.index()]
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Run a checkpoint over every image of a split. Rows come back sorted by
/// file name.
pub fn predict_rows(ckpt: &Checkpoint, split: &DatasetSplit) -> Result<Vec<PredictionRow>> {
    if split.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.role)));
    }
    let expected = ckpt.metadata.config.input_size;
    if let Some(size) = split.image_size() {
        if size != expected {
            return Err(Error::Compatibility(format!(
                "checkpoint expects {expected}x{expected} inputs, images are {size}x{size}"
            )));
        }
    }
    let model = ckpt.to_model()?;
    let mut rows = Vec::with_capacity(split.len());
    for idx in batch_indices(split.len(), BATCH, 0, false)? {
        let batch = split.batch(&idx)?;
        let logits = model.forward_eval(&batch.images)?;
        let probs = softmax(&logits)?;
        let labels = argmax_rows(&logits);
        for (row, (&i, &label)) in idx.iter().zip(&labels).enumerate() {
            let p = &probs.data()[row * NUM_CLASSES..(row + 1) * NUM_CLASSES];
            rows.push(PredictionRow {
                image: split.samples[i].file_name(),
                label: ClassLabel::from_index(label)?,
                probabilities: [p[0], p[1], p[2]],
            });
        }
    }
    rows.sort_by(|a, b| a.image.cmp(&b.image));
    if let Some(w) = rows.windows(2).find(|w| w[0].image == w[1].image) {
        return Err(Error::Data(format!("duplicate image name {}", w[0].image)));
    }
    Ok(rows)
}

pub fn to_csv(rows: &[PredictionRow], format: CsvFormat) -> String {
    let mut out = String::new();
    match format {
        CsvFormat::Full => {
            out.push_str("image,label,prob_large,prob_normal,prob_small\n");
            for r in rows {
                let [a, b, c] = r.probabilities;
                writeln!(out, "{},{},{a:.6},{b:.6},{c:.6}", r.image, r.label.index())
                    .expect("writing to a String");
            }
        }
        CsvFormat::Names => {
            out.push_str("image,class\n");
            for r in rows {
                writeln!(out, "{},{}", r.image, r.label.name()).expect("writing to a String");
            }
        }
    }
    out
}

/// Predict every image of `split` and write the CSV to `out_path`.
pub fn predict_split(
    ckpt: &Checkpoint,
    split: &DatasetSplit,
    out_path: &Path,
    format: CsvFormat,
) -> Result<PredictionSummary> {
    let rows = predict_rows(ckpt, split)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out_path, to_csv(&rows, format)).map_err(|e| Error::io(out_path, e))?;
    let mut class_counts = [0; NUM_CLASSES];
    for r in &rows {
        class_counts[r.label.index()] += 1;
    }
    Ok(PredictionSummary { rows, class_counts })
}
