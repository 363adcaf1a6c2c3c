//! CSV and IDX dataset files.

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Where to read a dataset from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Csv(PathBuf),
    Idx { images: PathBuf, labels: PathBuf },
}

/// Loads a dataset; every sample starts tagged `noisy_train`.
///
/// `num_classes` defaults to one more than the largest label.
pub fn load_dataset<S: Scalar>(source: &DataSource, num_classes: Option<usize>) -> Result<Dataset<S>> {
    match source {
        DataSource::Csv(path) => load_csv(path, num_classes),
        DataSource::Idx { images, labels } => load_idx(images, labels, num_classes),
    }
}

/// Reads a CSV with a header row, feature columns, an optional `true_label`
/// column and a final `label` column. Feature values are taken verbatim.
pub fn load_csv<S: Scalar>(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset<S>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Input(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let ncols = headers.len();
    if ncols < 2 || headers.get(ncols - 1).map(str::trim) != Some("label") {
        return Err(Error::Data {
            row: Some(1),
            message: "header must end with a `label` column after at least one feature".into(),
        });
    }
    let true_col = headers.iter().position(|h| h.trim() == "true_label");
    let feature_cols: Vec<usize> = (0..ncols - 1).filter(|&c| Some(c) != true_col).collect();
    if feature_cols.is_empty() {
        return Err(Error::Data {
            row: Some(1),
            message: "no feature columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut true_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record?;
        if record.len() != ncols {
            return Err(Error::Data {
                row: Some(line),
                message: format!("{} fields, header has {ncols}", record.len()),
            });
        }
        for &c in &feature_cols {
            let raw = record[c].trim();
            let v: f64 = raw.parse().map_err(|_| Error::Data {
                row: Some(line),
                message: format!("feature {raw:?} is not a number"),
            })?;
            values.push(S::lit(v));
        }
        labels.push(parse_label(&record[ncols - 1], line, num_classes)?);
        if let Some(c) = true_col {
            true_labels.push(parse_label(&record[c], line, num_classes)?);
        }
    }
    let n = labels.len();
    let classes = resolve_classes(num_classes, &labels);
    let features = Matrix::from_vec(n, feature_cols.len(), values)?;
    let ds = Dataset::new(features, labels, classes, format!("csv:{}", path.display()))?;
    if true_col.is_some() {
        ds.with_true_labels(true_labels)
    } else {
        Ok(ds)
    }
}

fn parse_label(raw: &str, line: usize, num_classes: Option<usize>) -> Result<usize> {
    let raw = raw.trim();
    let label: usize = raw.parse().map_err(|_| Error::Data {
        row: Some(line),
        message: format!("label {raw:?} is not a nonnegative integer"),
    })?;
    if let Some(c) = num_classes {
        if label >= c {
            return Err(Error::Data {
                row: Some(line),
                message: format!("label {label} outside [0, {c})"),
            });
        }
    }
    Ok(label)
}

fn resolve_classes(num_classes: Option<usize>, labels: &[usize]) -> usize {
    num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)))
}

/// Writes features, the optional `true_label` column and `label`.
pub fn write_csv<S: Scalar>(dataset: &Dataset<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    })?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    if dataset.true_labels().is_some() {
        header.push("true_label".into());
    }
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features().row(i).iter().map(|v| v.to_string()).collect();
        if let Some(t) = dataset.true_labels() {
            rec.push(t[i].to_string());
        }
        rec.push(dataset.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("file ends while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        let available = self.bytes.len().saturating_sub(self.pos);
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("{what} needs {len} bytes, {available} remain"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Pixel bytes are scaled to [0, 1].
pub fn load_idx<S: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<Dataset<S>> {
    let image_bytes = read_file(images.as_ref())?;
    let label_bytes = read_file(labels.as_ref())?;

    let mut img = Cursor { bytes: &image_bytes, pos: 0 };
    let magic = img.u32("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let d = rows * cols;
    let pixels = img.take(n * d, "pixel data")?;
    let scale = S::lit(255.0);
    let values = pixels.iter().map(|&b| S::lit(f64::from(b)) / scale).collect();

    let mut lab = Cursor { bytes: &label_bytes, pos: 0 };
    let magic = lab.u32("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count_offset = lab.pos as u64;
    let m = lab.u32("label count")? as usize;
    if m != n {
        return Err(Error::Format {
            offset: count_offset,
            message: format!("{m} labels for {n} images"),
        });
    }
    let raw = lab.take(n, "label data")?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    if let Some(c) = num_classes {
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(Error::Data {
                row: Some(i),
                message: format!("label {} outside [0, {c})", labels[i]),
            });
        }
    }
    let classes = resolve_classes(num_classes, &labels);
    Dataset::new(
        Matrix::from_vec(n, d, values)?,
        labels,
        classes,
        format!("idx:{}", images.as_ref().display()),
    )
}
