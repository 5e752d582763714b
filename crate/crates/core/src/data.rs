//! Datasets: the three-axis synthetic task, IDX and CSV image files, and
//! seeded train/holdout splits.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    /// `N × …`, one sample per leading index.
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub name: String,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        inputs: Tensor<S>,
        labels: Vec<usize>,
        name: impl Into<String>,
        classes: usize,
    ) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "inputs of shape {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            name: name.into(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample (without the leading batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let x = self.inputs.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let (inputs, labels) = self.batch(indices)?;
        Dataset::new(inputs, labels, name, self.classes)
    }

    /// Sample count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Two classes that share the same ring-shaped `(x, y)` distribution and
/// differ only in the sign of `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples_per_class: usize,
    /// Standard deviation of the Gaussian noise on every coordinate.
    pub noise: f64,
    /// Distance between the two class means along `z`.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples_per_class: 200,
            noise: 0.1,
            separation: 2.0,
            seed: 0,
        }
    }
}

/// Class 0 sits at `z = +δ/2`, class 1 at `z = -δ/2`; both draw `(x, y)` from a
/// unit ring with uniform angle. Samples are ordered class 0 first.
pub fn generate_synthetic_3d<S: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<S>> {
    if spec.samples_per_class == 0
        || spec.noise.is_nan()
        || spec.noise < 0.0
        || spec.separation.is_nan()
        || spec.separation <= 0.0
    {
        return Err(Error::Config(format!(
            "synthetic spec needs samples > 0, noise >= 0, separation > 0; got {spec:?}"
        )));
    }
    let mut rng = substream(spec.seed, "synth-data");
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = 2 * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        let z_mean = if class == 0 {
            spec.separation / 2.0
        } else {
            -spec.separation / 2.0
        };
        for _ in 0..spec.samples_per_class {
            let angle = rng.random_range(0.0..TAU);
            let x = angle.cos() + noise.sample(&mut rng);
            let y = angle.sin() + noise.sample(&mut rng);
            let z = z_mean + noise.sample(&mut rng);
            data.extend([x, y, z].map(S::of));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, 3], data)?, labels, "synthetic-3d", 2)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

/// Loads an unsigned-byte IDX image file (`N × rows × cols`) and its label
/// file. Pixels are scaled to `[0, 1]`; inputs have shape `N × 1 × rows × cols`.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    let img_what = format!("IDX images {}", images_path.display());
    let lbl_what = format!("IDX labels {}", labels_path.display());

    let magic = be_u32(&images, 0, &img_what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(img_what, format!("bad magic {magic:#010x}")));
    }
    let n = be_u32(&images, 4, &img_what)? as usize;
    let rows = be_u32(&images, 8, &img_what)? as usize;
    let cols = be_u32(&images, 12, &img_what)? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(&img_what, "dimensions overflow"))?;
    if images.len() != 16 + pixels {
        return Err(Error::format(
            img_what,
            format!(
                "expected {} bytes for {n}×{rows}×{cols}, found {}",
                16 + pixels,
                images.len()
            ),
        ));
    }

    let magic = be_u32(&labels, 0, &lbl_what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lbl_what, format!("bad magic {magic:#010x}")));
    }
    let count = be_u32(&labels, 4, &lbl_what)? as usize;
    if labels.len() != 8 + count {
        return Err(Error::format(
            lbl_what,
            format!(
                "expected {} bytes for {count} labels, found {}",
                8 + count,
                labels.len()
            ),
        ));
    }
    if count != n {
        return Err(Error::Data(format!("{n} images but {count} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Data("IDX files contain no samples".into()));
    }

    let scale = S::of(1.0 / 255.0);
    let data = images[16..]
        .iter()
        .map(|&b| S::of(f64::from(b)) * scale)
        .collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        name,
        classes,
    )
}

/// Writes `N × rows × cols` unsigned-byte images in IDX format.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::Data(format!(
            "{} pixel bytes do not tile {rows}×{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        (pixels.len() / per) as u32,
        rows as u32,
        cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads rows of `label, p0, p1, …` with `channels · height · width` pixels
/// each (channel-major). A first row whose leading field is not numeric is
/// treated as a header. Pixel values above 1 are taken as bytes and scaled by
/// 1/255.
pub fn load_csv<S: Scalar>(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Dataset<S>> {
    let what = format!("CSV {}", path.display());
    let per = width * height * channels;
    if per == 0 {
        return Err(Error::Config(
            "CSV image dimensions must be positive".into(),
        ));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut labels = Vec::new();
    let mut pixels: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(&what, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let first = record.get(0).unwrap_or("");
        if row == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        if record.len() != per + 1 {
            return Err(Error::format(
                &what,
                format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    record.len(),
                    per + 1
                ),
            ));
        }
        let label: usize = first
            .parse()
            .map_err(|_| Error::format(&what, format!("row {}: bad label {first:?}", row + 1)))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| (0.0..=255.0).contains(v))
                .ok_or_else(|| {
                    Error::format(&what, format!("row {}: bad pixel {field:?}", row + 1))
                })?;
            pixels.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::format(what, "no data rows"));
    }
    let scale = if pixels.iter().any(|&v| v > 1.0) {
        1.0 / 255.0
    } else {
        1.0
    };
    let data = pixels.into_iter().map(|v| S::of(v * scale)).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, channels, height, width], data)?,
        labels,
        name,
        classes,
    )
}

/// Seeded partition into `(train, holdout)` with `k` holdout samples.
/// Both parts follow one random permutation of the original indices.
pub fn split_holdout<S: Scalar>(
    d: &Dataset<S>,
    k: usize,
    seed: u64,
) -> Result<(Dataset<S>, Option<Dataset<S>>)> {
    if k >= d.len() {
        return Err(Error::Config(format!(
            "holdout size {k} must be smaller than the dataset ({})",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut substream(seed, "holdout"));
    let (held, kept) = order.split_at(k);
    let train = d.subset(kept, format!("{}-train", d.name))?;
    let holdout = if k == 0 {
        None
    } else {
        Some(d.subset(held, format!("{}-holdout", d.name))?)
    };
    Ok((train, holdout))
}
