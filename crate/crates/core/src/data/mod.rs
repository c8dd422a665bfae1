//! Datasets: IDX ingestion (MNIST layout) and a synthetic generator with
//! known ground-truth relevance.

mod synthetic;

use std::path::{Path, PathBuf};

pub use synthetic::{make_synthetic, SyntheticSet, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "XAGG_DATA_DIR";

/// Images in [0, 1] with integer labels, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    shape: Shape,
    pixels: Vec<f64>,
    labels: Vec<u8>,
    channel_mean: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: Shape, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} images of {shape}", labels.len()),
                actual: format!("{} values", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        let channel_mean = compute_channel_mean(shape, &pixels);
        Ok(Self {
            name: name.into(),
            shape,
            pixels,
            labels,
            channel_mean,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.shape.len()..(i + 1) * self.shape.len()]
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor::with_range(self.shape, self.pixels(i).to_vec(), 0.0, 1.0).expect("dataset invariant: values in [0, 1]")
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_mean(&self) -> &[f64] {
        &self.channel_mean
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        let channel_mean = compute_channel_mean(self.shape, &pixels);
        Dataset {
            name: self.name.clone(),
            shape: self.shape,
            pixels,
            labels,
            channel_mean,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn compute_channel_mean(shape: Shape, pixels: &[f64]) -> Vec<f64> {
    let plane = shape.pixels();
    let mut sums = vec![0.0; shape.channels];
    for img in pixels.chunks(shape.len()) {
        for (c, s) in sums.iter_mut().enumerate() {
            *s += img[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }
    let count = (pixels.len() / shape.len().max(1) * plane).max(1) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse("idx", format!("truncated header reading {what}")))
}

/// Parses an IDX image/label file pair (big-endian headers, u8 payloads).
pub fn parse_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse("idx", format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "rows")? as usize;
    let cols = be_u32(images, 12, "cols")? as usize;
    let payload = &images[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::parse(
            "idx",
            format!("image payload has {} bytes, header promises {n}×{rows}×{cols}", payload.len()),
        ));
    }
    let magic = be_u32(labels, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse("idx", format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let m = be_u32(labels, 4, "label count")? as usize;
    if m != n {
        return Err(Error::parse("idx", format!("{m} labels for {n} images")));
    }
    let label_payload = &labels[8..];
    if label_payload.len() != m {
        return Err(Error::parse("idx", format!("label payload has {} bytes, expected {m}", label_payload.len())));
    }
    let pixels = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(name, Shape::new(1, rows, cols), pixels, label_payload.to_vec())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let name = images
        .as_ref()
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&name, &std::fs::read(images)?, &std::fs::read(labels)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

impl DatasetName {
    pub fn dir_name(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion" | "fashion-mnist" | "fashionmnist" => Ok(DatasetName::FashionMnist),
            other => Err(Error::invalid(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// `$XAGG_DATA_DIR`, else the nearest `data/` directory at or above the
/// working directory, else `./data`.
pub fn data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    std::env::current_dir()
        .ok()
        .and_then(|cwd| cwd.ancestors().map(|a| a.join("data")).find(|d| d.is_dir()))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load(root: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join(name.dir_name());
    let mut ds = load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.name = format!("{}-{prefix}", name.dir_name());
    Ok(ds)
}
