//! Per-pixel relevance maps, their normalization, binary codec and rendering.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEATMAP_MAGIC: &[u8; 4] = b"XAGH";
pub const HEATMAP_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub image: Option<usize>,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Provenance {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            ..Default::default()
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Serialize) -> Self {
        self.params
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable parameter"));
        self
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }
}

/// H×W relevance map, row-major, all values finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub provenance: Provenance,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}×{width} values"),
                actual: values.len().to_string(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite relevance at pixel {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Heatmap::new(self.height, self.width, values, self.provenance.clone())
    }

    /// Optionally clips negatives, then scales to unit sum. A map summing to
    /// zero becomes uniform.
    pub fn normalized(&self, positive_only: bool) -> Heatmap {
        let mut v: Vec<f64> = if positive_only {
            self.values.iter().map(|x| x.max(0.0)).collect()
        } else {
            self.values.clone()
        };
        let s: f64 = v.iter().sum();
        if s == 0.0 || !s.is_finite() {
            let u = 1.0 / v.len() as f64;
            v.iter_mut().for_each(|x| *x = u);
        } else {
            v.iter_mut().for_each(|x| *x /= s);
        }
        let mut provenance = self.provenance.clone();
        provenance
            .params
            .insert("positive_only".into(), serde_json::Value::Bool(positive_only));
        Heatmap {
            height: self.height,
            width: self.width,
            values: v,
            provenance,
        }
    }

    /// `XAGH`, version byte, u32 LE H and W, f64 LE values, JSON provenance.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(13 + 8 * self.values.len());
        out.extend_from_slice(HEATMAP_MAGIC);
        out.push(HEATMAP_VERSION);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        serde_json::to_writer(&mut out, &self.provenance)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != HEATMAP_MAGIC {
            return Err(Error::parse("heatmap", "missing XAGH magic"));
        }
        if bytes[4] != HEATMAP_VERSION {
            return Err(Error::parse(
                "heatmap",
                format!("version {} (supported: {HEATMAP_VERSION})", bytes[4]),
            ));
        }
        let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
        let end = 13 + 8 * h * w;
        let raw = bytes
            .get(13..end)
            .ok_or_else(|| Error::parse("heatmap", format!("payload shorter than {h}×{w} values")))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let provenance = serde_json::from_slice(&bytes[end..])?;
        Heatmap::new(h, w, values, provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// 8-bit grey levels mapping [min, max] to 0..=255. With `clip`, values
    /// above the 99th percentile saturate.
    pub fn to_gray(&self, clip: bool) -> Vec<u8> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = if clip {
            percentile(&self.values, 0.99)
        } else {
            self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| {
                if span <= 0.0 {
                    0
                } else {
                    (((v.min(hi) - lo) / span) * 255.0).round() as u8
                }
            })
            .collect()
    }

    /// Binary PGM (P5).
    pub fn write_pgm(&self, path: impl AsRef<Path>, clip: bool) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_gray(clip))?;
        f.flush()?;
        Ok(())
    }

    pub fn write_png(&self, path: impl AsRef<Path>, clip: bool) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(f, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        w.write_image_data(&self.to_gray(clip))
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
        w.finish().map_err(|e| Error::invalid(format!("png: {e}")))?;
        Ok(())
    }
}

/// Linear-interpolated quantile, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}
