//! Superpixel partitions: grayscale SLIC and square grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const SEGMENTS_MAGIC: &[u8; 4] = b"XAGS";

/// Every pixel carries a label in `0..count`; labels are contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: usize,
}

impl SegmentMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}×{width} labels"),
                actual: labels.len().to_string(),
            });
        }
        let count = *labels.iter().max().expect("non-empty") as usize + 1;
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("segment labels not contiguous: {missing} unused")));
        }
        Ok(Self {
            height,
            width,
            labels,
            count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, pixel: usize) -> usize {
        self.labels[pixel] as usize
    }

    /// Pixel indices of every segment, each list in raster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }

    /// True when every segment is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        components(self.height, self.width, &self.labels).1 == self.count
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.labels.len());
        out.extend_from_slice(SEGMENTS_MAGIC);
        for v in [self.height, self.width, self.count] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != SEGMENTS_MAGIC {
            return Err(Error::parse("segments", "missing XAGS magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (h, w, s) = (word(4), word(8), word(12));
        if bytes.len() != 16 + 4 * h * w {
            return Err(Error::parse("segments", format!("expected {} label bytes, found {}", 4 * h * w, bytes.len() - 16)));
        }
        let labels = bytes[16..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let map = SegmentMap::new(h, w, labels).map_err(|e| Error::parse("segments", e.to_string()))?;
        if map.count != s {
            return Err(Error::parse("segments", format!("header declares {s} segments, labels use {}", map.count)));
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Row-major square tiling; cells on the right and bottom edges are truncated.
pub fn grid_segments(height: usize, width: usize, cell: usize) -> Result<SegmentMap> {
    if cell == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("grid needs a non-empty image and cell ≥ 1"));
    }
    let cols = width.div_ceil(cell);
    let labels = (0..height * width)
        .map(|i| ((i / width / cell) * cols + (i % width) / cell) as u32)
        .collect();
    SegmentMap::new(height, width, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicConfig {
    pub n_segments: usize,
    /// Weight of spatial distance relative to intensity distance.
    pub compactness: f64,
    pub max_iters: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            n_segments: 49,
            compactness: 0.1,
            max_iters: 10,
        }
    }
}

/// SLIC on the channel-mean intensity: k-means over (intensity, row, col)
/// from a regular grid, with D² = ΔI² + (m·d_xy / S)², followed by merging
/// of small disconnected fragments into their largest neighbour.
pub fn slic(x: &ImageTensor, cfg: &SlicConfig) -> Result<SegmentMap> {
    let shape = x.shape();
    let (h, w) = (shape.height, shape.width);
    let n = h * w;
    if cfg.n_segments == 0 || cfg.n_segments > n {
        return Err(Error::invalid(format!("n_segments {} outside [1, {n}]", cfg.n_segments)));
    }
    if !(cfg.compactness >= 0.0) {
        return Err(Error::invalid("compactness must be ≥ 0"));
    }
    let intensity: Vec<f64> = (0..n)
        .map(|p| (0..shape.channels).map(|c| x.data()[c * n + p]).sum::<f64>() / shape.channels as f64)
        .collect();

    let ny = ((cfg.n_segments as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let nx = ((cfg.n_segments as f64 / ny as f64).round() as usize).clamp(1, w);
    let step = ((n as f64) / (nx * ny) as f64).sqrt();
    // (intensity, row, col)
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        for j in 0..nx {
            let r = (i as f64 + 0.5) * h as f64 / ny as f64;
            let c = (j as f64 + 0.5) * w as f64 / nx as f64;
            let p = (r.floor() as usize).min(h - 1) * w + (c.floor() as usize).min(w - 1);
            centers.push([intensity[p], r - 0.5, c - 0.5]);
        }
    }
    let spatial = cfg.compactness / step;
    let mut labels = vec![0u32; n];
    let mut dist = vec![f64::INFINITY; n];
    let radius = (2.0 * step).ceil() as isize;
    for _ in 0..cfg.max_iters.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, ctr) in centers.iter().enumerate() {
            let (cr, cc) = (ctr[1].round() as isize, ctr[2].round() as isize);
            for r in (cr - radius).max(0)..(cr + radius + 1).min(h as isize) {
                for c in (cc - radius).max(0)..(cc + radius + 1).min(w as isize) {
                    let p = r as usize * w + c as usize;
                    let di = intensity[p] - ctr[0];
                    let (dr, dc) = (r as f64 - ctr[1], c as f64 - ctr[2]);
                    let d = di * di + spatial * spatial * (dr * dr + dc * dc);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 4]; centers.len()];
        for p in 0..n {
            let a = &mut acc[labels[p] as usize];
            a[0] += intensity[p];
            a[1] += (p / w) as f64;
            a[2] += (p % w) as f64;
            a[3] += 1.0;
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a[3] > 0.0 {
                *ctr = [a[0] / a[3], a[1] / a[3], a[2] / a[3]];
            }
        }
    }
    let min_size = ((0.5 * n as f64 / (nx * ny) as f64).floor() as usize).max(1);
    let merged = enforce_connectivity(h, w, &labels, min_size);
    SegmentMap::new(h, w, merged)
}

/// 4-connected components of equal-label regions, numbered in raster order.
fn components(h: usize, w: usize, labels: &[u32]) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let neighbours = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    (comp, next)
}

/// Splits labels into connected components, folds each component smaller
/// than `min_size` into its largest adjacent component (raster order, ties to
/// the lower component id), and relabels in raster order of first pixel.
fn enforce_connectivity(h: usize, w: usize, labels: &[u32], min_size: usize) -> Vec<u32> {
    let (comp, n) = components(h, w, labels);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![0usize; n];
    for &c in &comp {
        size[c] += 1;
    }
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for p in 0..h * w {
        let (r, c) = (p / w, p % w);
        for q in [(r + 1 < h).then(|| p + w), (c + 1 < w).then(|| p + 1)].into_iter().flatten() {
            if comp[p] != comp[q] {
                adjacency[comp[p]].push(comp[q]);
                adjacency[comp[q]].push(comp[p]);
            }
        }
    }
    for c in 0..n {
        let root = find(&mut parent, c);
        if root != c || size[root] >= min_size {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        let members: Vec<usize> = (0..n).filter(|&m| find(&mut parent, m) == root).collect();
        for m in members {
            for &nb in &adjacency[m] {
                let r = find(&mut parent, nb);
                if r == root {
                    continue;
                }
                if best.is_none_or(|(bs, br)| size[r] > bs || (size[r] == bs && r < br)) {
                    best = Some((size[r], r));
                }
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            size[target] += size[root];
        }
    }
    let mut relabel = vec![u32::MAX; n];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            let r = find(&mut parent, c);
            if relabel[r] == u32::MAX {
                relabel[r] = next;
                next += 1;
            }
            relabel[r]
        })
        .collect()
}
