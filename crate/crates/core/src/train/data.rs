//! Datasets: synthetic two-class generators and small-file loaders.

use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::Path;

/// A labeled classification set. Inputs are `[n, features]`, labels are
/// class indices below `classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::dim("dataset inputs must be rank 2".to_string()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::input("need at least two classes".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.features();
        let mut data = Vec::with_capacity(idxs.len() * d);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![idxs.len(), d], data).expect("batch shape by construction"),
            labels,
        )
    }

    /// Per-feature mean and standard deviation (population), with zero
    /// deviations replaced by 1 so constant features pass through.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.len(), self.features());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(self.inputs.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n.max(1) as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in self.inputs.row(i).iter().enumerate() {
                let dv = v - mean[j];
                var[j] += dv * dv;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }

    /// Shifts and scales features in place.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let d = self.features();
        if mean.len() != d || std.len() != d {
            return Err(Error::dim("standardization stats length mismatch".to_string()));
        }
        let data = self.inputs.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - mean[j]) / std[j];
        }
        Ok(())
    }
}

/// Two Gaussian blobs; class 0 around `centers.0`, class 1 around
/// `centers.1`. Rows come out class-0 block first.
pub fn two_clusters(
    n_per_class: usize,
    centers: ([f64; 2], [f64; 2]),
    std: f64,
    rng: &mut impl Rng,
) -> Dataset {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (label, c) in [centers.0, centers.1].into_iter().enumerate() {
        for _ in 0..n_per_class {
            data.push(c[0] + dist.sample(rng));
            data.push(c[1] + dist.sample(rng));
            labels.push(label);
        }
    }
    Dataset::new(
        Tensor::new(vec![2 * n_per_class, 2], data).expect("shape by construction"),
        labels,
        2,
    )
    .expect("labels by construction")
}

/// Two concentric rings with radial Gaussian noise; the inner ring is
/// class 0. Not linearly separable, so depth actually matters.
pub fn two_rings(
    n_per_class: usize,
    r_inner: f64,
    r_outer: f64,
    noise: f64,
    rng: &mut impl Rng,
) -> Dataset {
    let jitter = Normal::new(0.0, noise).expect("finite noise");
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (label, r) in [r_inner, r_outer].into_iter().enumerate() {
        for _ in 0..n_per_class {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = r + jitter.sample(rng);
            data.push(rad * theta.cos());
            data.push(rad * theta.sin());
            labels.push(label);
        }
    }
    Dataset::new(
        Tensor::new(vec![2 * n_per_class, 2], data).expect("shape by construction"),
        labels,
        2,
    )
    .expect("labels by construction")
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read, pos: &mut u64) -> Result<u32> {
    let mut b = [0u8; 4];
    let at = *pos;
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("file ends inside the header".to_string(), Some(at))
        } else {
            Error::Io(e)
        }
    })?;
    *pos += 4;
    Ok(u32::from_be_bytes(b))
}

/// Loads a big-endian IDX image file (magic 0x803) as `[n, rows*cols]` with
/// pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pos = 0u64;
    let magic = read_be_u32(&mut f, &mut pos)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            format!("magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"),
            Some(0),
        ));
    }
    let n = read_be_u32(&mut f, &mut pos)? as usize;
    let rows = read_be_u32(&mut f, &mut pos)? as usize;
    let cols = read_be_u32(&mut f, &mut pos)? as usize;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 20 {
        return Err(Error::format(
            format!("implausible image geometry {rows}x{cols}"),
            Some(8),
        ));
    }
    let want = n * rows * cols;
    let mut raw = vec![0u8; want];
    f.read_exact(&mut raw).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(
                format!("expected {want} pixel bytes after the header"),
                Some(pos),
            )
        } else {
            Error::Io(e)
        }
    })?;
    let mut probe = [0u8; 1];
    if f.read(&mut probe)? != 0 {
        return Err(Error::format(
            "trailing bytes after pixel data".to_string(),
            Some(pos + want as u64),
        ));
    }
    let data: Vec<f64> = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows * cols], data)
}

/// Loads a big-endian IDX label file (magic 0x801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut pos = 0u64;
    let magic = read_be_u32(&mut f, &mut pos)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            format!("magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"),
            Some(0),
        ));
    }
    let n = read_be_u32(&mut f, &mut pos)? as usize;
    let mut raw = vec![0u8; n];
    f.read_exact(&mut raw).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("expected {n} label bytes"), Some(pos))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

/// Loads `label,f1,f2,...` rows. No header, same width everywhere; the class
/// count is one past the largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("line {}: bad label", lineno + 1)))?;
        let mut row = Vec::new();
        for field in fields {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("line {}: bad number {field:?}", lineno + 1)))?;
            row.push(v);
        }
        match width {
            None => {
                if row.is_empty() {
                    return Err(Error::input(format!("line {}: no features", lineno + 1)));
                }
                width = Some(row.len());
            }
            Some(w) if w != row.len() => {
                return Err(Error::input(format!(
                    "line {}: {} features, earlier rows had {w}",
                    lineno + 1,
                    row.len()
                )));
            }
            _ => {}
        }
        labels.push(label);
        data.extend_from_slice(&row);
    }
    let Some(width) = width else {
        return Err(Error::input("empty dataset file".to_string()));
    };
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![labels.len(), width], data)?,
        labels,
        classes.max(2),
    )
}
