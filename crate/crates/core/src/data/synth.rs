//! Gaussian blob datasets and their `FLDS` on-disk form.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset, Labels};
use crate::model::InputShape;
use crate::rng::{self, Purpose};

pub const FLDS_MAGIC: &[u8; 4] = b"FLDS";
pub const FLDS_VERSION: u32 = 1;

/// Shape of a blob dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each center.
    pub spread: f64,
}

fn centers(p: &BlobParams, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, Purpose::Synth, &[0]);
    (0..p.classes)
        .map(|_| {
            let v: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn sample(name: &str, p: &BlobParams, centers: &[Vec<f64>], n: usize, seed: u64, stream: u64) -> Result<Dataset, DataError> {
    let mut rng = rng::stream(seed, Purpose::Synth, &[stream]);
    let mut features = Vec::with_capacity(n * p.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % p.classes;
        labels.push(y);
        for &c in &centers[y] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(c + p.spread * z);
        }
    }
    Dataset::new(name, InputShape::Flat(p.dim), features, Labels::new(labels, p.classes)?)
}

fn check(n: usize, p: &BlobParams) -> Result<(), DataError> {
    if p.classes < 2 || p.dim == 0 {
        return Err(DataError::Config("blobs need at least 2 classes and 1 dimension".into()));
    }
    if n < p.classes {
        return Err(DataError::Config(format!("{n} samples cannot cover {} classes", p.classes)));
    }
    if !(p.spread >= 0.0 && p.spread.is_finite()) {
        return Err(DataError::Config(format!("spread {} must be finite and non-negative", p.spread)));
    }
    Ok(())
}

/// `n` samples from `classes` Gaussian clusters with random unit-norm
/// centers. Labels cycle `0, 1, ..., C-1`, so class counts differ by at most one.
pub fn synth_blobs(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    let p = BlobParams { classes, dim, spread };
    check(n, &p)?;
    sample("synth", &p, &centers(&p, seed), n, seed, 1)
}

/// Train and test sets drawn around the same centers with independent noise.
/// The training half is identical to `synth_blobs(n_train, ..)` with the same seed.
pub fn synth_blobs_split(p: &BlobParams, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    check(n_train, p)?;
    check(n_test, p)?;
    let c = centers(p, seed);
    Ok((sample("synth", p, &c, n_train, seed, 1)?, sample("synth-test", p, &c, n_test, seed, 2)?))
}

/// Serialize a flat-feature dataset: magic, version, n, dim, C (u32 LE),
/// then `n * dim` f64 LE features and `n` u8 labels.
pub fn write_flds<W: Write>(ds: &Dataset, mut out: W) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: "<flds writer>".into(), source };
    if ds.num_classes() > 256 {
        return Err(DataError::Contract("FLDS stores labels as u8".into()));
    }
    let n = u32::try_from(ds.len()).map_err(|_| DataError::Contract("too many samples for FLDS".into()))?;
    out.write_all(FLDS_MAGIC).map_err(io)?;
    for v in [FLDS_VERSION, n, ds.shape().len() as u32, ds.num_classes() as u32] {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(ds.features().len() * 8 + ds.len());
    for f in ds.features() {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.extend(ds.labels().values().iter().map(|&y| y as u8));
    out.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_flds<R: Read>(mut input: R) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|source| DataError::Io { path: "<flds reader>".into(), source })?;
    let fmt = |offset: usize, message: String| DataError::Format { offset: offset as u64, message };
    if bytes.len() < 20 {
        return Err(fmt(bytes.len(), "header shorter than 20 bytes".into()));
    }
    if &bytes[0..4] != FLDS_MAGIC {
        return Err(fmt(0, "missing FLDS magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (version, n, dim, classes) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
    if version != FLDS_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let body = n * dim * 8 + n;
    if bytes.len() != 20 + body {
        return Err(fmt(bytes.len().min(20 + body), format!("expected {} bytes, found {}", 20 + body, bytes.len())));
    }
    let features: Vec<f64> = bytes[20..20 + n * dim * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let label_start = 20 + n * dim * 8;
    let mut labels = Vec::with_capacity(n);
    for (i, &y) in bytes[label_start..].iter().enumerate() {
        if y as usize >= classes {
            return Err(fmt(label_start + i, format!("label {y} is not below {classes}")));
        }
        labels.push(y as usize);
    }
    Dataset::new("flds", InputShape::Flat(dim), features, Labels::new(labels, classes)?)
}
