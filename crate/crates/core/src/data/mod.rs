//! Datasets, client partitions and mini-batch schedules.

mod batches;
mod cifar;
mod partition;
mod synth;

use serde::Serialize;
use thiserror::Error;

use crate::model::{Batch, InputShape, ModelError};

pub use batches::{minibatch_positions, minibatches};
pub use cifar::{load_cifar10, parse_cifar10, CIFAR_CLASSES, CIFAR_RECORD_BYTES, CIFAR_RECORDS_PER_FILE};
pub use partition::{
    partition_dirichlet, partition_iid_balanced, partition_report, partition_sgm, validate_partition,
};
pub use synth::{read_flds, synth_blobs, synth_blobs_split, write_flds, BlobParams, FLDS_MAGIC, FLDS_VERSION};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Class labels of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    values: Vec<usize>,
    num_classes: usize,
}

impl Labels {
    pub fn new(values: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if let Some((i, &y)) = values.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(DataError::Contract(format!("label {y} at sample {i} is not below {num_classes}")));
        }
        Ok(Self { values, num_classes })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Sample indices of each class, ascending.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.values.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.values {
            counts[y] += 1;
        }
        counts
    }
}

/// Labeled samples, features stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    shape: InputShape,
    features: Vec<f64>,
    labels: Labels,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: InputShape, features: Vec<f64>, labels: Labels) -> Result<Self, DataError> {
        if shape.is_empty() || features.len() != labels.len() * shape.len() {
            return Err(DataError::Contract(format!(
                "{} feature values do not match {} samples of shape {shape}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { name: name.into(), shape, features, labels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Gather the given samples into a batch (in the given order).
    pub fn batch(&self, indices: &[usize]) -> Result<Batch, DataError> {
        let d = self.shape.len();
        let mut features = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Contract(format!("sample index {i} out of range ({})", self.len())));
            }
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels.values[i]);
        }
        Ok(Batch::new(features, labels, d)?)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch, DataError> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// One client's share of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Parent-dataset sample indices, ascending.
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self { client_id, indices }
    }

    /// A single shard holding every sample of a dataset of size `n`.
    pub fn whole(client_id: usize, n: usize) -> Self {
        Self { client_id, indices: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-client sample and class counts of a partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionReport {
    pub sizes: Vec<usize>,
    /// `class_counts[k][c]`: samples of class `c` held by client `k`.
    pub class_counts: Vec<Vec<usize>>,
}

impl PartitionReport {
    pub fn column_sums(&self) -> Vec<usize> {
        let classes = self.class_counts.first().map(Vec::len).unwrap_or(0);
        (0..classes).map(|c| self.class_counts.iter().map(|row| row[c]).sum()).collect()
    }

    /// Shannon entropy (nats) of each client's label distribution.
    pub fn label_entropies(&self) -> Vec<f64> {
        self.class_counts
            .iter()
            .zip(&self.sizes)
            .map(|(row, &n)| {
                row.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n as f64;
                        -p * p.ln()
                    })
                    .sum()
            })
            .collect()
    }

    /// Coefficient of variation (population std / mean) of shard sizes.
    pub fn size_cv(&self) -> f64 {
        let k = self.sizes.len() as f64;
        let mean = self.sizes.iter().sum::<usize>() as f64 / k;
        let var = self.sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / k;
        var.sqrt() / mean
    }

    /// Render as CSV: `client_id,size,class_0,...`.
    pub fn to_csv(&self) -> String {
        let classes = self.class_counts.first().map(Vec::len).unwrap_or(0);
        let mut out = String::from("client_id,size");
        for c in 0..classes {
            out.push_str(&format!(",class_{c}"));
        }
        out.push('\n');
        for (k, row) in self.class_counts.iter().enumerate() {
            out.push_str(&format!("{k},{}", self.sizes[k]));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_rejects_mismatched_features() {
        let labels = Labels::new(vec![0, 1], 2).unwrap();
        assert!(Dataset::new("x", InputShape::Flat(3), vec![0.0; 5], labels).is_err());
        assert!(Labels::new(vec![0, 2], 2).is_err());
    }

    #[test]
    fn batch_gathers_in_order() {
        let labels = Labels::new(vec![0, 1, 2], 3).unwrap();
        let ds = Dataset::new("x", InputShape::Flat(2), vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1], labels).unwrap();
        let b = ds.batch(&[2, 0]).unwrap();
        assert_eq!(b.labels(), &[2, 0]);
        assert_eq!(b.features(), &[2.0, 2.1, 0.0, 0.1]);
        assert!(ds.batch(&[3]).is_err());
    }

    #[test]
    fn entropy_and_cv() {
        let r = PartitionReport { sizes: vec![2, 2], class_counts: vec![vec![1, 1], vec![2, 0]] };
        let h = r.label_entropies();
        assert!((h[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(h[1], 0.0);
        assert_eq!(r.size_cv(), 0.0);
        assert_eq!(r.column_sums(), vec![3, 1]);
        assert_eq!(r.to_csv(), "client_id,size,class_0,class_1\n0,2,1,1\n1,2,2,0\n");
    }
}
