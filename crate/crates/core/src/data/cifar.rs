//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (red plane, green plane, blue plane; 32x32 row-major).

use std::path::Path;

use super::{DataError, Dataset, Labels};
use crate::model::InputShape;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const TEST_FILE: &str = "test_batch.bin";

/// Decode a run of records, appending pixels scaled to `[0, 1]`.
/// `base_offset` is only used to report positions in error messages.
fn decode_into(
    bytes: &[u8],
    expected_records: Option<usize>,
    base_offset: u64,
    features: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    let whole = bytes.len() / CIFAR_RECORD_BYTES;
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(DataError::Format {
            offset: base_offset + (whole * CIFAR_RECORD_BYTES) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() % CIFAR_RECORD_BYTES
            ),
        });
    }
    if let Some(expected) = expected_records {
        if whole != expected {
            return Err(DataError::Format {
                offset: base_offset + bytes.len() as u64,
                message: format!("expected {expected} records, found {whole}"),
            });
        }
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(DataError::Format {
                offset: base_offset + (r * CIFAR_RECORD_BYTES) as u64,
                message: format!("label byte {} is not below {CIFAR_CLASSES}", rec[0]),
            });
        }
    }
    features.reserve(whole * (CIFAR_RECORD_BYTES - 1));
    labels.reserve(whole);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        features.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok(())
}

/// Parse an in-memory CIFAR-10 binary file.
pub fn parse_cifar10(name: &str, bytes: &[u8], expected_records: Option<usize>) -> Result<Dataset, DataError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    decode_into(bytes, expected_records, 0, &mut features, &mut labels)?;
    let shape = InputShape::Image { channels: 3, height: 32, width: 32 };
    Dataset::new(name, shape, features, Labels::new(labels, CIFAR_CLASSES)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn tag(path: &Path, err: DataError) -> DataError {
    match err {
        DataError::Format { offset, message } => {
            DataError::Format { offset, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    }
}

/// Load the five training batches and the test batch from `dir`.
/// Either split is returned only if every file decodes cleanly.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let shape = InputShape::Image { channels: 3, height: 32, width: 32 };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for file in TRAIN_FILES {
        let path = dir.join(file);
        let bytes = read_file(&path)?;
        decode_into(&bytes, Some(CIFAR_RECORDS_PER_FILE), 0, &mut features, &mut labels).map_err(|e| tag(&path, e))?;
    }
    let train = Dataset::new("cifar10-train", shape, features, Labels::new(labels, CIFAR_CLASSES)?)?;
    let path = dir.join(TEST_FILE);
    let bytes = read_file(&path)?;
    let test = parse_cifar10("cifar10-test", &bytes, Some(CIFAR_RECORDS_PER_FILE)).map_err(|e| tag(&path, e))?;
    Ok((train, test))
}
