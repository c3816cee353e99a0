use rand::seq::SliceRandom;

use super::{ClientShard, DataError, Dataset};
use crate::model::Batch;
use crate::rng::{self, Purpose};

/// Mini-batch schedule for one epoch of a shard with `len` samples: a seeded
/// permutation of `0..len` (stream keyed by `(seed, client_id, epoch)`) cut
/// into `ceil(len / batch_size)` chunks. Only the last chunk may be short.
pub fn minibatch_positions(
    len: usize,
    batch_size: usize,
    seed: u64,
    client_id: usize,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if len == 0 {
        return Err(DataError::Contract(format!("client {client_id} has an empty shard")));
    }
    if batch_size == 0 {
        return Err(DataError::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if batch_size < len {
        // a full batch sees every sample at once, order is irrelevant
        let mut rng = rng::stream(seed, Purpose::Batches, &[client_id as u64, epoch]);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// The epoch's batches of `shard`, materialized.
pub fn minibatches(
    ds: &Dataset,
    shard: &ClientShard,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    minibatch_positions(shard.len(), batch_size, seed, shard.client_id, epoch)?
        .into_iter()
        .map(|chunk| {
            let idx: Vec<usize> = chunk.into_iter().map(|p| shard.indices[p]).collect();
            ds.batch(&idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_per_batch_over_five_thousand() {
        let b = minibatch_positions(5000, 50, 1, 0, 0).unwrap();
        assert_eq!(b.len(), 100);
        assert!(b.iter().all(|c| c.len() == 50));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..5000).collect::<Vec<_>>());
    }

    #[test]
    fn full_batch_when_batch_exceeds_shard() {
        let b = minibatch_positions(7, 100, 1, 0, 0).unwrap();
        assert_eq!(b, vec![(0..7).collect::<Vec<_>>()]);
        // seed independent
        assert_eq!(b, minibatch_positions(7, 7, 99, 3, 5).unwrap());
    }

    #[test]
    fn last_batch_may_be_short() {
        let b = minibatch_positions(10, 4, 0, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn streams_keyed_by_client_and_epoch() {
        let a = minibatch_positions(100, 10, 5, 0, 0).unwrap();
        assert_eq!(a, minibatch_positions(100, 10, 5, 0, 0).unwrap());
        assert_ne!(a, minibatch_positions(100, 10, 5, 1, 0).unwrap());
        assert_ne!(a, minibatch_positions(100, 10, 5, 0, 1).unwrap());
    }

    #[test]
    fn empty_shard_is_rejected() {
        assert!(minibatch_positions(0, 10, 0, 0, 0).is_err());
        assert!(minibatch_positions(5, 0, 0, 0, 0).is_err());
    }
}
