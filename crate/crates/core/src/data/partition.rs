//! Client partitioners. Every partitioner returns `K` non-empty shards with
//! ids `0..K` that are pairwise disjoint and cover the dataset exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};

use super::{ClientShard, DataError, Labels, PartitionReport};
use crate::rng::{self, Purpose};

fn check_clients(labels: &Labels, k: usize) -> Result<(), DataError> {
    if k == 0 {
        return Err(DataError::Config("need at least one client".into()));
    }
    if k > labels.len() {
        return Err(DataError::Config(format!("{k} clients but only {} samples", labels.len())));
    }
    Ok(())
}

fn shuffled_classes(labels: &Labels, seed: u64, tag: u64) -> Vec<Vec<usize>> {
    let mut classes = labels.by_class();
    for (c, idx) in classes.iter_mut().enumerate() {
        idx.shuffle(&mut rng::stream(seed, Purpose::Partition, &[tag, c as u64]));
    }
    classes
}

/// Integer split of `total` proportional to `weights` by largest remainder
/// (ties to the lower index). The result sums to `total`.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // `assigned` can exceed `total` only through rounding in `exact`
    let mut assigned = assigned;
    let mut i = 0;
    while assigned < total {
        counts[order[i % order.len()]] += 1;
        assigned += 1;
        i += 1;
    }
    while assigned > total {
        let k = (0..counts.len()).rev().max_by_key(|&k| counts[k]).expect("non-empty");
        counts[k] -= 1;
        assigned -= 1;
    }
    counts
}

/// Equal-size shards with equal label mix: each class is permuted with a
/// seeded stream, classes are laid end to end, and sample `j` of that
/// sequence goes to client `j mod K`. Shard sizes are `floor(N/K)` or
/// `ceil(N/K)` and per-class counts across shards differ by at most one.
pub fn partition_iid_balanced(labels: &Labels, k: usize, seed: u64) -> Result<Vec<ClientShard>, DataError> {
    check_clients(labels, k)?;
    let mut shards = vec![Vec::new(); k];
    for (j, i) in shuffled_classes(labels, seed, 0).into_iter().flatten().enumerate() {
        shards[j % k].push(i);
    }
    Ok(shards.into_iter().enumerate().map(|(id, idx)| ClientShard::new(id, idx)).collect())
}

/// Size-imbalanced shards with IID labels. Shard sizes are proportional to
/// `exp(sgm * z_k)` with `z_k` standard normal (a log-normal with sigma `sgm`),
/// floored at `max(C, 1)` samples by taking from the largest shard. Labels
/// are interleaved evenly across the dataset before cutting it into shards
/// of those sizes, so each shard's class mix tracks the global one.
/// `sgm == 0` is exactly [`partition_iid_balanced`].
pub fn partition_sgm(labels: &Labels, k: usize, sgm: f64, seed: u64) -> Result<Vec<ClientShard>, DataError> {
    check_clients(labels, k)?;
    if !(sgm >= 0.0 && sgm.is_finite()) {
        return Err(DataError::Config(format!("sgm must be finite and non-negative, got {sgm}")));
    }
    let n = labels.len();
    let min_size = labels.num_classes().max(1);
    if k * min_size > n {
        return Err(DataError::Config(format!(
            "{k} clients with at least {min_size} samples each need {} samples, have {n}",
            k * min_size
        )));
    }
    if sgm == 0.0 {
        return partition_iid_balanced(labels, k, seed);
    }

    let mut rng = rng::stream(seed, Purpose::Partition, &[1]);
    let weights: Vec<f64> = (0..k).map(|_| (sgm * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let mut sizes = apportion(n, &weights);
    for target in 0..k {
        while sizes[target] < min_size {
            let donor = (0..k).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("k > 0");
            let give = (min_size - sizes[target]).min(sizes[donor] - min_size);
            sizes[donor] -= give;
            sizes[target] += give;
        }
    }

    // stratified order: the j-th of n_c samples of class c sits at (j + 1/2) / n_c
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (c, idx) in shuffled_classes(labels, seed, 2).into_iter().enumerate() {
        let nc = idx.len() as f64;
        keyed.extend(idx.into_iter().enumerate().map(|(j, i)| ((j as f64 + 0.5) / nc, c, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for (id, &s) in sizes.iter().enumerate() {
        shards.push(ClientShard::new(id, keyed[start..start + s].iter().map(|t| t.2).collect()));
        start += s;
    }
    Ok(shards)
}

/// One draw from Dirichlet(alpha * 1_k), computed in log space so that very
/// small `alpha` cannot underflow every component to zero.
fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let logs: Vec<f64> = if alpha < 1.0 {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let g = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
        (0..k)
            .map(|_| {
                let x: f64 = rng.sample(g);
                let u: f64 = 1.0 - rng.random::<f64>();
                x.ln() + u.ln() / alpha
            })
            .collect()
    } else {
        let g = Gamma::new(alpha, 1.0).expect("positive shape");
        (0..k).map(|_| rng.sample::<f64, _>(g).ln()).collect()
    };
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Label-skewed shards: for each class a Dirichlet(alpha) proportion vector
/// splits that class across clients by largest remainder. A client left
/// empty receives one sample from the current largest shard.
pub fn partition_dirichlet(labels: &Labels, k: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>, DataError> {
    check_clients(labels, k)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, idx) in shuffled_classes(labels, seed, 4).into_iter().enumerate() {
        let mut rng = rng::stream(seed, Purpose::Partition, &[3, c as u64]);
        let p = dirichlet(&mut rng, alpha, k);
        let counts = apportion(idx.len(), &p);
        let mut start = 0;
        for (client, &cnt) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&idx[start..start + cnt]);
            start += cnt;
        }
    }
    for target in 0..k {
        if shards[target].is_empty() {
            let donor = (0..k).max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j))).expect("k > 0");
            let moved = shards[donor].pop().expect("largest shard holds at least two samples");
            shards[target].push(moved);
        }
    }
    Ok(shards.into_iter().enumerate().map(|(id, idx)| ClientShard::new(id, idx)).collect())
}

/// Check the partition contract: ids `0..K`, non-empty, disjoint, covering `0..n`.
pub fn validate_partition(shards: &[ClientShard], n: usize) -> Result<(), DataError> {
    let mut seen = vec![false; n];
    for (pos, shard) in shards.iter().enumerate() {
        if shard.client_id != pos {
            return Err(DataError::Contract(format!("shard at position {pos} has id {}", shard.client_id)));
        }
        if shard.is_empty() {
            return Err(DataError::Contract(format!("client {pos} has an empty shard")));
        }
        for &i in &shard.indices {
            if i >= n || seen[i] {
                return Err(DataError::Contract(format!("sample {i} is out of range or assigned twice")));
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DataError::Contract(format!("sample {missing} is not assigned to any client")));
    }
    Ok(())
}

pub fn partition_report(labels: &Labels, shards: &[ClientShard]) -> PartitionReport {
    let class_counts = shards
        .iter()
        .map(|s| {
            let mut row = vec![0; labels.num_classes()];
            for &i in &s.indices {
                row[labels.values()[i]] += 1;
            }
            row
        })
        .collect();
    PartitionReport { sizes: shards.iter().map(ClientShard::len).collect(), class_counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, c: usize) -> Labels {
        Labels::new((0..n).map(|i| i % c).collect(), c).unwrap()
    }

    #[test]
    fn apportion_sums_and_breaks_ties_low() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.5, 0.5]), vec![4, 3]);
        assert_eq!(apportion(5, &[1.0, 0.0]), vec![5, 0]);
    }

    #[test]
    fn iid_single_client_is_identity() {
        let l = labels(37, 3);
        let shards = partition_iid_balanced(&l, 1, 4).unwrap();
        assert_eq!(shards, vec![ClientShard::whole(0, 37)]);
    }

    #[test]
    fn iid_twenty_by_two_into_three() {
        let l = labels(20, 2);
        let shards = partition_iid_balanced(&l, 3, 0).unwrap();
        let report = partition_report(&l, &shards);
        let mut sizes = report.sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![6, 7, 7]);
        assert!(report.class_counts.iter().flatten().all(|&c| c == 3 || c == 4));
    }

    #[test]
    fn errors_on_too_many_clients() {
        let l = labels(5, 2);
        assert!(partition_iid_balanced(&l, 6, 0).is_err());
        assert!(partition_dirichlet(&l, 6, 1.0, 0).is_err());
        assert!(partition_sgm(&l, 3, 0.5, 0).is_err()); // 3 clients * 2 classes > 5
        assert!(partition_dirichlet(&l, 2, 0.0, 0).is_err());
        assert!(partition_sgm(&labels(50, 2), 3, -1.0, 0).is_err());
    }

    #[test]
    fn sgm_respects_minimum_size() {
        let l = labels(200, 10);
        for seed in 0..20 {
            let shards = partition_sgm(&l, 10, 3.0, seed).unwrap();
            validate_partition(&shards, 200).unwrap();
            assert!(shards.iter().all(|s| s.len() >= 10));
        }
    }

    #[test]
    fn dirichlet_repairs_empty_shards() {
        let l = labels(30, 3);
        for seed in 0..30 {
            let shards = partition_dirichlet(&l, 10, 0.01, seed).unwrap();
            validate_partition(&shards, 30).unwrap();
        }
    }

    #[test]
    fn tiny_alpha_does_not_underflow() {
        let mut rng = rng::stream(1, Purpose::Partition, &[]);
        let p = dirichlet(&mut rng, 1e-4, 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
