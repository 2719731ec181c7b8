use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};

/// Deterministic disjoint split; the first part receives
/// `round(fraction * n)` records.
pub fn split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    let (a, b) = split_indices(index.len(), fraction, seed)?;
    Ok((index.subset(&a), index.subset(&b)))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split", format!("fraction {fraction} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * n as f64).round() as usize;
    let mut first = order[..cut].to_vec();
    let mut second = order[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}
