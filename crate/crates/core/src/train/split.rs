use crate::error::{Error, Result};
use crate::rng::Rng;

/// Validation-set size: `round(fraction · n)` with ties to even.
pub fn validation_size(n: usize, val_fraction: f64) -> usize {
    (val_fraction * n as f64).round_ties_even() as usize
}

/// Random `(train, val)` partition.
pub fn split_dataset<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(items.len(), val_fraction, seed)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Index form of [`split_dataset`]; both halves are sorted ascending.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} items")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let k = validation_size(n, val_fraction);
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
