use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PairRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<PairRecord>,
    pub valid: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

/// Seeded shuffle followed by a train/valid/test cut.
///
/// Valid and test sizes are `round(ratio · n)`; train takes the remainder.
pub fn split_dataset(records: &[PairRecord], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::Data(format!("{n} records cannot fill three splits")));
    }
    let n_valid = (ratios[1] * n as f64).round() as usize;
    let n_test = (ratios[2] * n as f64).round() as usize;
    if n_valid + n_test > n {
        return Err(Error::Data(format!("split sizes exceed the {n} available records")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let n_train = n - n_valid - n_test;
    Ok(Splits {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}
