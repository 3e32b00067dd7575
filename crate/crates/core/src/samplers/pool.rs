use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::nn::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pcma80Config {
    pub pool: usize,
    pub subsample: usize,
}

impl Default for Pcma80Config {
    fn default() -> Self {
        Self { pool: 80, subsample: 16 }
    }
}

impl Pcma80Config {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.subsample == 0 {
            errs.push(FieldError::new(format!("{prefix}.subsample"), "must be positive"));
        }
        if self.pool < self.subsample {
            errs.push(FieldError::new(format!("{prefix}.pool"), "must be at least subsample"));
        }
        errs
    }
}

/// One random frame from each of `pool` equal spans of `n_frames`.
pub fn pcma80_pool<R: Rng + ?Sized>(n_frames: usize, pool: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool == 0 || n_frames < pool {
        return Err(Error::InsufficientEntries {
            requested: pool,
            available: n_frames,
        });
    }
    Ok((0..pool)
        .map(|c| {
            let lo = c * n_frames / pool;
            let hi = (c + 1) * n_frames / pool;
            rng.random_range(lo..hi)
        })
        .collect())
}

/// `subsample` distinct pool positions, uniform and ascending.
pub fn pcma80_resample<R: Rng + ?Sized>(pool_size: usize, subsample: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool_size < subsample {
        return Err(Error::InsufficientEntries {
            requested: subsample,
            available: pool_size,
        });
    }
    let mut idx = sample(rng, pool_size, subsample).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Rows of `pool` at a fresh [`pcma80_resample`] draw.
pub fn pcma80_resample_frames<R: Rng + ?Sized>(pool: &Tensor2, subsample: usize, rng: &mut R) -> Result<Tensor2> {
    let idx = pcma80_resample(pool.rows(), subsample, rng)?;
    Ok(pool.select_rows(&idx))
}
