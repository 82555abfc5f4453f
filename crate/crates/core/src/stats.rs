//! Batch-means accumulator for correlated time series.

use serde::{Deserialize, Serialize};

/// Running mean with a batch-means standard error.
///
/// Samples are grouped into consecutive batches of fixed length; the
/// standard error is the spread of completed batch means over `√n_batches`.
/// Merging combines completed batches exactly (Chan's update) and adds the
/// raw totals. A partially filled batch of the merged-in accumulator only
/// contributes to the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeans {
    batch_len: usize,
    total: f64,
    count: u64,
    current: f64,
    current_count: usize,
    n_batches: u64,
    batch_mean: f64,
    batch_m2: f64,
}

impl BatchMeans {
    pub fn new(batch_len: usize) -> Self {
        assert!(batch_len > 0, "batch length must be positive");
        BatchMeans {
            batch_len,
            total: 0.0,
            count: 0,
            current: 0.0,
            current_count: 0,
            n_batches: 0,
            batch_mean: 0.0,
            batch_m2: 0.0,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.total += x;
        self.count += 1;
        self.current += x;
        self.current_count += 1;
        if self.current_count == self.batch_len {
            let m = self.current / self.batch_len as f64;
            self.n_batches += 1;
            let delta = m - self.batch_mean;
            self.batch_mean += delta / self.n_batches as f64;
            self.batch_m2 += delta * (m - self.batch_mean);
            self.current = 0.0;
            self.current_count = 0;
        }
    }

    pub fn merge(&mut self, other: &BatchMeans) {
        self.total += other.total;
        self.count += other.count;
        if other.n_batches > 0 {
            let (na, nb) = (self.n_batches as f64, other.n_batches as f64);
            let n = na + nb;
            let delta = other.batch_mean - self.batch_mean;
            self.batch_mean += delta * nb / n;
            self.batch_m2 += other.batch_m2 + delta * delta * na * nb / n;
            self.n_batches += other.n_batches;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn n_batches(&self) -> u64 {
        self.n_batches
    }

    pub fn batch_len(&self) -> usize {
        self.batch_len
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }

    pub fn sum(&self) -> f64 {
        self.total
    }

    /// Sample variance of the completed batch means.
    pub fn batch_variance(&self) -> f64 {
        if self.n_batches < 2 {
            f64::NAN
        } else {
            self.batch_m2 / (self.n_batches - 1) as f64
        }
    }

    /// Standard error of the mean; `NaN` with fewer than two batches.
    pub fn stderr(&self) -> f64 {
        (self.batch_variance() / self.n_batches as f64).sqrt()
    }
}
