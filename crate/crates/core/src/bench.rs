//! Forward-pass timing as a function of the RoI count.
//!
//! The correlation step multiplies an `(N, D_f*H*W)` matrix by its partner's
//! transpose, so its cost grows as `N^2` while every convolution grows as
//! `N`. Timing the whole forward over a range of `N` and fitting a log-log
//! slope exposes which term dominates.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{init_params, nlroi_forward, BlockDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchDims {
    pub d: usize,
    pub d_f: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
}

impl BenchDims {
    pub fn block(&self) -> Result<BlockDims> {
        BlockDims::new(self.d, self.d_f, self.d_g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    /// Median wall time of one forward pass.
    pub median: Duration,
    /// `2 * N^2 * D_f * H * W`, the multiply-adds of the correlation product.
    pub attention_flops: u64,
}

impl fmt::Display for BenchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.9}\t{}", self.n, self.median.as_secs_f64(), self.attention_flops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dims: BenchDims,
    pub reps: usize,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    /// Least-squares slope of `ln(time)` against `ln(N)` over records with
    /// `lo <= N <= hi`. `None` with fewer than two such records.
    pub fn log_log_slope(&self, lo: usize, hi: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .records
            .iter()
            .filter(|r| (lo..=hi).contains(&r.n))
            .map(|r| ((r.n as f64).ln(), r.median.as_secs_f64().ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

pub fn attention_flops(n: usize, dims: &BenchDims) -> u64 {
    2 * (n as u64).pow(2) * (dims.d_f * dims.h * dims.w) as u64
}

/// Times `reps` binary32 forward passes per `N` on the calling thread and
/// keeps the median. Inputs and weights are seeded; only timings vary.
pub fn run_bench(n_list: &[usize], dims: BenchDims, reps: usize) -> Result<BenchReport> {
    if n_list.is_empty() {
        return Err(Error::invalid("bench", "n-list must not be empty"));
    }
    if n_list.contains(&0) || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bench", format!("n-list {n_list:?} must be positive and strictly increasing")));
    }
    if reps < MIN_REPS {
        return Err(Error::invalid("bench", format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    if dims.h == 0 || dims.w == 0 {
        return Err(Error::invalid("bench", "spatial extents must be positive"));
    }
    let params = init_params::<f32>(dims.block()?, 0);
    let mut records = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let x = Tensor::<f32>::uniform([n, dims.d, dims.h, dims.w], -1.0, 1.0, &mut rng);
        // Warm-up pass so allocation of the first run is not measured.
        std::hint::black_box(nlroi_forward(&x, &params)?);
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            std::hint::black_box(nlroi_forward(std::hint::black_box(&x), &params)?);
            times.push(start.elapsed().max(Duration::from_nanos(1)));
        }
        times.sort();
        let median = if reps % 2 == 1 {
            times[reps / 2]
        } else {
            (times[reps / 2 - 1] + times[reps / 2]) / 2
        };
        records.push(BenchRecord {
            n,
            median,
            attention_flops: attention_flops(n, &dims),
        });
    }
    Ok(BenchReport { dims, reps, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: BenchDims = BenchDims { d: 4, d_f: 4, d_g: 2, h: 3, w: 3 };

    #[test]
    fn flop_formula() {
        let dims = BenchDims { d: 8, d_f: 4, d_g: 2, h: 3, w: 3 };
        assert_eq!(attention_flops(8, &dims), 4608);
    }

    #[test]
    fn one_record_per_n() {
        let report = run_bench(&[1, 3, 5], DIMS, 10).unwrap();
        assert_eq!(report.records.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(report.records.iter().all(|r| r.median > Duration::ZERO));
        let line = report.records[0].to_string();
        assert_eq!(line.split('\t').count(), 3);
        assert!(line.starts_with("1\t"));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(run_bench(&[], DIMS, 10).is_err());
        assert!(run_bench(&[4, 2], DIMS, 10).is_err());
        assert!(run_bench(&[2, 2], DIMS, 10).is_err());
        assert!(run_bench(&[0, 2], DIMS, 10).is_err());
        assert!(run_bench(&[2], DIMS, 3).is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let records = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| BenchRecord {
                n,
                median: Duration::from_nanos((n * n * 100) as u64),
                attention_flops: 0,
            })
            .collect();
        let report = BenchReport { dims: DIMS, reps: 10, records };
        assert!((report.log_log_slope(8, 64).unwrap() - 2.0).abs() < 1e-9);
        assert!(report.log_log_slope(100, 200).is_none());
    }
}
