//! Forward-pass latency.

use std::time::Instant;

use super::train::Classifier;
use super::HarnessError;
use crate::data::metrics::LatencyStats;
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 30;

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `reps` forward passes of `batch` after `warmup` untimed ones.
pub fn benchmark_latency<C: Classifier + ?Sized>(
    model: &C,
    batch: &Tensor,
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats, HarnessError> {
    if reps < MIN_REPS {
        return Err(HarnessError::InvalidConfig(format!(
            "latency needs at least {MIN_REPS} timed repetitions, got {reps}"
        )));
    }
    for _ in 0..warmup {
        std::hint::black_box(model.batch_logits(batch)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.batch_logits(batch)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / reps as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        batch_size: batch.shape()[0],
        warmup,
        reps,
        mean_ms: mean_ms.max(f64::MIN_POSITIVE),
        p50_ms: nearest_rank(&times, 0.50),
        p95_ms: nearest_rank(&times, 0.95),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchComparison {
    pub reference: LatencyStats,
    pub candidate: LatencyStats,
    /// Reference mean over candidate mean.
    pub speedup: f64,
}

impl BenchComparison {
    pub fn new(reference: LatencyStats, candidate: LatencyStats) -> Self {
        let speedup = candidate.speedup_over(&reference);
        BenchComparison {
            reference,
            candidate,
            speedup,
        }
    }
}
