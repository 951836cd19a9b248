//! Wall-clock scaling benchmark for the chunked selective scan.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperssm_core::ssm::{selective_scan_chunked, ScanInputs};
use hyperssm_core::tensor::Tensor;

use crate::error::{CliError, CliResult};

/// One benchmark row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub length: usize,
    pub median_ms: f64,
    /// Median relative to the previous (shorter) row; `None` on the first.
    pub ratio: Option<f64>,
}

/// Settings for the scan benchmark.
#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub chunk: usize,
    pub trials: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch: 4,
            channels: 32,
            state: 16,
            chunk: 64,
            trials: 5,
        }
    }
}

fn random_scan_inputs(n: usize, s: &BenchSettings, seed: u64) -> ScanInputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, l) = (s.batch, s.channels, s.state);
    ScanInputs::new(
        Tensor::from_fn(vec![b, n, m, l], |_| rng.gen_range(0.01..0.99)).unwrap(),
        Tensor::from_fn(vec![b, n, m, l], |_| rng.gen_range(-1.0..1.0)).unwrap(),
        Tensor::from_fn(vec![b, n, l], |_| rng.gen_range(-1.0..1.0)).unwrap(),
        Tensor::from_fn(vec![b, n, m], |_| rng.gen_range(-1.0..1.0)).unwrap(),
    )
    .expect("benchmark shapes are consistent")
}

/// Times the chunked scan forward at each length and reports
/// `(length, median over trials, ratio to the previous length)`.
pub fn bench_scan(lengths: &[usize], settings: &BenchSettings) -> CliResult<Vec<BenchRow>> {
    if lengths.is_empty() {
        return Err(CliError::Usage("need at least one sequence length".into()));
    }
    if settings.trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for (i, &n) in lengths.iter().enumerate() {
        let inputs = random_scan_inputs(n, settings, 0xBE5C + i as u64);
        // Warm-up pass outside the timed trials.
        let warm = selective_scan_chunked(&inputs, settings.chunk)?;
        std::hint::black_box(warm);
        let mut times_ms: Vec<f64> = (0..settings.trials)
            .map(|_| {
                let started = Instant::now();
                let out = selective_scan_chunked(&inputs, settings.chunk).expect("validated inputs");
                std::hint::black_box(out);
                started.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times_ms.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
        let median_ms = times_ms[times_ms.len() / 2];
        let ratio = rows.last().map(|prev: &BenchRow| median_ms / prev.median_ms);
        rows.push(BenchRow {
            length: n,
            median_ms,
            ratio,
        });
    }
    Ok(rows)
}
