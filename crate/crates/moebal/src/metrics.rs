//! Load-balance measurement: MaxVio = (max load - mean load) / mean load,
//! at batch, computation-batch, and global granularity, plus the layer
//! average reported for whole models. The mean (not the ideal K*T/N) is the
//! denominator, which is identical for token-choice routing and stays
//! well-defined when Expert Choice leaves tail tokens unassigned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RoutingAssignment;

/// Counting window for a [`LoadCounter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Batch,
    ComputationBatch,
    Global,
}

/// Per-expert token counts accumulated at one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadCounter {
    pub counts: Vec<u64>,
    pub granularity: Granularity,
    pub tokens_seen: u64,
}

impl LoadCounter {
    pub fn new(experts: usize, granularity: Granularity) -> Self {
        LoadCounter {
            counts: vec![0; experts],
            granularity,
            tokens_seen: 0,
        }
    }

    pub fn add_assignment(&mut self, a: &RoutingAssignment) -> Result<()> {
        if a.experts() != self.counts.len() {
            return Err(Error::contract(format!(
                "load counter: assignment over {} experts, counter has {}",
                a.experts(),
                self.counts.len()
            )));
        }
        for (c, l) in self.counts.iter_mut().zip(a.loads()) {
            *c += l;
        }
        self.tokens_seen += a.tokens() as u64;
        Ok(())
    }

    /// Associative merge for parallel accumulation.
    pub fn merge(&mut self, other: &LoadCounter) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::contract("load counter: merge width mismatch"));
        }
        for (c, o) in self.counts.iter_mut().zip(other.counts.iter()) {
            *c += o;
        }
        self.tokens_seen += other.tokens_seen;
        Ok(())
    }

    pub fn maxvio(&self) -> Result<f64> {
        if self.tokens_seen == 0 {
            return Err(Error::contract("maxvio: zero tokens seen"));
        }
        maxvio_of_counts(&self.counts)
    }
}

/// MaxVio of a raw count vector.
pub fn maxvio_of_counts(counts: &[u64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::contract("maxvio: no experts"));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::contract("maxvio: all counts zero"));
    }
    let mean = total as f64 / counts.len() as f64;
    let max = *counts.iter().max().unwrap() as f64;
    Ok((max - mean) / mean)
}

/// Per-step MaxVio series from per-step batch assignments.
pub fn maxvio_batch(assignments: &[RoutingAssignment]) -> Result<Vec<f64>> {
    assignments
        .iter()
        .map(|a| maxvio_of_counts(&a.loads()))
        .collect()
}

/// Global MaxVio over an accumulated counter.
pub fn maxvio_global(counter: &LoadCounter) -> Result<f64> {
    counter.maxvio()
}

/// Windowed MaxVio values; a trailing window that does not fill the
/// requested size is reported separately, never merged.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedMaxVio {
    pub window_samples: usize,
    pub windows: Vec<f64>,
    pub tail: Option<f64>,
}

impl WindowedMaxVio {
    /// Mean over full windows only.
    pub fn mean(&self) -> Option<f64> {
        if self.windows.is_empty() {
            None
        } else {
            Some(self.windows.iter().sum::<f64>() / self.windows.len() as f64)
        }
    }
}

/// MaxVio per computation batch: consecutive groups of
/// `micro_batch_size * ep_parallel` samples, where each sample carries its
/// own per-expert load vector.
pub fn maxvio_computation_batch(
    per_sample_loads: &[Vec<u64>],
    micro_batch_size: usize,
    ep_parallel: usize,
) -> Result<WindowedMaxVio> {
    if micro_batch_size == 0 || ep_parallel == 0 {
        return Err(Error::contract(
            "computation batch: micro_batch_size and ep_parallel must be > 0",
        ));
    }
    if per_sample_loads.is_empty() {
        return Err(Error::contract("computation batch: no samples"));
    }
    let experts = per_sample_loads[0].len();
    if per_sample_loads.iter().any(|l| l.len() != experts) {
        return Err(Error::contract("computation batch: ragged load vectors"));
    }
    let window = micro_batch_size * ep_parallel;
    let mut windows = Vec::new();
    let mut tail = None;
    for group in per_sample_loads.chunks(window) {
        let mut counts = vec![0u64; experts];
        for sample in group {
            for (c, &l) in counts.iter_mut().zip(sample.iter()) {
                *c += l;
            }
        }
        let v = maxvio_of_counts(&counts)?;
        if group.len() == window {
            windows.push(v);
        } else {
            tail = Some(v);
        }
    }
    Ok(WindowedMaxVio {
        window_samples: window,
        windows,
        tail,
    })
}

/// Arithmetic mean across layers.
pub fn layer_average(per_layer: &[f64]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(Error::contract("layer average: no layers"));
    }
    Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{expert_choice_select, topk_select, ExpertChoiceConfig, GateKind, RoutingScores};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_balance_is_zero() {
        assert_eq!(maxvio_of_counts(&[10, 10, 10, 10]).unwrap(), 0.0);
    }

    #[test]
    fn analytic_case() {
        assert_eq!(maxvio_of_counts(&[2, 1, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_tokens_is_contract_error() {
        let c = LoadCounter::new(4, Granularity::Global);
        assert!(matches!(c.maxvio(), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn matches_scalar_loop_oracle_on_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let n = rng.random_range(1..12usize);
            let counts: Vec<u64> = (0..n).map(|_| rng.random_range(0..100u64)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            // Scalar reference: explicit loop, no iterator shortcuts.
            let mut total = 0.0;
            let mut max = 0.0f64;
            for &c in &counts {
                total += c as f64;
                if c as f64 > max {
                    max = c as f64;
                }
            }
            let mean = total / n as f64;
            let want = (max - mean) / mean;
            assert_eq!(maxvio_of_counts(&counts).unwrap(), want);
        }
    }

    #[test]
    fn single_window_equals_batch_maxvio() {
        let per_sample = vec![vec![3u64, 1, 0], vec![0, 2, 2], vec![1, 1, 2]];
        let windowed = maxvio_computation_batch(&per_sample, 3, 1).unwrap();
        assert_eq!(windowed.windows.len(), 1);
        assert!(windowed.tail.is_none());
        let mut merged = vec![0u64; 3];
        for s in &per_sample {
            for (m, &v) in merged.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        assert_eq!(windowed.windows[0], maxvio_of_counts(&merged).unwrap());
    }

    #[test]
    fn expert_choice_window_equal_to_chunk_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, n, k) = (16usize, 4usize, 1usize);
        let vals: Vec<f64> = (0..t * n).map(|_| rng.random_range(0.05..0.95)).collect();
        let s = RoutingScores::from_matrix(t, n, vals, GateKind::Sigmoid).unwrap();
        let cfg = ExpertChoiceConfig {
            chunk_size: 8,
            shuffle: false,
            shuffle_seed: 0,
        };
        let a = expert_choice_select(&s, &cfg, k).unwrap();
        // One sample per chunk: each window covers exactly one chunk.
        let per_sample: Vec<Vec<u64>> = (0..2)
            .map(|w| a.slice_tokens(w * 8, 8).loads())
            .collect();
        let windowed = maxvio_computation_batch(&per_sample, 1, 1).unwrap();
        for v in windowed.windows {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn windowed_values_match_recount_oracle_and_tail_is_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples: Vec<Vec<u64>> = (0..7)
            .map(|_| (0..4).map(|_| rng.random_range(0..9u64) + 1).collect())
            .collect();
        let windowed = maxvio_computation_batch(&samples, 2, 1).unwrap();
        assert_eq!(windowed.windows.len(), 3);
        assert!(windowed.tail.is_some());
        for (w, pair) in windowed.windows.iter().zip(samples.chunks(2)) {
            let mut counts = vec![0u64; 4];
            for s in pair {
                for (c, &v) in counts.iter_mut().zip(s.iter()) {
                    *c += v;
                }
            }
            assert_eq!(*w, maxvio_of_counts(&counts).unwrap());
        }
        assert_eq!(
            windowed.tail.unwrap(),
            maxvio_of_counts(&samples[6]).unwrap()
        );
    }

    #[test]
    fn layer_average_cases() {
        assert_eq!(layer_average(&[0.4]).unwrap(), 0.4);
        assert!((layer_average(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(layer_average(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..2.0)).collect();
        let want = vals.iter().sum::<f64>() / 9.0;
        assert!((layer_average(&vals).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn maxvio_batch_series_matches_per_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let assignments: Vec<_> = (0..5)
            .map(|i| {
                let vals: Vec<f64> =
                    (0..6 * 3).map(|_| rng.random_range(0.05..0.95)).collect();
                let s = RoutingScores::from_matrix(6, 3, vals, GateKind::Sigmoid).unwrap();
                topk_select(&s, &[0.0; 3], 1 + (i % 2)).unwrap()
            })
            .collect();
        let series = maxvio_batch(&assignments).unwrap();
        for (v, a) in series.iter().zip(assignments.iter()) {
            assert_eq!(*v, maxvio_of_counts(&a.loads()).unwrap());
        }
    }

    proptest! {
        #[test]
        fn maxvio_nonnegative_and_zero_iff_equal(
            counts in proptest::collection::vec(0u64..50, 1..10),
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let v = maxvio_of_counts(&counts).unwrap();
            prop_assert!(v >= 0.0);
            let all_equal = counts.iter().all(|&c| c == counts[0]);
            prop_assert_eq!(v == 0.0, all_equal);
        }

        #[test]
        fn maxvio_is_scale_invariant(
            counts in proptest::collection::vec(0u64..50, 1..10),
            k in 1u64..5,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let scaled: Vec<u64> = counts.iter().map(|&c| c * k).collect();
            let a = maxvio_of_counts(&counts).unwrap();
            let b = maxvio_of_counts(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
