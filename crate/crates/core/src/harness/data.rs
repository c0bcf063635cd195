//! Synthetic next-token data from an order-1 Markov chain.

use rand_distr::{Distribution, Gamma};

use crate::error::{LabError, Result};
use crate::linalg::{Matrix, RngStream};
use crate::model::TokenBatch;

/// RNG stream ids under the data seed.
const CHAIN_STREAM: u64 = 0xC4A1;
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const CALIB_STREAM: u64 = 3;
pub const STATS_STREAM: u64 = 4;

/// Inputs and their next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBatch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    pub vocab: usize,
    /// Dirichlet concentration of every transition row.
    pub concentration: f64,
    pub transition: Matrix,
    pub stationary: Vec<f64>,
}

impl MarkovChain {
    /// Draws the concentration (log-uniform on `[0.05, 0.2]`) and then each
    /// row from a symmetric Dirichlet.
    pub fn new(data_seed: u64, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(LabError::Config(format!("vocab must be at least 2, got {vocab}")));
        }
        let mut rng = RngStream::new(data_seed, CHAIN_STREAM);
        let concentration = rng.uniform_range(0.05f64.ln(), 0.2f64.ln()).exp();
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| LabError::Internal(e.to_string()))?;
        let mut transition = Matrix::zeros(vocab, vocab);
        for r in 0..vocab {
            let row = transition.row_mut(r);
            row.iter_mut().for_each(|p| *p = gamma.sample(&mut rng));
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter_mut().for_each(|p| *p /= z);
            } else {
                row.iter_mut().for_each(|p| *p = 1.0 / vocab as f64);
            }
        }
        let stationary = stationary(&transition);
        Ok(Self { vocab, concentration, transition, stationary })
    }

    /// Mean conditional entropy `sum_i pi_i H(P_i)` in nats, the best
    /// achievable cross-entropy for sequences started from `pi`.
    pub fn optimal_cross_entropy(&self) -> f64 {
        (0..self.vocab)
            .map(|i| {
                let h: f64 = self.transition.row(i).iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
                self.stationary[i] * h
            })
            .sum()
    }

    fn draw(rng: &mut RngStream, probs: &[f64]) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// `batch` sequences of `t + 1` states started from the stationary law;
    /// inputs are the first `t`, targets the last `t`.
    pub fn sample(&self, rng: &mut RngStream, batch: usize, t: usize) -> SynthBatch {
        let mut ids = Vec::with_capacity(batch * t);
        let mut targets = Vec::with_capacity(batch * t);
        for _ in 0..batch {
            let mut s = Self::draw(rng, &self.stationary);
            for _ in 0..t {
                let next = Self::draw(rng, self.transition.row(s));
                ids.push(s);
                targets.push(next);
                s = next;
            }
        }
        SynthBatch { tokens: TokenBatch::new(batch, t, ids).expect("sizes agree"), targets }
    }
}

fn stationary(p: &Matrix) -> Vec<f64> {
    let n = p.rows();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, w) in pi.iter().enumerate() {
            for (nj, pij) in next.iter_mut().zip(p.row(i)) {
                *nj += w * pij;
            }
        }
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= z);
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// `count` batches from stream `stream` of the data seed.
pub fn synth_data(chain: &MarkovChain, data_seed: u64, stream: u64, count: usize, batch: usize, t: usize) -> Vec<SynthBatch> {
    let mut rng = RngStream::new(data_seed, stream);
    (0..count).map(|_| chain.sample(&mut rng, batch, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_stochastic_and_pi_is_stationary() {
        let c = MarkovChain::new(7, 32).unwrap();
        for r in 0..32 {
            assert!((c.transition.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for j in 0..32 {
            let v: f64 = (0..32).map(|i| c.stationary[i] * c.transition[(i, j)]).sum();
            assert!((v - c.stationary[j]).abs() < 1e-12);
        }
        let h = c.optimal_cross_entropy();
        assert!(h > 0.0 && h < 32f64.ln());
    }

    #[test]
    fn sampling_is_deterministic_and_chained() {
        let c = MarkovChain::new(1, 8).unwrap();
        let a = synth_data(&c, 1, TRAIN_STREAM, 2, 3, 5);
        let b = synth_data(&c, 1, TRAIN_STREAM, 2, 3, 5);
        assert_eq!(a, b);
        assert_ne!(a, synth_data(&c, 1, EVAL_STREAM, 2, 3, 5));
        for s in &a {
            for r in 0..3 {
                for k in 0..4 {
                    assert_eq!(s.targets[r * 5 + k], s.tokens.ids[r * 5 + k + 1]);
                }
            }
        }
    }

    #[test]
    fn empirical_transitions_match() {
        let c = MarkovChain::new(3, 4).unwrap();
        let data = synth_data(&c, 3, TRAIN_STREAM, 50, 20, 50);
        let mut counts = [[0.0f64; 4]; 4];
        for s in &data {
            for (a, b) in s.tokens.ids.iter().zip(&s.targets) {
                counts[*a][*b] += 1.0;
            }
        }
        for i in 0..4 {
            let n: f64 = counts[i].iter().sum();
            if n < 2000.0 {
                continue;
            }
            for j in 0..4 {
                assert!((counts[i][j] / n - c.transition[(i, j)]).abs() < 0.03);
            }
        }
    }
}
