//! Chunked Monte Carlo moment estimation.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::RngStream;
use crate::par::Exec;
use crate::stats::{mean_and_se, Moments};

/// Number of independent chunks; also the batch count for standard errors.
pub const CHUNKS: usize = 64;

/// Coordinate distributions with zero mean and unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDist {
    Gaussian,
    Laplace,
    Uniform,
    Rademacher,
}

impl InputDist {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::Gaussian),
            "laplace" => Ok(Self::Laplace),
            "uniform" => Ok(Self::Uniform),
            "rademacher" => Ok(Self::Rademacher),
            other => Err(LabError::Config(format!("unknown input distribution '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Laplace => "laplace",
            Self::Uniform => "uniform",
            Self::Rademacher => "rademacher",
        }
    }

    /// Exact excess kurtosis.
    pub fn excess_kurtosis(self) -> f64 {
        match self {
            Self::Gaussian => 0.0,
            Self::Laplace => 3.0,
            Self::Uniform => -1.2,
            Self::Rademacher => -2.0,
        }
    }

    #[inline]
    pub fn draw(self, rng: &mut RngStream) -> f64 {
        match self {
            Self::Gaussian => rng.gaussian(),
            Self::Laplace => rng.laplace(std::f64::consts::FRAC_1_SQRT_2),
            Self::Uniform => rng.uniform_range(-3f64.sqrt(), 3f64.sqrt()),
            Self::Rademacher => rng.sign(),
        }
    }
}

/// Excess kurtosis of a Monte Carlo sample with a batch-means standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
    pub moments: Moments,
    pub per_chunk: Vec<f64>,
}

/// Splits `n` draws over [`CHUNKS`] child streams of `rng`; `fill(rng, count,
/// acc)` pushes `count` samples. Chunks are merged in index order.
pub fn kurtosis_mc<F>(exec: Exec, rng: &RngStream, n: usize, fill: F) -> Result<McEstimate>
where
    F: Fn(&mut RngStream, usize, &mut Moments) + Sync + Send,
{
    moments_mc(exec, rng, n, fill, |m| m.excess_kurtosis())
}

/// As [`kurtosis_mc`] with an arbitrary statistic of the merged moments.
pub fn moments_mc<F, S>(exec: Exec, rng: &RngStream, n: usize, fill: F, stat: S) -> Result<McEstimate>
where
    F: Fn(&mut RngStream, usize, &mut Moments) + Sync + Send,
    S: Fn(&Moments) -> Result<f64>,
{
    if n < CHUNKS * 4 {
        return Err(LabError::Parameter(format!("need at least {} samples, got {n}", CHUNKS * 4)));
    }
    let chunks = exec.map(CHUNKS, |c| {
        let count = n / CHUNKS + usize::from(c < n % CHUNKS);
        let mut r = rng.split(c as u64);
        let mut m = Moments::default();
        fill(&mut r, count, &mut m);
        m
    });
    let per_chunk = chunks.iter().map(&stat).collect::<Result<Vec<_>>>()?;
    let moments = chunks.iter().fold(Moments::default(), |a, b| a.merge(b));
    let (_, se) = mean_and_se(&per_chunk);
    Ok(McEstimate { value: stat(&moments)?, se, moments, per_chunk })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_distributions_are_standardized() {
        for dist in [InputDist::Gaussian, InputDist::Laplace, InputDist::Uniform, InputDist::Rademacher] {
            assert_eq!(InputDist::parse(dist.label()).unwrap(), dist);
            let est = kurtosis_mc(Exec::Sequential, &RngStream::new(1, 0), 400_000, |r, k, m| {
                (0..k).for_each(|_| m.push(dist.draw(r)))
            })
            .unwrap();
            assert!(est.moments.mean.abs() < 0.01);
            assert!((est.moments.variance() - 1.0).abs() < 0.02);
            assert!((est.value - dist.excess_kurtosis()).abs() < 0.1_f64.max(4.0 * est.se), "{dist:?} {}", est.value);
        }
        assert!(matches!(InputDist::parse("cauchy"), Err(LabError::Config(_))));
    }

    #[test]
    fn execution_mode_does_not_change_results() {
        let f = |r: &mut RngStream, k: usize, m: &mut Moments| (0..k).for_each(|_| m.push(r.laplace(1.0)));
        let a = kurtosis_mc(Exec::Sequential, &RngStream::new(5, 0), 10_000, f).unwrap();
        let b = kurtosis_mc(Exec::Parallel, &RngStream::new(5, 0), 10_000, f).unwrap();
        assert_eq!(a, b);
    }
}
