//! Distributional diagnostics: excess kurtosis, negentropy, histograms and
//! Gram drift.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{gram_rows, spectral_norm, Matrix};
use crate::model::ActivationTensor;

pub const DEFAULT_BINS: usize = 64;
pub const GRAM_DRIFT_TOL: f64 = 1e-9;

/// Mean and central moments with `1/n` normalization.
pub fn central_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in x {
        let c = v - mean;
        let c2 = c * c;
        m2 += c2;
        m4 += c2 * c2;
    }
    (mean, m2 / n, m4 / n)
}

/// Plain moment estimator `m4 / m2^2 - 3`.
pub fn excess_kurtosis(samples: &[f64]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(LabError::Data(format!("kurtosis needs at least 4 samples, got {}", samples.len())));
    }
    let (_, m2, m4) = central_moments(samples);
    if !(m2 > 0.0) {
        return Err(LabError::DegenerateDistribution("zero sample variance".into()));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

/// Negentropy in nats: Gaussian entropy at the sample variance minus the
/// Vasicek m-spacing entropy estimate with `m = floor(sqrt(n))`.
pub fn negentropy(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 100 {
        return Err(LabError::Data(format!("negentropy needs at least 100 samples, got {n}")));
    }
    let (_, var, _) = central_moments(samples);
    if !(var > 0.0) {
        return Err(LabError::DegenerateDistribution("zero sample variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(gaussian_entropy(var) - vasicek_entropy_sorted(&sorted))
}

pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
}

fn vasicek_entropy_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let m = ((n as f64).sqrt().floor() as usize).max(1);
    let factor = n as f64 / (2.0 * m as f64);
    let mut acc = 0.0;
    for i in 0..n {
        let hi = sorted[(i + m).min(n - 1)];
        let lo = sorted[i.saturating_sub(m)];
        // ties would give ln 0; floor the spacing so the estimate stays finite
        let spacing = (hi - lo).max(f64::MIN_POSITIVE);
        acc += (factor * spacing).ln();
    }
    acc / n as f64
}

/// `||w w^T - I||_2` for a square matrix.
pub fn gram_drift(w: &Matrix) -> Result<f64> {
    gram_drift_with_tol(w, GRAM_DRIFT_TOL)
}

pub fn gram_drift_with_tol(w: &Matrix, tol: f64) -> Result<f64> {
    if !w.is_square() {
        return Err(LabError::Dimension(format!("gram drift needs a square matrix, got {:?}", w.shape())));
    }
    let e = gram_rows(w).sub_scaled_identity(1.0)?;
    Ok(spectral_norm(&e, tol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width bins over `[min, max]`; the last bin is closed. A constant
/// input gets unit width.
pub fn histogram(samples: &[f64], n_bins: usize) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(LabError::EmptyData("histogram of an empty sample".into()));
    }
    if n_bins < 2 {
        return Err(LabError::Parameter(format!("histogram needs at least 2 bins, got {n_bins}")));
    }
    let (lo, hi) = min_max(samples);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let width = range / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|k| if k == n_bins { lo + range } else { lo + k as f64 * width })
        .collect();
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        let k = (((x - lo) / width).floor() as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// How a tapped tensor is reduced to one set of statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// All batch, token and channel scalars form one sample.
    #[default]
    Joint,
    /// Kurtosis and negentropy are averaged over per-channel samples.
    PerChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layer_index: usize,
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub excess_kurtosis: f64,
    /// NaN when fewer than 100 scalars are available.
    pub negentropy: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

impl ActivationStats {
    pub const CSV_HEADER: [&'static str; 8] = ["layer", "n", "mean", "var", "kurtosis", "negentropy", "min", "max"];

    pub fn csv_record(&self) -> [String; 8] {
        [
            self.layer_index.to_string(),
            self.n_samples.to_string(),
            self.mean.to_string(),
            self.variance.to_string(),
            self.excess_kurtosis.to_string(),
            self.negentropy.to_string(),
            self.min.to_string(),
            self.max.to_string(),
        ]
    }

    pub fn from_samples(samples: &[f64], layer_index: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(LabError::EmptyData("no activations to summarize".into()));
        }
        let (mean, variance, m4) = central_moments(samples);
        if !(variance > 0.0) {
            return Err(LabError::DegenerateDistribution(format!("layer {layer_index} has zero variance")));
        }
        let excess_kurtosis = m4 / (variance * variance) - 3.0;
        let negentropy = if samples.len() >= 100 { negentropy(samples)? } else { f64::NAN };
        let (min, max) = min_max(samples);
        Ok(Self {
            layer_index,
            n_samples: samples.len(),
            mean,
            variance,
            excess_kurtosis,
            negentropy,
            min,
            max,
            histogram: histogram(samples, DEFAULT_BINS)?,
        })
    }
}

pub fn layer_stats(activations: &ActivationTensor, layer_index: usize) -> Result<ActivationStats> {
    layer_stats_with(activations, layer_index, Pooling::Joint)
}

pub fn layer_stats_with(activations: &ActivationTensor, layer_index: usize, pooling: Pooling) -> Result<ActivationStats> {
    let mut stats = ActivationStats::from_samples(activations.data(), layer_index)?;
    if pooling == Pooling::PerChannel {
        let per = per_channel(activations)?;
        let k = per.len() as f64;
        stats.excess_kurtosis = per.iter().map(|c| c.0).sum::<f64>() / k;
        stats.negentropy = per.iter().map(|c| c.1).sum::<f64>() / k;
    }
    Ok(stats)
}

/// `(kurtosis, negentropy)` of every channel.
pub fn per_channel(activations: &ActivationTensor) -> Result<Vec<(f64, f64)>> {
    let d = activations.dim();
    let rows = activations.as_matrix().rows();
    let mut column = vec![0.0; rows];
    (0..d)
        .map(|c| {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = activations.as_matrix()[(r, c)];
            }
            let g = excess_kurtosis(&column)?;
            let j = if rows >= 100 { negentropy(&column)? } else { f64::NAN };
            Ok((g, j))
        })
        .collect()
}

/// Drift of each tracked matrix at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramDriftTrace {
    pub step: usize,
    pub drift: Vec<(String, f64)>,
}

/// Streaming mean and central moments up to order four, mergeable in a fixed
/// order (pairwise update formulas of Pébay).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn extend(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.push(x));
    }

    pub fn merge(&self, b: &Moments) -> Moments {
        if self.n == 0.0 {
            return *b;
        }
        if b.n == 0.0 {
            return *self;
        }
        let (na, nb) = (self.n, b.n);
        let n = na + nb;
        let d = b.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + b.m2 + d2 * na * nb / n;
        let m3 = self.m3 + b.m3 + d2 * d * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * b.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + b.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * b.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * b.m3 - nb * self.m3) / n;
        Moments { n, mean: self.mean + d * nb / n, m2, m3, m4 }
    }

    pub fn variance(&self) -> f64 {
        self.m2 / self.n
    }

    /// Raw central fourth moment `E[(x - mean)^4]`.
    pub fn central4(&self) -> f64 {
        self.m4 / self.n
    }

    pub fn excess_kurtosis(&self) -> Result<f64> {
        if self.n < 4.0 {
            return Err(LabError::Data("kurtosis needs at least 4 samples".into()));
        }
        if !(self.m2 > 0.0) {
            return Err(LabError::DegenerateDistribution("zero sample variance".into()));
        }
        Ok(self.n * self.m4 / (self.m2 * self.m2) - 3.0)
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, f64::NAN);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{haar_orthogonal, RngStream};

    fn draws(n: usize, seed: u64, f: impl Fn(&mut RngStream) -> f64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 0);
        (0..n).map(|_| f(&mut r)).collect()
    }

    #[test]
    fn kurtosis_reference_distributions() {
        let g = draws(1_000_000, 1, |r| r.gaussian());
        assert!(excess_kurtosis(&g).unwrap().abs() <= 0.05);
        let u = draws(1_000_000, 2, |r| r.uniform_range(-1.0, 1.0));
        assert!((excess_kurtosis(&u).unwrap() + 1.2).abs() <= 0.05);
        let l = draws(1_000_000, 3, |r| r.laplace(1.0));
        assert!((excess_kurtosis(&l).unwrap() - 3.0).abs() <= 0.1);
    }

    #[test]
    fn kurtosis_errors() {
        assert!(matches!(excess_kurtosis(&[1.0; 10]), Err(LabError::DegenerateDistribution(_))));
        assert!(matches!(excess_kurtosis(&[1.0, 2.0]), Err(LabError::Data(_))));
    }

    #[test]
    fn negentropy_reference_distributions() {
        let g = draws(1_000_000, 4, |r| r.gaussian());
        assert!(negentropy(&g).unwrap().abs() <= 0.02);
        let l = draws(1_000_000, 5, |r| r.laplace(1.0));
        let expected = 0.5 * (std::f64::consts::PI * std::f64::consts::E).ln() - 1.0;
        assert!((negentropy(&l).unwrap() - expected).abs() <= 0.02);
        let u = draws(1_000_000, 6, |r| r.uniform());
        let expected = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E / 12.0).ln();
        assert!((negentropy(&u).unwrap() - expected).abs() <= 0.02);
        assert!(matches!(negentropy(&[2.0; 200]), Err(LabError::DegenerateDistribution(_))));
    }

    #[test]
    fn gram_drift_examples() {
        assert_eq!(gram_drift(&Matrix::identity(5)).unwrap(), 0.0);
        assert!((gram_drift(&Matrix::identity(5).scale(2.0)).unwrap() - 3.0).abs() < 1e-12);
        let mut rng = RngStream::new(7, 0);
        let q = haar_orthogonal(&mut rng, 48, 48).unwrap();
        assert!(gram_drift(&q).unwrap() <= 1e-9);
        assert!(matches!(gram_drift(&Matrix::zeros(2, 3)), Err(LabError::Dimension(_))));
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 1.5, 3.0]);
        assert_eq!(h.counts, vec![2, 2]);
        let h = histogram(&[4.0; 9], 8).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 9);
        assert!(matches!(histogram(&[], 4), Err(LabError::EmptyData(_))));

        let g = draws(100_000, 8, |r| r.gaussian());
        let h = histogram(&g, 64).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 100_000);
        // symmetry in the bulk: mass left and right of zero
        let left: u64 = h.edges.windows(2).zip(&h.counts).filter(|(e, _)| e[1] <= 0.0).map(|(_, c)| c).sum();
        let right: u64 = h.edges.windows(2).zip(&h.counts).filter(|(e, _)| e[0] >= 0.0).map(|(_, c)| c).sum();
        let skew = (left as f64 - right as f64).abs() / 100_000.0;
        assert!(skew <= 0.05, "{skew}");
    }

    #[test]
    fn layer_stats_examples() {
        let t = ActivationTensor::zeros(2, 3, 4);
        assert!(matches!(layer_stats(&t, 0), Err(LabError::DegenerateDistribution(_))));

        let mut r = RngStream::new(9, 0);
        let data: Vec<f64> = (0..64 * 16 * 32).map(|_| r.gaussian()).collect();
        let t = ActivationTensor::from_vec(64, 16, 32, data).unwrap();
        let s = layer_stats(&t, 3).unwrap();
        assert_eq!(s.layer_index, 3);
        assert_eq!(s.n_samples, 64 * 16 * 32);
        assert!(s.excess_kurtosis.abs() < 0.1);
        assert!(s.negentropy.abs() < 0.05);
        assert_eq!(s.histogram.counts.iter().sum::<u64>() as usize, s.n_samples);

        let data: Vec<f64> = (0..64 * 16 * 32).map(|_| r.laplace(1.0)).collect();
        let t = ActivationTensor::from_vec(64, 16, 32, data).unwrap();
        assert!((layer_stats(&t, 0).unwrap().excess_kurtosis - 3.0).abs() < 0.3);
        let pc = layer_stats_with(&t, 0, Pooling::PerChannel).unwrap();
        assert!((pc.excess_kurtosis - 3.0).abs() < 0.5);
    }

    #[test]
    fn streaming_moments_match_two_pass() {
        let x = draws(10_000, 10, |r| r.laplace(0.7) + 2.0);
        let mut a = Moments::default();
        a.extend(&x[..3000]);
        let mut b = Moments::default();
        b.extend(&x[3000..]);
        let merged = a.merge(&b);
        let mut whole = Moments::default();
        whole.extend(&x);
        let direct = excess_kurtosis(&x).unwrap();
        assert!((merged.excess_kurtosis().unwrap() - direct).abs() < 1e-9);
        assert!((whole.excess_kurtosis().unwrap() - direct).abs() < 1e-9);
        let (m, v, _) = central_moments(&x);
        assert!((merged.mean - m).abs() < 1e-12);
        assert!((merged.variance() - v).abs() < 1e-10);
    }

    #[test]
    fn csv_row_layout() {
        let mut r = RngStream::new(11, 0);
        let x: Vec<f64> = (0..500).map(|_| r.gaussian()).collect();
        let s = ActivationStats::from_samples(&x, 2).unwrap();
        let rec = s.csv_record();
        assert_eq!(rec.len(), ActivationStats::CSV_HEADER.len());
        assert_eq!(rec[0], "2");
        assert_eq!(rec[1], "500");
    }
}
