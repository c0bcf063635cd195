//! Kurtosis of activations under nonlinearities, mixing, residual addition,
//! softmax and deep stacks.

use crate::error::{LabError, Result};
use crate::linalg::{haar_orthogonal, matmul_nt, Matrix, RngStream};
use crate::model::{gelu, norm_forward, ActivationTensor, NormKind};
use crate::par::Exec;
use crate::stats::{mean_and_se, Moments};

use super::mc::{kurtosis_mc, InputDist};
use super::report::{Check, ExperimentReport, ReportRow};
use super::{combine, raw_series, RAW_HEADER};

const STREAM_ACTIVATION: u64 = 0x100;
const STREAM_MIXING: u64 = 0x200;
const STREAM_RESIDUAL: u64 = 0x300;
const STREAM_ORACLE: u64 = 0x380;
const STREAM_SOFTMAX: u64 = 0x400;
const STREAM_CONTRACTION: u64 = 0x500;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Excess kurtosis of standardized `phi(g)`, `g ~ N(0, 1)`, for ReLU, GELU
/// and the identity.
pub fn activation_kurtosis_constants(exec: Exec, seed: u64, n: usize) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("relu-gelu-constants", seed);
    report.param("n", n).raw(&RAW_HEADER);
    let cases: [(&str, fn(f64) -> f64, f64, f64); 3] =
        [("relu", relu, 2.4076, 0.02), ("gelu", gelu, 3.0847, 0.05), ("identity", |x| x, 0.0, 0.0)];
    for (k, (label, phi, predicted, tol)) in cases.into_iter().enumerate() {
        let rng = RngStream::new(seed, STREAM_ACTIVATION + k as u64);
        let est = kurtosis_mc(exec, &rng, n, |r, count, m| {
            for _ in 0..count {
                m.push(phi(r.gaussian()));
            }
        })?;
        let formula = if label == "identity" { "Gaussian input unchanged" } else { "published constant" };
        report.row(ReportRow::new(format!("gamma[{label}]"), formula, predicted, est.value, est.se, Check::Abs { tol }));
        raw_series(&mut report, label, &est.per_chunk);
    }
    Ok(report)
}

/// Mixing row used by [`mixing_kurtosis_experiment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// First row of a Haar orthogonal matrix, fixed over samples.
    Haar,
    /// `+-1/sqrt(d)` with random signs, fixed over samples.
    EqualMagnitude,
    /// Fresh `N(0, 1/d)` entries for every sample.
    Gaussian,
}

impl RowKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "haar" => Ok(Self::Haar),
            "equal_magnitude" => Ok(Self::EqualMagnitude),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(LabError::Config(format!("unknown row kind '{other}'"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Haar => "haar",
            Self::EqualMagnitude => "equal_magnitude",
            Self::Gaussian => "gaussian",
        }
    }
}

/// Kurtosis of `y = sum_i a_i u_i` for iid standardized `u_i`.
pub fn mixing_kurtosis_experiment(exec: Exec, seed: u64, d: usize, input: &str, row: &str, n: usize) -> Result<ExperimentReport> {
    let dist = InputDist::parse(input)?;
    let kind = RowKind::parse(row)?;
    if d == 0 {
        return Err(LabError::Parameter("d must be positive".into()));
    }
    let name = format!("mixing[{input},{row},d={d}]");
    let mut report = ExperimentReport::new(&name, seed);
    report.param("d", d).param("input", input).param("row", row).param("n", n).raw(&RAW_HEADER);
    let mut rng = RngStream::new(seed, STREAM_MIXING);
    let gamma_u = dist.excess_kurtosis();
    let fixed: Option<Vec<f64>> = match kind {
        RowKind::Haar => Some(haar_orthogonal(&mut rng, d, d)?.row(0).to_vec()),
        RowKind::EqualMagnitude => Some((0..d).map(|_| rng.sign() / (d as f64).sqrt()).collect()),
        RowKind::Gaussian => None,
    };
    let sample_rng = rng.split(1);
    let est = match &fixed {
        Some(a) => kurtosis_mc(exec, &sample_rng, n, |r, count, m| {
            for _ in 0..count {
                m.push(a.iter().map(|ai| ai * dist.draw(r)).sum());
            }
        })?,
        None => {
            let std = 1.0 / (d as f64).sqrt();
            kurtosis_mc(exec, &sample_rng, n, |r, count, m| {
                for _ in 0..count {
                    let mut y = 0.0;
                    for _ in 0..d {
                        let a = std * r.gaussian();
                        y += a * dist.draw(r);
                    }
                    m.push(y);
                }
            })?
        }
    };
    let (predicted, formula, tol) = match &fixed {
        Some(a) => {
            let s4: f64 = a.iter().map(|v| v.powi(4)).sum();
            report.param("sum_a4", s4);
            (gamma_u * s4, "gamma_u * sum_i a_i^4", 0.01)
        }
        None => ((6.0 + 3.0 * gamma_u) / d as f64, "(6 + 3 gamma_u) / d", 0.03),
    };
    report.row(ReportRow::new(format!("gamma_y[{input},{row},d={d}]"), formula, predicted, est.value, est.se, Check::Abs { tol }));
    raw_series(&mut report, &name, &est.per_chunk);
    Ok(report)
}

pub(crate) fn mixing_suite(exec: Exec, seed: u64) -> Result<ExperimentReport> {
    let parts = vec![
        mixing_kurtosis_experiment(exec, seed, 256, "laplace", "equal_magnitude", 10_000_000)?,
        mixing_kurtosis_experiment(exec, seed, 256, "laplace", "haar", 2_000_000)?,
        mixing_kurtosis_experiment(exec, seed, 64, "gaussian", "gaussian", 2_000_000)?,
        mixing_kurtosis_experiment(exec, seed, 64, "gaussian", "haar", 1_000_000)?,
        mixing_kurtosis_experiment(exec, seed, 64, "uniform", "haar", 1_000_000)?,
    ];
    Ok(combine("mixing", seed, parts))
}

/// Input and ReLU-branch moments: `m2 = E phi(x)^2`, `m4 = E phi(x)^4`,
/// `c22 = E x^2 phi(x)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchMoments {
    pub gamma_x: f64,
    pub m2: f64,
    pub m4: f64,
    pub c22: f64,
}

impl BranchMoments {
    /// Monte Carlo estimate from `n` scalar draws.
    pub fn estimate(exec: Exec, rng: &RngStream, dist: InputDist, n: usize) -> Result<Self> {
        let sums = exec.map(super::CHUNKS, |c| {
            let mut r = rng.split(c as u64);
            let count = n / super::CHUNKS + usize::from(c < n % super::CHUNKS);
            let mut s = [0.0f64; 5];
            for _ in 0..count {
                let x = dist.draw(&mut r);
                let p2 = relu(x) * relu(x);
                let x2 = x * x;
                s[0] += x2;
                s[1] += x2 * x2;
                s[2] += p2;
                s[3] += p2 * p2;
                s[4] += x2 * p2;
            }
            s
        });
        let mut t = [0.0f64; 5];
        for s in sums {
            t.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        if n == 0 {
            return Err(LabError::Parameter("moment oracle needs samples".into()));
        }
        let t = t.map(|v| v / n as f64);
        Ok(Self { gamma_x: t[1] / (t[0] * t[0]) - 3.0, m2: t[2], m4: t[3], c22: t[4] })
    }
}

/// Excess kurtosis of `y_j = x_j + sum_i phi(x_i) W_ij`, `W_ij ~ N(0, 1/d)`.
pub fn residual_kurtosis_closed_form(gamma_x: f64, m2: f64, m4: f64, c22: f64, d: usize) -> f64 {
    let d = d as f64;
    let fourth = 3.0 + gamma_x + (6.0 / d) * (c22 + (d - 1.0) * m2) + (3.0 / (d * d)) * (d * m4 + d * (d - 1.0) * m2 * m2);
    fourth / ((1.0 + m2) * (1.0 + m2)) - 3.0
}

/// Simulates one coordinate of a ReLU residual branch with fresh weights per
/// sample and compares with the closed form at oracle moments.
pub fn residual_kurtosis_experiment(exec: Exec, seed: u64, d: usize, input: &str, n: usize) -> Result<ExperimentReport> {
    let dist = InputDist::parse(input)?;
    if d == 0 {
        return Err(LabError::Parameter("d must be positive".into()));
    }
    let name = format!("residual[{input},d={d}]");
    let mut report = ExperimentReport::new(&name, seed);
    let oracle_n = 10_000_000;
    report.param("d", d).param("input", input).param("n", n).param("oracle_n", oracle_n).raw(&RAW_HEADER);
    let bm = BranchMoments::estimate(exec, &RngStream::new(seed, STREAM_ORACLE), dist, oracle_n)?;
    report.param("m2", bm.m2).param("m4", bm.m4).param("c22", bm.c22).param("gamma_x", bm.gamma_x);
    let std = 1.0 / (d as f64).sqrt();
    let est = kurtosis_mc(exec, &RngStream::new(seed, STREAM_RESIDUAL + d as u64), n, |r, count, m| {
        for _ in 0..count {
            let x0 = dist.draw(r);
            let mut s = relu(x0) * std * r.gaussian();
            for _ in 1..d {
                let x = dist.draw(r);
                s += relu(x) * std * r.gaussian();
            }
            m.push(x0 + s);
        }
    })?;
    let predicted = residual_kurtosis_closed_form(bm.gamma_x, bm.m2, bm.m4, bm.c22, d);
    report.row(ReportRow::new(
        format!("gamma_y[{input},d={d}]"),
        "closed form at oracle moments",
        predicted,
        est.value,
        est.se,
        Check::Rel { rel: 0.05, floor: 0.02 },
    ));
    if dist.excess_kurtosis() > 0.0 {
        let bound = 0.25 * bm.gamma_x / ((1.0 + bm.m2) * (1.0 + bm.m2));
        report.row(ReportRow::new(
            format!("gamma_y lower bound[{input},d={d}]"),
            "0.25 gamma_x / (1 + m2)^2",
            bound,
            est.value,
            est.se,
            Check::AtLeast,
        ));
        report.row(ReportRow::new(
            format!("gamma_y vs pure mixing[{input},d={d}]"),
            "gamma_x / d",
            dist.excess_kurtosis() / d as f64,
            est.value,
            est.se,
            Check::Soft,
        ));
    }
    raw_series(&mut report, &name, &est.per_chunk);
    Ok(report)
}

pub(crate) fn residual_suite(exec: Exec, seed: u64) -> Result<ExperimentReport> {
    let mut parts = Vec::new();
    for input in ["gaussian", "laplace"] {
        for d in [16, 64, 256] {
            parts.push(residual_kurtosis_experiment(exec, seed, d, input, 1_000_000)?);
        }
    }
    Ok(combine("residual-kurtosis", seed, parts))
}

/// Bernoulli(1/d) excess kurtosis, the limit of a saturated softmax.
pub fn saturated_softmax_kurtosis(d: usize) -> f64 {
    let d = d as f64;
    (d * d - 6.0 * d + 6.0) / (d - 1.0)
}

/// Coordinate kurtosis of `softmax(tau g)`, `g ~ N(0, I_d)`. `tau < 1` is
/// asserted against the O(1) bound, `tau >= 10` against the saturated limit;
/// other temperatures are reported only.
pub fn softmax_kurtosis_experiment(exec: Exec, seed: u64, d: usize, taus: &[f64], n: usize) -> Result<ExperimentReport> {
    if d < 2 {
        return Err(LabError::Parameter(format!("softmax needs d >= 2, got {d}")));
    }
    let name = format!("softmax[d={d}]");
    let mut report = ExperimentReport::new(&name, seed);
    report.param("d", d).param("taus", taus).param("n", n).raw(&RAW_HEADER);
    for (k, &tau) in taus.iter().enumerate() {
        let rng = RngStream::new(seed, STREAM_SOFTMAX + ((d as u64) << 8) + k as u64);
        let est = kurtosis_mc(exec, &rng, n, |r, count, m| {
            let mut z = vec![0.0; d];
            for _ in 0..count {
                z.iter_mut().for_each(|v| *v = tau * r.gaussian());
                let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                z.iter_mut().for_each(|v| {
                    *v = (*v - top).exp();
                    sum += *v;
                });
                z.iter().for_each(|v| m.push(v / sum));
            }
        })?;
        let quantity = format!("gamma[d={d},tau={tau}]");
        let row = if tau < 1.0 {
            ReportRow::new(format!("|{quantity}|"), "O(1) non-saturated bound", 1.0, est.value.abs(), est.se, Check::AtMost)
        } else if tau >= 10.0 {
            ReportRow::new(
                quantity,
                "(d^2 - 6d + 6) / (d - 1)",
                saturated_softmax_kurtosis(d),
                est.value,
                est.se,
                Check::Rel { rel: 0.2, floor: 0.0 },
            )
        } else {
            ReportRow::new(quantity, "(d^2 - 6d + 6) / (d - 1)", saturated_softmax_kurtosis(d), est.value, est.se, Check::Soft)
        };
        report.row(row);
        raw_series(&mut report, &format!("tau={tau}"), &est.per_chunk);
    }
    Ok(report)
}

pub(crate) fn softmax_suite(exec: Exec, seed: u64) -> Result<ExperimentReport> {
    let parts = vec![
        softmax_kurtosis_experiment(exec, seed, 32, &[0.1, 1.0, 50.0], 1_000_000)?,
        softmax_kurtosis_experiment(exec, seed, 2, &[50.0], 1_000_000)?,
    ];
    Ok(combine("softmax-regimes", seed, parts))
}

/// Mean over columns of the per-column excess kurtosis, with the standard
/// error of that mean.
fn column_kurtosis(x: &Matrix) -> Result<(f64, f64)> {
    let (n, d) = x.shape();
    let mut acc = vec![Moments::default(); d];
    for r in 0..n {
        for (m, v) in acc.iter_mut().zip(x.row(r)) {
            m.push(*v);
        }
    }
    let g = acc.iter().map(|m| m.excess_kurtosis()).collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&g))
}

/// Stack of `LayerNorm -> GELU -> W` with a fresh Haar `W` per layer,
/// replacing (`residual = false`) or adding to the stream.
pub fn deep_contraction_experiment(
    exec: Exec,
    seed: u64,
    d: usize,
    layers: usize,
    residual: bool,
    input: &str,
    n: usize,
) -> Result<ExperimentReport> {
    let dist = InputDist::parse(input)?;
    if d == 0 || n < 4 {
        return Err(LabError::Parameter(format!("need d >= 1 and n >= 4, got d={d}, n={n}")));
    }
    let arch = if residual { "residual" } else { "residual_free" };
    let name = format!("contraction[{arch},{input},d={d},L={layers}]");
    let mut report = ExperimentReport::new(&name, seed);
    report.param("d", d).param("L", layers).param("arch", arch).param("input", input).param("n", n).raw(&RAW_HEADER);
    let rng = RngStream::new(seed, STREAM_CONTRACTION + u64::from(residual));
    // token rows are drawn in parallel blocks so the result is independent of the mode
    let blocks = 16.min(n);
    let parts = exec.map(blocks, |b| {
        let mut r = rng.split(b as u64);
        let rows = n / blocks + usize::from(b < n % blocks);
        let mut m = Matrix::zeros(rows, d);
        m.data_mut().iter_mut().for_each(|v| *v = dist.draw(&mut r));
        m
    });
    let mut x = Matrix::zeros(n, d);
    let mut at = 0;
    for p in parts {
        x.data_mut()[at..at + p.data().len()].copy_from_slice(p.data());
        at += p.data().len();
    }
    let mut wrng = rng.split(u64::MAX);
    let ones = vec![1.0; d];
    let (g0, se0) = column_kurtosis(&x)?;
    report.row(ReportRow::new(format!("gamma_0[{arch}]"), "input excess kurtosis", dist.excess_kurtosis(), g0, se0, Check::Soft));
    let mut gammas = vec![g0];
    let mut mus = Vec::new();
    let mut cs = Vec::new();
    for l in 1..=layers {
        let t = ActivationTensor::from_matrix(1, n, x.clone())?;
        let mut h = norm_forward(&t, NormKind::LayerNorm, &ones).into_matrix();
        h.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let (c, _) = column_kurtosis(&h)?;
        let w = haar_orthogonal(&mut wrng, d, d)?;
        let mu = d as f64 * (0..d).map(|j| w.row(j).iter().map(|v| v.powi(4)).sum::<f64>()).fold(0.0, f64::max);
        let y = matmul_nt(&h, &w)?;
        x = if residual { x.add(&y)? } else { y };
        let (g, se) = column_kurtosis(&x)?;
        gammas.push(g);
        mus.push(mu);
        cs.push(c.abs());
        if residual {
            let check = if l == layers { Check::AtLeast } else { Check::Soft };
            report.row(ReportRow::new(format!("|gamma_{l}|[{arch}]"), "preserved, at least 1.0", 1.0, g.abs(), se, check));
        } else {
            report.row(ReportRow::new(format!("|gamma_{l}| vs mu C / d[{arch}]"), "mu_l |gamma~_l| / d", mu * c.abs() / d as f64, g.abs(), se, Check::AtMost));
            report.row(ReportRow::new(format!("|gamma_{l}|[{arch}]"), "mu C / d at mu ~ 3, C ~ 3.1", 0.15, g.abs(), se, Check::AtMost));
        }
    }
    report.param("mu", &mus).param("C", &cs);
    raw_series(&mut report, "gamma", &gammas);
    raw_series(&mut report, "mu", &mus);
    raw_series(&mut report, "C", &cs);
    Ok(report)
}

pub(crate) fn contraction_suite(exec: Exec, seed: u64) -> Result<ExperimentReport> {
    let parts = vec![
        deep_contraction_experiment(exec, seed, 256, 12, false, "laplace", 16_384)?,
        deep_contraction_experiment(exec, seed, 256, 12, true, "laplace", 16_384)?,
    ];
    Ok(combine("deep-contraction", seed, parts))
}
