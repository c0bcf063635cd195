//! Monte Carlo experiments for the analytical claims, each returning an
//! [`ExperimentReport`].

pub mod isometry;
pub mod kurtosis;
pub mod mc;
pub mod report;

use crate::error::{LabError, Result};
use crate::par::Exec;

pub use isometry::{
    gram_drift_experiment, qk_score_variance_experiment, sign_drift_experiment, variance_recursion_experiment, DriftGradient,
    QkWeights,
};
pub use kurtosis::{
    activation_kurtosis_constants, deep_contraction_experiment, mixing_kurtosis_experiment, residual_kurtosis_closed_form,
    residual_kurtosis_experiment, softmax_kurtosis_experiment, BranchMoments, RowKind,
};
pub use mc::{kurtosis_mc, moments_mc, InputDist, McEstimate, CHUNKS};
pub use report::{Check, ExperimentReport, ReportRow};

/// Header of every raw CSV written by the lab.
pub const RAW_HEADER: [&str; 3] = ["series", "index", "value"];

/// Experiments runnable by name with default parameters. The training grid
/// is not listed here; it is run through the harness.
pub const LEMMAS: [&str; 8] = [
    "relu-gelu-constants",
    "mixing",
    "residual-kurtosis",
    "variance-recursion",
    "gram-drift",
    "softmax-regimes",
    "deep-contraction",
    "qk-score-variance",
];

/// Runs one named experiment at its reference parameters.
pub fn run_lemma(name: &str, exec: Exec, seed: u64) -> Result<ExperimentReport> {
    match name {
        "relu-gelu-constants" => activation_kurtosis_constants(exec, seed, 10_000_000),
        "mixing" => kurtosis::mixing_suite(exec, seed),
        "residual-kurtosis" => kurtosis::residual_suite(exec, seed),
        "variance-recursion" => isometry::variance_suite(exec, seed),
        "gram-drift" => isometry::drift_suite(exec, seed),
        "softmax-regimes" => kurtosis::softmax_suite(exec, seed),
        "deep-contraction" => kurtosis::contraction_suite(exec, seed),
        "qk-score-variance" => isometry::qk_suite(exec, seed),
        other => Err(LabError::Config(format!("unknown lemma '{other}'; expected one of {}", LEMMAS.join(", ")))),
    }
}

/// Concatenates sub-reports under one name. Parameters are prefixed with the
/// sub-report name.
pub fn combine(name: &str, seed: u64, parts: Vec<ExperimentReport>) -> ExperimentReport {
    let mut out = ExperimentReport::new(name, seed);
    out.raw(&RAW_HEADER);
    for p in parts {
        for (k, v) in p.parameters {
            out.param(&format!("{}.{k}", p.name), v);
        }
        for r in p.rows {
            out.row(r);
        }
        out.notes.extend(p.notes);
        out.raw_rows.extend(p.raw_rows);
    }
    out
}

pub(crate) fn raw_series(report: &mut ExperimentReport, series: &str, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        report.raw_row(vec![series.to_string(), i.to_string(), v.to_string()]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_lemma_is_a_config_error() {
        assert!(matches!(run_lemma("no-such-lemma", Exec::Sequential, 0), Err(LabError::Config(_))));
    }

    #[test]
    fn combine_keeps_rows_and_verdict() {
        let mut a = ExperimentReport::new("a", 1);
        a.param("d", 3).row(ReportRow::new("x", "f", 0.0, 0.0, 0.0, Check::Abs { tol: 0.1 }));
        let mut b = ExperimentReport::new("b", 1);
        b.row(ReportRow::new("y", "f", 0.0, 1.0, 0.0, Check::Abs { tol: 0.1 }));
        let c = combine("ab", 1, vec![a, b]);
        assert_eq!(c.rows.len(), 2);
        assert!(!c.pass);
        assert!(c.parameters.contains_key("a.d"));
    }
}
