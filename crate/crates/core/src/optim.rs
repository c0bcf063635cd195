//! Memoryless update rules: sign GD, spectral GD and plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{polar_factor, polar_fixed_schedule, Matrix, POLAR_MAX_ITER, POLAR_TOL};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SignGd,
    SpectralGd,
    Sgd,
}

impl OptimKind {
    pub fn label(self) -> &'static str {
        match self {
            OptimKind::SignGd => "sign_gd",
            OptimKind::SpectralGd => "spectral_gd",
            OptimKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub eta: f64,
    pub weight_decay: f64,
    /// Stopping tolerance of the polar iteration used by spectral GD.
    #[serde(default = "default_polar_tol")]
    pub polar_tol: f64,
    /// `(lift, converge)` iteration counts. When set, spectral GD uses the
    /// fixed-budget orthogonalization instead of the converged polar factor.
    #[serde(default)]
    pub polar_schedule: Option<(usize, usize)>,
}

fn default_polar_tol() -> f64 {
    POLAR_TOL
}

impl OptimSpec {
    pub fn new(kind: OptimKind, eta: f64, weight_decay: f64) -> Self {
        Self { kind, eta, weight_decay, polar_tol: POLAR_TOL, polar_schedule: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(LabError::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LabError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.polar_tol > 0.0) {
            return Err(LabError::Config(format!("polar_tol must be positive, got {}", self.polar_tol)));
        }
        if let Some((_, converge)) = self.polar_schedule {
            if converge == 0 {
                return Err(LabError::Config("polar_schedule needs at least one convergent step".into()));
            }
        }
        Ok(())
    }
}

fn check(w: &Matrix, g: &Matrix) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(LabError::Dimension(format!("weight {:?} vs gradient {:?}", w.shape(), g.shape())));
    }
    Ok(())
}

fn decayed(w: &Matrix, spec: &OptimSpec) -> Matrix {
    if spec.weight_decay > 0.0 {
        w.scale(1.0 - spec.eta * spec.weight_decay)
    } else {
        w.clone()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w - eta * sign(g)` with `sign(0) = 0`, after decoupled weight decay.
pub fn sign_gd_step(w: &Matrix, g: &Matrix, spec: &OptimSpec) -> Result<Matrix> {
    check(w, g)?;
    let mut out = decayed(w, spec);
    for (o, gi) in out.data_mut().iter_mut().zip(g.data()) {
        *o -= spec.eta * sign(*gi);
    }
    Ok(out)
}

/// Result of a spectral step; `skipped` is set when the gradient was all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStep {
    pub w: Matrix,
    pub skipped: bool,
}

/// `w - eta * U V^T` where `g = U S V^T` (thin factor for rectangular `g`).
pub fn spectral_gd_step(w: &Matrix, g: &Matrix, spec: &OptimSpec) -> Result<SpectralStep> {
    check(w, g)?;
    let polar = match spec.polar_schedule {
        Some((lift, converge)) => polar_fixed_schedule(g, lift, converge),
        None => polar_factor(g, spec.polar_tol, POLAR_MAX_ITER),
    };
    let p = match polar {
        Ok(p) => p,
        Err(LabError::DegenerateGradient) => return Ok(SpectralStep { w: w.clone(), skipped: true }),
        Err(e) => return Err(e),
    };
    let mut out = decayed(w, spec);
    out.axpy(-spec.eta, &p)?;
    Ok(SpectralStep { w: out, skipped: false })
}

/// `w - eta * g`
pub fn sgd_step(w: &Matrix, g: &Matrix, spec: &OptimSpec) -> Result<Matrix> {
    check(w, g)?;
    let mut out = decayed(w, spec);
    out.axpy(-spec.eta, g)?;
    Ok(out)
}

/// Vector parameters: sign of the gradient under sign GD, unit-norm gradient
/// direction under spectral GD, raw gradient under SGD. Never decayed.
fn vector_step(v: &mut [f64], g: &[f64], spec: &OptimSpec) {
    match spec.kind {
        OptimKind::SignGd => v.iter_mut().zip(g).for_each(|(x, gi)| *x -= spec.eta * sign(*gi)),
        OptimKind::SpectralGd => {
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().zip(g).for_each(|(x, gi)| *x -= spec.eta * gi / n);
            }
        }
        OptimKind::Sgd => v.iter_mut().zip(g).for_each(|(x, gi)| *x -= spec.eta * gi),
    }
}

/// Applies one update to every parameter. Weight matrices use the matrix
/// rule; norm gains and embedding rows use the vector rule. Returns the
/// number of matrices skipped for an all-zero gradient.
pub fn apply_step(params: &mut ModelParams, grads: &ModelParams, spec: &OptimSpec) -> Result<usize> {
    let grad_mats: Vec<&Matrix> = grads.matrices().into_iter().map(|(_, m)| m).collect();
    let mut skipped = 0;
    for (w, g) in params.matrices_mut().into_iter().zip(grad_mats) {
        *w = match spec.kind {
            OptimKind::SignGd => sign_gd_step(w, g, spec)?,
            OptimKind::Sgd => sgd_step(w, g, spec)?,
            OptimKind::SpectralGd => {
                let s = spectral_gd_step(w, g, spec)?;
                skipped += s.skipped as usize;
                s.w
            }
        };
    }
    for (v, g) in params.gains_mut().into_iter().zip(grads.gains()) {
        vector_step(v, g, spec);
    }
    for r in 0..params.embed.rows() {
        let g = grads.embed.row(r);
        if g.iter().any(|x| *x != 0.0) {
            vector_step(params.embed.row_mut(r), g, spec);
        }
    }
    Ok(skipped)
}
