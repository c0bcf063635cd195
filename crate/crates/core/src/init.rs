//! Weight initializers: Gaussian baselines and the orthogonal recipe.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{haar_orthogonal, suo_sample, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    GaussianXavier,
    GaussianKaiming,
    OrthogonalRecipe,
}

impl InitKind {
    pub fn label(self) -> &'static str {
        match self {
            InitKind::GaussianXavier => "gaussian_xavier",
            InitKind::GaussianKaiming => "gaussian_kaiming",
            InitKind::OrthogonalRecipe => "orthogonal_recipe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub kind: InitKind,
    pub alpha_qk: f64,
    pub alpha_vo: f64,
    pub alpha_u: f64,
    pub alpha_d: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::recipe()
    }
}

impl InitSpec {
    pub fn recipe() -> Self {
        Self { kind: InitKind::OrthogonalRecipe, alpha_qk: 0.9, alpha_vo: 3.0, alpha_u: 1.5, alpha_d: 1.5 }
    }

    pub fn gaussian(kind: InitKind) -> Self {
        Self { kind, ..Self::recipe() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == InitKind::OrthogonalRecipe {
            for (name, a) in [
                ("alpha_qk", self.alpha_qk),
                ("alpha_vo", self.alpha_vo),
                ("alpha_u", self.alpha_u),
                ("alpha_d", self.alpha_d),
            ] {
                if !(a > 0.0) || !a.is_finite() {
                    return Err(LabError::Config(format!("{name} must be positive, got {a}")));
                }
            }
        }
        Ok(())
    }
}

/// iid `N(0, 2/(m+n))` (Xavier) or `N(0, 2/n)` (Kaiming) entries.
/// The recipe kind falls back to Xavier; it is used for embedding and head.
pub fn gaussian_init(rng: &mut RngStream, m: usize, n: usize, kind: InitKind) -> Matrix {
    let var = match kind {
        InitKind::GaussianKaiming => 2.0 / n as f64,
        _ => 2.0 / (m + n) as f64,
    };
    Matrix::gaussian(rng, m, n, var.sqrt())
}

/// `wq = wk = sqrt(alpha) * M` with `M` a Haar `d x d_h` semi-orthogonal
/// sample, so `wk^T wq = alpha * I_{d_h}`.
pub fn attention_qk_init(rng: &mut RngStream, d: usize, d_h: usize, alpha_qk: f64) -> Result<(Matrix, Matrix)> {
    if d < d_h {
        return Err(LabError::Dimension(format!("head dim {d_h} exceeds model dim {d}")));
    }
    let m = suo_sample(rng, d, d_h, alpha_qk)?;
    Ok((m.clone(), m))
}

/// Per-head value maps cut from one Haar orthogonal `P` and `wo = sqrt(alpha) P^T`,
/// so `Concat(wv_i) wo = alpha * I_d`.
pub fn attention_vo_init(rng: &mut RngStream, d: usize, h: usize, alpha_vo: f64) -> Result<(Vec<Matrix>, Matrix)> {
    if h == 0 || !d.is_multiple_of(h) {
        return Err(LabError::Config(format!("d = {d} is not divisible by h = {h}")));
    }
    if !(alpha_vo > 0.0) {
        return Err(LabError::Parameter(format!("alpha_vo must be positive, got {alpha_vo}")));
    }
    let p = haar_orthogonal(rng, d, d)?;
    let d_h = d / h;
    let s = alpha_vo.sqrt();
    let wv = (0..h).map(|i| p.columns(i * d_h, (i + 1) * d_h).scale(s)).collect();
    Ok((wv, p.transpose().scale(s)))
}

/// `wu` (`d x d_f`) and `wd` (`d_f x d`) with Gram `alpha * I` on the `d` side.
pub fn mlp_init(rng: &mut RngStream, d: usize, d_f: usize, alpha_u: f64, alpha_d: f64) -> Result<(Matrix, Matrix)> {
    let wu = suo_sample(rng, d, d_f, alpha_u)?;
    let wd = suo_sample(rng, d_f, d, alpha_d)?;
    Ok((wu, wd))
}
