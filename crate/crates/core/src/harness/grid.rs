//! The eight-cell {residual, residual-free} x {sign, spectral} x
//! {Gaussian, orthogonal recipe} training grid.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::init::{InitKind, InitSpec};
use crate::lab::report::{Check, ExperimentReport, ReportRow};
use crate::model::ModelParams;
use crate::optim::OptimKind;
use crate::par::Exec;

use super::config::{ConfigFile, TrainConfig};
use super::data::{synth_data, MarkovChain, SynthBatch, EVAL_STREAM};
use super::sweep::{quant_sweep, sweep_data};
use super::train::{evaluate, train_model, TrainLog};

pub const DEFAULT_ETA_SWEEP: [f64; 3] = [3e-4, 1e-3, 3e-3];
pub const DEFAULT_PILOT_STEPS: usize = 200;
pub const DEFAULT_EVAL_BATCHES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSettings {
    /// Shared architecture, data, seeds and budget; residual, init and
    /// optimizer are set per cell.
    pub base: TrainConfig,
    pub eta_sweep: Vec<f64>,
    /// Steps of each learning-rate pilot; 0 trains every candidate for the
    /// full budget and keeps the best.
    pub pilot_steps: usize,
    pub eval_batches: usize,
}

impl GridSettings {
    /// Toy grid sized to finish within minutes on one core: batch 8 of 16
    /// tokens and a fixed 8 + 3 step orthogonalization for spectral GD.
    pub fn toy() -> Self {
        let mut base = TrainConfig::toy();
        base.batch = 8;
        base.block.t = 16;
        base.optim.polar_schedule = Some((8, 3));
        Self { base, eta_sweep: DEFAULT_ETA_SWEEP.to_vec(), pilot_steps: DEFAULT_PILOT_STEPS, eval_batches: DEFAULT_EVAL_BATCHES }
    }

    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let s = Self {
            base: file.train_config()?,
            eta_sweep: file.eta_sweep.clone().unwrap_or_else(|| DEFAULT_ETA_SWEEP.to_vec()),
            pilot_steps: file.pilot_steps.unwrap_or(DEFAULT_PILOT_STEPS),
            eval_batches: file.eval_batches.unwrap_or(DEFAULT_EVAL_BATCHES),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.eta_sweep.is_empty() || self.eta_sweep.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(LabError::Config(format!("eta_sweep must hold positive values, got {:?}", self.eta_sweep)));
        }
        if self.eval_batches == 0 {
            return Err(LabError::Config("eval_batches must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub residual: bool,
    pub optim: OptimKind,
    pub init: InitKind,
}

impl Cell {
    /// The eight cells in a fixed order.
    pub fn all() -> Vec<Cell> {
        let mut cells = Vec::with_capacity(8);
        for residual in [false, true] {
            for init in [InitKind::OrthogonalRecipe, InitKind::GaussianXavier] {
                for optim in [OptimKind::SpectralGd, OptimKind::SignGd] {
                    cells.push(Cell { residual, optim, init });
                }
            }
        }
        cells
    }

    /// The cell predicted to keep activations near-Gaussian.
    pub fn target() -> Cell {
        Cell { residual: false, optim: OptimKind::SpectralGd, init: InitKind::OrthogonalRecipe }
    }

    pub fn label(&self) -> String {
        let arch = if self.residual { "residual" } else { "residual_free" };
        format!("{arch}/{}/{}", self.init.label(), self.optim.label())
    }

    pub fn config(&self, base: &TrainConfig, eta: f64) -> TrainConfig {
        let mut c = base.clone();
        c.block.residual = self.residual;
        c.init = match self.init {
            InitKind::OrthogonalRecipe => InitSpec { kind: InitKind::OrthogonalRecipe, ..base.init },
            kind => InitSpec::gaussian(kind),
        };
        c.optim.kind = self.optim;
        c.optim.eta = eta;
        c
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub eta: f64,
    /// `(eta, pilot score)`; NaN marks a diverged pilot.
    pub pilot: Vec<(f64, f64)>,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub kurtosis_start: f64,
    pub kurtosis_final: f64,
    pub log: TrainLog,
    pub params: ModelParams,
}

pub struct GridOutcome {
    pub report: ExperimentReport,
    pub cells: Vec<CellResult>,
    pub eval: Vec<SynthBatch>,
}

impl GridOutcome {
    pub fn cell(&self, cell: Cell) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == cell)
    }
}

/// Mean of the last tenth of a loss curve.
fn tail_loss(losses: &[f64]) -> f64 {
    let k = (losses.len() / 10).max(1).min(losses.len());
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

fn run_cell(cell: Cell, s: &GridSettings, eval: &[SynthBatch]) -> Result<CellResult> {
    let mut pilot = Vec::new();
    let mut best: Option<(f64, f64, TrainLog, ModelParams)> = None;
    for &eta in &s.eta_sweep {
        let mut c = cell.config(&s.base, eta);
        if s.pilot_steps > 0 {
            c.steps = s.pilot_steps.min(s.base.steps);
            c.checkpoint_every = 0;
            c.stats_taps = false;
        }
        let (log, params) = train_model(&c)?;
        let score = if log.diverged { f64::NAN } else { tail_loss(&log.losses) };
        pilot.push((eta, score));
        if !score.is_nan() && best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((eta, score, log, params));
        }
    }
    let eta = best.as_ref().map_or(s.eta_sweep[0], |b| b.0);
    let (log, params) = match best {
        Some((_, _, log, params)) if s.pilot_steps == 0 => (log, params),
        _ => train_model(&cell.config(&s.base, eta))?,
    };
    let diverged = log.diverged || pilot.iter().all(|p| p.1.is_nan());
    let eval_loss = if diverged { f64::NAN } else { evaluate(&params, &cell.config(&s.base, eta).block, eval)? };
    let kurtosis_start = log.checkpoints.first().map_or(f64::NAN, |k| k.mean_abs_kurtosis());
    let kurtosis_final = if diverged { f64::NAN } else { log.last_checkpoint().map_or(f64::NAN, |k| k.mean_abs_kurtosis()) };
    Ok(CellResult {
        cell,
        eta,
        pilot,
        diverged,
        final_train_loss: log.final_loss(),
        eval_loss,
        kurtosis_start,
        kurtosis_final,
        log,
        params,
    })
}

/// Trains every cell with identical data, seeds and budget, choosing each
/// cell's learning rate from the sweep, and checks the separation of the
/// final mean layerwise `|excess kurtosis|`.
pub fn run_grid(exec: Exec, s: &GridSettings) -> Result<GridOutcome> {
    s.validate()?;
    if !s.base.stats_taps {
        return Err(LabError::Config("the grid needs stats_taps = true".into()));
    }
    let chain = MarkovChain::new(s.base.data_seed, s.base.vocab)?;
    let eval = synth_data(&chain, s.base.data_seed, EVAL_STREAM, s.eval_batches, s.base.batch, s.base.block.t);
    let cells = Cell::all();
    let results = exec.map(cells.len(), |i| run_cell(cells[i], s, &eval)).into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new("training-grid", s.base.model_seed);
    report
        .param("config", ConfigFile::from_train(&s.base))
        .param("eta_sweep", &s.eta_sweep)
        .param("pilot_steps", s.pilot_steps)
        .param("eval_batches", s.eval_batches)
        .param("optimal_loss", chain.optimal_cross_entropy())
        .raw(&["cell", "eta", "step", "layer", "excess_kurtosis", "train_loss"]);
    for r in &results {
        for k in &r.log.checkpoints {
            for st in &k.stats {
                report.raw_row(vec![
                    r.cell.label(),
                    r.eta.to_string(),
                    k.step.to_string(),
                    st.layer_index.to_string(),
                    st.excess_kurtosis.to_string(),
                    k.train_loss.to_string(),
                ]);
            }
        }
        report.note(format!(
            "{}: eta {} (pilot {:?}), train loss {:.4}, eval loss {:.4}, mean |gamma| {:.4} -> {:.4}{}",
            r.cell.label(),
            r.eta,
            r.pilot,
            r.final_train_loss,
            r.eval_loss,
            r.kurtosis_start,
            r.kurtosis_final,
            if r.diverged { " (diverged, excluded)" } else { "" }
        ));
    }
    for r in &results {
        report.row(ReportRow::new(
            format!("mean |gamma| at step 0[{}]", r.cell.label()),
            "near-Gaussian at initialization",
            0.5,
            r.kurtosis_start,
            0.0,
            Check::AtMost,
        ));
    }
    let live: Vec<&CellResult> = results.iter().filter(|r| !r.diverged).collect();
    let target = results.iter().find(|r| r.cell == Cell::target()).expect("target cell is in the grid");
    let argmin = live.iter().min_by(|a, b| a.kurtosis_final.total_cmp(&b.kurtosis_final));
    let target_wins = !target.diverged && argmin.is_some_and(|a| a.cell == Cell::target());
    report.row(ReportRow::new(
        "target cell has the minimum mean |gamma|",
        "residual-free + orthogonal + spectral",
        1.0,
        if target_wins { 1.0 } else { 0.0 },
        0.0,
        Check::Abs { tol: 0.0 },
    ));
    report.row(ReportRow::new(
        format!("mean |gamma|[{}]", Cell::target().label()),
        "below 1",
        1.0,
        target.kurtosis_final,
        0.0,
        Check::AtMost,
    ));
    for r in &results {
        if r.cell == Cell::target() {
            continue;
        }
        let ratio = r.kurtosis_final / target.kurtosis_final;
        let (predicted, formula) = if r.cell.residual { (2.0, "at least twice the target") } else { (1.0, "above the target") };
        let check = if r.diverged { Check::Soft } else { Check::AtLeast };
        report.row(ReportRow::new(format!("mean |gamma| ratio[{}]", r.cell.label()), formula, predicted, ratio, 0.0, check));
    }
    Ok(GridOutcome { report, cells: results, eval })
}

/// The cell used as the contrast in the quantization comparison.
pub fn baseline_cell() -> Cell {
    Cell { residual: true, optim: OptimKind::SignGd, init: InitKind::GaussianXavier }
}

/// Quantizes the target and baseline cells at `WnAm` and compares the loss
/// increase and the mean activation SQNR.
pub fn quant_direction(exec: Exec, outcome: &GridOutcome, s: &GridSettings, bits_w: u32, bits_a: u32) -> Result<ExperimentReport> {
    let (calib, _) = sweep_data(&s.base, 0)?;
    let mut report = ExperimentReport::new("grid-quant", s.base.model_seed);
    report.param("bits_w", bits_w).param("bits_a", bits_a).raw(&["cell", "eval_loss", "delta_loss", "mean_sqnr_db", "mean_nmse"]);
    let mut points = Vec::new();
    for cell in [Cell::target(), baseline_cell()] {
        let r = outcome.cell(cell).ok_or_else(|| LabError::Internal(format!("missing cell {}", cell.label())))?;
        if r.diverged {
            report.note(format!("{} diverged; comparison not possible", cell.label()));
            points.push(None);
            continue;
        }
        let sweep = quant_sweep(exec, &cell.label(), &r.params, &cell.config(&s.base, r.eta).block, &[bits_w], &[bits_a], &calib, &outcome.eval)?;
        let p = sweep.points[0].clone();
        report.raw_row(vec![cell.label(), p.eval_loss.to_string(), p.delta_loss.to_string(), p.mean_sqnr_db.to_string(), p.mean_nmse.to_string()]);
        points.push(Some(p));
    }
    let label = format!("W{bits_w}A{bits_a}");
    let (t, b) = match (&points[0], &points[1]) {
        (Some(t), Some(b)) => (t.clone(), b.clone()),
        _ => {
            report.row(ReportRow::new(format!("comparison at {label}"), "both cells trained", 1.0, 0.0, 0.0, Check::Abs { tol: 0.0 }));
            return Ok(report);
        }
    };
    report.row(ReportRow::new(format!("delta loss[target] at {label}"), "below the baseline's", b.delta_loss, t.delta_loss, 0.0, Check::AtMost));
    report.row(ReportRow::new(format!("mean SQNR dB[target] at {label}"), "baseline + 3 dB", b.mean_sqnr_db + 3.0, t.mean_sqnr_db, 0.0, Check::AtLeast));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockConfig, NormKind};

    fn tiny() -> GridSettings {
        let mut s = GridSettings::toy();
        s.base.block = BlockConfig { d: 8, h: 2, d_f: 16, t: 4, residual: false, norm_kind: NormKind::LayerNorm, causal: true, beta: 1.1, n_layers: 2, scale_by_head_dim: true };
        s.base.vocab = 6;
        s.base.batch = 2;
        s.base.steps = 4;
        s.base.checkpoint_every = 2;
        s.pilot_steps = 2;
        s.eval_batches = 2;
        s
    }

    #[test]
    fn cells_are_distinct_and_ordered() {
        let cells = Cell::all();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], Cell::target());
        for (i, a) in cells.iter().enumerate() {
            assert!(cells[i + 1..].iter().all(|b| b != a));
        }
        let c = Cell { residual: true, optim: OptimKind::SignGd, init: InitKind::GaussianXavier }.config(&GridSettings::toy().base, 1e-3);
        assert!(c.block.residual && c.optim.kind == OptimKind::SignGd && c.init.kind == InitKind::GaussianXavier);
    }

    #[test]
    fn tiny_grid_is_deterministic_across_modes() {
        let s = tiny();
        let a = run_grid(Exec::Sequential, &s).unwrap();
        let b = run_grid(Exec::Parallel, &s).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.cells.len(), 8);
        assert_eq!(a.report.raw_rows.len(), 8 * 3 * 2);
        for r in &a.cells {
            let own = evaluate(&r.params, &r.cell.config(&s.base, r.eta).block, &a.eval).unwrap();
            assert_eq!(r.eval_loss, own, "{}", r.cell.label());
        }
    }

    #[test]
    fn diverged_cells_do_not_abort_the_grid() {
        let mut s = tiny();
        s.eta_sweep = vec![1e6];
        let out = run_grid(Exec::Sequential, &s).unwrap();
        assert_eq!(out.cells.len(), 8);
        assert!(out.cells.iter().any(|c| c.diverged));
    }

    #[test]
    fn quant_comparison_runs_on_a_tiny_grid() {
        let s = tiny();
        let out = run_grid(Exec::Sequential, &s).unwrap();
        let r = quant_direction(Exec::Sequential, &out, &s, 8, 6).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.raw_rows.len(), 2);
    }

    #[test]
    fn bad_settings_are_rejected() {
        let mut s = tiny();
        s.eta_sweep.clear();
        assert!(matches!(run_grid(Exec::Sequential, &s), Err(LabError::Config(_))));
    }
}
