//! Command-line front end. Exit status: 0 when every asserted row passes,
//! 1 when any fails, 2 on usage or configuration errors.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::error::{LabError, Result};
use crate::lab::{run_lemma, ExperimentReport, ReportRow, LEMMAS};
use crate::par::Exec;

use super::config::{ConfigFile, TrainConfig};
use super::grid::{quant_direction, run_grid, GridSettings};
use super::sweep::{quant_sweep, sweep_data, temperature_ablation, DEFAULT_BITS_A, DEFAULT_BITS_W};
use super::train::train_model;

pub const SEED_ENV: &str = "KURTLAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "kurtlab", version, about = "Activation-statistics laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data and model seeds (default: $KURTLAB_SEED, then the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Run jobs one after another.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one Monte Carlo experiment, or `all`.
    Lemma { name: String },
    /// Train the eight-cell grid and compare quantization robustness.
    Grid,
    /// Train one model.
    Train,
    /// Compare depth temperature bases.
    AblateTemp,
    /// Train one model and sweep weight and activation bit widths.
    Sweep,
    /// Merge report files into one summary table.
    Report { files: Vec<PathBuf> },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| LabError::Config(format!("{SEED_ENV}={v} is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn load_config(cli: &Cli, default: TrainConfig) -> Result<(ConfigFile, TrainConfig)> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::from_train(&default),
    };
    let mut cfg = file.train_config()?;
    if let Some(seed) = resolve_seed(cli.seed)? {
        cfg = cfg.with_seed(seed);
    }
    Ok((file, cfg))
}

fn execute(cli: &Cli) -> Result<bool> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Lemma { name } => {
            let seed = resolve_seed(cli.seed)?.unwrap_or(0);
            let names: Vec<&str> = if name == "all" { LEMMAS.to_vec() } else { vec![name.as_str()] };
            let mut ok = true;
            for n in names {
                let started = Instant::now();
                let report = run_lemma(n, exec, seed)?;
                ok &= emit(&report, out, started)?;
            }
            Ok(ok)
        }
        Command::Grid => {
            let mut settings = match &cli.config {
                Some(p) => GridSettings::from_config(&ConfigFile::load(p)?)?,
                None => GridSettings::toy(),
            };
            if let Some(seed) = resolve_seed(cli.seed)? {
                settings.base = settings.base.with_seed(seed);
            }
            let bits_a = match &cli.config {
                Some(p) => ConfigFile::load(p)?.bits_a.and_then(|b| b.first().copied()).unwrap_or(6),
                None => 6,
            };
            let started = Instant::now();
            let outcome = run_grid(exec, &settings)?;
            print_grid(&outcome);
            let mut ok = emit(&outcome.report, out, started)?;
            let started = Instant::now();
            let quant = quant_direction(exec, &outcome, &settings, 8, bits_a)?;
            ok &= emit(&quant, out, started)?;
            Ok(ok)
        }
        Command::Train => {
            let (_, cfg) = load_config(cli, TrainConfig::toy())?;
            let started = Instant::now();
            let (log, _) = train_model(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("train.log.json"), serde_json::to_string_pretty(&log).expect("log serializes") + "\n")?;
            let mut r = ExperimentReport::new("train", cfg.model_seed);
            r.param("config", ConfigFile::from_train(&cfg)).raw(&["step", "train_loss"]);
            for (s, l) in log.losses.iter().enumerate() {
                r.raw_row(vec![s.to_string(), l.to_string()]);
            }
            let first = log.losses.first().copied().unwrap_or(f64::NAN);
            let drop = 1.0 - log.final_loss() / first;
            r.row(ReportRow::new("relative loss decrease", "at least 30%", 0.3, drop, 0.0, crate::lab::Check::Soft));
            if let Some(k) = log.last_checkpoint() {
                r.row(ReportRow::new("final mean |gamma|", "near-Gaussian below 1", 1.0, k.mean_abs_kurtosis(), 0.0, crate::lab::Check::Soft));
            }
            r.note(format!("optimal loss {:.4}, final {:.4}, diverged {}", log.optimal_loss, log.final_loss(), log.diverged));
            let ok = emit(&r, out, started)?;
            Ok(ok && !log.diverged)
        }
        Command::AblateTemp => {
            let (file, cfg) = load_config(cli, TrainConfig::toy())?;
            let betas = file.beta_list.clone().unwrap_or_else(|| vec![1.0, 1.1]);
            let started = Instant::now();
            let r = temperature_ablation(exec, &cfg, &betas, file.eval_batches.unwrap_or(16))?;
            emit(&r, out, started)
        }
        Command::Sweep => {
            let (file, cfg) = load_config(cli, TrainConfig::toy())?;
            let started = Instant::now();
            let (log, params) = train_model(&cfg)?;
            if log.diverged {
                return Err(LabError::Numerical(format!("training diverged at step {:?}", log.diverged_at)));
            }
            let (calib, eval) = sweep_data(&cfg, file.eval_batches.unwrap_or(16))?;
            let bits_w = file.bits_w.clone().unwrap_or_else(|| DEFAULT_BITS_W.to_vec());
            let bits_a = file.bits_a.clone().unwrap_or_else(|| DEFAULT_BITS_A.to_vec());
            let label = format!(
                "{}/{}/{}",
                if cfg.block.residual { "residual" } else { "residual_free" },
                cfg.init.kind.label(),
                cfg.optim.kind.label()
            );
            let sweep = quant_sweep(exec, &label, &params, &cfg.block, &bits_w, &bits_a, &calib, &eval)?;
            std::fs::create_dir_all(out)?;
            sweep.write_csv(&out.join("sweep.csv"))?;
            std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&sweep).expect("sweep serializes") + "\n")?;
            emit(&sweep.checks(cfg.model_seed), out, started)
        }
        Command::Report { files } => merge_reports(files, out),
    }
}

/// Writes the report, its raw rows and a metadata file; prints one line per row.
fn emit(report: &ExperimentReport, out: &Path, started: Instant) -> Result<bool> {
    report.write(out)?;
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "name": report.name,
        "finished_unix": unix,
        "elapsed_s": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(out.join(format!("{}.meta.json", report.name)), serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
    println!("{} [{}]", report.name, if report.pass { "PASS" } else { "FAIL" });
    for r in &report.rows {
        let verdict = if !r.is_asserted() {
            "soft"
        } else if r.pass {
            "pass"
        } else {
            "FAIL"
        };
        println!("  {verdict:4}  {:<52} predicted {:>12.6}  measured {:>12.6}", r.quantity, r.predicted, r.measured);
    }
    Ok(report.pass)
}

fn print_grid(outcome: &super::grid::GridOutcome) {
    println!("{:<48} {:>8} {:>10} {:>10} {:>10}", "cell", "eta", "eval", "|g| start", "|g| final");
    for c in &outcome.cells {
        println!(
            "{:<48} {:>8} {:>10.4} {:>10.4} {:>10.4}{}",
            c.cell.label(),
            c.eta,
            c.eval_loss,
            c.kurtosis_start,
            c.kurtosis_final,
            if c.diverged { "  diverged" } else { "" }
        );
    }
    let winner = outcome.cells.iter().filter(|c| !c.diverged).min_by(|a, b| a.kurtosis_final.total_cmp(&b.kurtosis_final));
    if let Some(w) = winner {
        println!("winner: {}", w.cell.label());
    }
}

/// Reads report JSON files and writes `summary.md` and `summary.csv`.
fn merge_reports(files: &[PathBuf], out: &Path) -> Result<bool> {
    if files.is_empty() {
        return Err(LabError::Config("report needs at least one file".into()));
    }
    let mut reports = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| LabError::Io(format!("{}: {e}", f.display())))?;
        let r: ExperimentReport = serde_json::from_str(&text).map_err(|e| LabError::Data(format!("{}: {e}", f.display())))?;
        reports.push(r);
    }
    std::fs::create_dir_all(out)?;
    let mut md = String::from("| report | quantity | predicted | measured | tolerance | verdict |\n|---|---|---|---|---|---|\n");
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["report", "quantity", "formula", "predicted", "measured", "se", "tolerance", "asserted", "pass"])?;
    for r in &reports {
        for row in &r.rows {
            let verdict = match (row.is_asserted(), row.pass) {
                (false, _) => "soft",
                (true, true) => "pass",
                (true, false) => "FAIL",
            };
            md.push_str(&format!(
                "| {} | {} | {:.6} | {:.6} | {:.4} | {verdict} |\n",
                r.name, row.quantity, row.predicted, row.measured, row.tolerance
            ));
            w.write_record([
                r.name.clone(),
                row.quantity.clone(),
                row.formula.clone(),
                row.predicted.to_string(),
                row.measured.to_string(),
                row.se.to_string(),
                row.tolerance.to_string(),
                row.is_asserted().to_string(),
                row.pass.to_string(),
            ])?;
        }
    }
    w.flush()?;
    std::fs::write(out.join("summary.md"), &md)?;
    print!("{md}");
    Ok(reports.iter().all(|r| r.pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_eq!(run_cli(["kurtlab", "frobnicate"]), 2);
        assert_eq!(run_cli(["kurtlab", "lemma", "x", "--bogus"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run_cli(["kurtlab", "lemma", "no-such", "--out-dir", out]), 2);
    }

    #[test]
    fn report_merges_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ExperimentReport::new("a", 0);
        a.row(ReportRow::new("x", "f", 1.0, 1.0, 0.0, crate::lab::Check::Abs { tol: 0.1 }));
        let (ja, _) = a.write(dir.path()).unwrap();
        let out = dir.path().join("merged");
        let code = run_cli(["kurtlab".into(), "report".into(), ja.into_os_string(), "--out-dir".into(), out.clone().into_os_string()]);
        assert_eq!(code, 0);
        let md = std::fs::read_to_string(out.join("summary.md")).unwrap();
        assert!(md.contains("| a | x |"));
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, "{\"d\": 4}").unwrap();
        let out = dir.path().join("o");
        let code = run_cli(["kurtlab".into(), "train".into(), "--config".into(), cfg.into_os_string(), "--out-dir".into(), out.into_os_string()]);
        assert_eq!(code, 2);
    }
}
