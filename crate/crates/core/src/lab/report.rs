use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How a row is judged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Check {
    /// `|measured - predicted| <= max(tol, 3 se)`
    Abs { tol: f64 },
    /// `|measured - predicted| <= max(rel * |predicted|, floor, 3 se)`
    Rel { rel: f64, floor: f64 },
    /// `measured <= predicted + 3 se`
    AtMost,
    /// `measured >= predicted - 3 se`
    AtLeast,
    /// Reported only.
    Soft,
}

/// JSON has no NaN or infinity; they are written as `null` and read back as NaN.
pub(crate) fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    /// Formula or source of the prediction.
    pub formula: String,
    #[serde(deserialize_with = "nan_if_null")]
    pub predicted: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub measured: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub se: f64,
    pub check: Check,
    /// Effective allowance used for the verdict.
    #[serde(deserialize_with = "nan_if_null")]
    pub tolerance: f64,
    pub pass: bool,
}

impl ReportRow {
    pub fn new(quantity: impl Into<String>, formula: impl Into<String>, predicted: f64, measured: f64, se: f64, check: Check) -> Self {
        let se_allow = if se.is_finite() { 3.0 * se } else { 0.0 };
        let (tolerance, pass) = match check {
            Check::Abs { tol } => {
                let t = tol.max(se_allow);
                (t, (measured - predicted).abs() <= t)
            }
            Check::Rel { rel, floor } => {
                let t = (rel * predicted.abs()).max(floor).max(se_allow);
                (t, (measured - predicted).abs() <= t)
            }
            Check::AtMost => (se_allow, measured <= predicted + se_allow),
            Check::AtLeast => (se_allow, measured >= predicted - se_allow),
            Check::Soft => (f64::NAN, true),
        };
        Self { quantity: quantity.into(), formula: formula.into(), predicted, measured, se, check, tolerance, pass }
    }

    pub fn is_asserted(&self) -> bool {
        self.check != Check::Soft
    }

    /// Verdict of a soft row had it been asserted with `check`.
    pub fn would_pass(&self, check: Check) -> bool {
        ReportRow::new("", "", self.predicted, self.measured, self.se, check).pass
    }
}

/// Outcome of one experiment. The JSON form holds no timing or clock data,
/// so equal inputs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
    pub pass: bool,
    #[serde(skip)]
    pub raw_header: Vec<String>,
    #[serde(skip)]
    pub raw_rows: Vec<Vec<String>>,
}

impl ExperimentReport {
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            parameters: BTreeMap::new(),
            rows: Vec::new(),
            notes: Vec::new(),
            pass: true,
            raw_header: Vec::new(),
            raw_rows: Vec::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.parameters.insert(key.to_string(), serde_json::to_value(value).expect("parameter serializes"));
        self
    }

    pub fn row(&mut self, row: ReportRow) -> &mut Self {
        self.pass &= row.pass;
        self.rows.push(row);
        self
    }

    pub fn note(&mut self, text: impl Into<String>) -> &mut Self {
        self.notes.push(text.into());
        self
    }

    pub fn raw(&mut self, header: &[&str]) -> &mut Self {
        self.raw_header = header.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn raw_row(&mut self, fields: Vec<String>) {
        self.raw_rows.push(fields);
    }

    /// First row whose quantity starts with `prefix`.
    pub fn find(&self, prefix: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.quantity.starts_with(prefix))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `<name>.report.json` and `<name>.raw.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{}.report.json", self.name));
        std::fs::write(&json, self.to_json())?;
        let csv_path = dir.join(format!("{}.raw.csv", self.name));
        let mut w = csv::Writer::from_path(&csv_path)?;
        if !self.raw_header.is_empty() {
            w.write_record(&self.raw_header)?;
        }
        for r in &self.raw_rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok((json, csv_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks() {
        assert!(ReportRow::new("a", "f", 1.0, 1.05, 0.0, Check::Abs { tol: 0.1 }).pass);
        assert!(!ReportRow::new("a", "f", 1.0, 1.2, 0.0, Check::Abs { tol: 0.1 }).pass);
        // three standard errors widen the band
        assert!(ReportRow::new("a", "f", 1.0, 1.2, 0.1, Check::Abs { tol: 0.1 }).pass);
        assert!(ReportRow::new("a", "f", 10.0, 10.9, 0.0, Check::Rel { rel: 0.1, floor: 0.0 }).pass);
        assert!(!ReportRow::new("a", "f", 10.0, 11.1, 0.0, Check::Rel { rel: 0.1, floor: 0.0 }).pass);
        assert!(ReportRow::new("a", "f", 0.0, 0.01, 0.0, Check::Rel { rel: 0.1, floor: 0.02 }).pass);
        assert!(ReportRow::new("a", "f", 1.0, 0.5, 0.0, Check::AtMost).pass);
        assert!(!ReportRow::new("a", "f", 1.0, 0.5, 0.0, Check::AtLeast).pass);
        let soft = ReportRow::new("a", "f", 1.0, 5.0, 0.0, Check::Soft);
        assert!(soft.pass && !soft.is_asserted() && !soft.would_pass(Check::AtMost));
    }

    #[test]
    fn report_files() {
        let mut r = ExperimentReport::new("demo", 3);
        r.param("d", 4).raw(&["trial", "value, with comma"]);
        r.raw_row(vec!["0".into(), "1.5".into()]);
        r.row(ReportRow::new("x", "f", 0.0, 1.0, 0.0, Check::Abs { tol: 0.5 }));
        r.row(ReportRow::new("y", "f", 0.0, 1.0, f64::NAN, Check::Soft));
        assert!(!r.pass);
        let dir = tempfile::tempdir().unwrap();
        let (json, csv_path) = r.write(dir.path()).unwrap();
        let back: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(back.rows[0], r.rows[0]);
        assert!(back.rows[1].se.is_nan() && back.rows[1].tolerance.is_nan());
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert!(text.starts_with("trial,\"value, with comma\"\n0,1.5"));
    }
}
