//! Pointwise comparison of two run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::output::OBSERVABLES_DIR;

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("time grids differ for `{name}`: {a} has {a_grid}, {b} has {b_grid}")]
    GridMismatch { name: String, a: PathBuf, b: PathBuf, a_grid: String, b_grid: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable, CompareError> {
    let err = |m: String| CompareError::Read { path: path.to_path_buf(), message: m };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let columns: Vec<String> = lines.next().ok_or_else(|| err("no header".into()))?.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, l) in lines.enumerate() {
        let row = l
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("data row {}: {e}", n + 1)))?;
        if row.len() != columns.len() {
            return Err(err(format!("data row {} has {} fields, header has {}", n + 1, row.len(), columns.len())));
        }
        rows.push(row);
    }
    Ok(CsvTable { columns, rows })
}

fn read_dir(run: &Path) -> Result<BTreeMap<String, CsvTable>, CompareError> {
    let dir = run.join(OBSERVABLES_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| CompareError::Read { path: dir.clone(), message: e.to_string() })?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| CompareError::Read { path: dir.clone(), message: e.to_string() })?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            let stem = path.file_stem().expect("csv file").to_string_lossy().into_owned();
            out.insert(stem, read_csv(&path)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableDiff {
    pub name: String,
    pub points: usize,
    pub max_abs: f64,
    pub rms: f64,
    /// Fraction of points with |Δ| ≤ 3·√(sem_a² + sem_b²); absent without error bars.
    pub within_3sem: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub observables: Vec<ObservableDiff>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

impl CompareReport {
    pub fn max_abs(&self) -> f64 {
        self.observables.iter().map(|o| o.max_abs).fold(0.0, f64::max)
    }
}

fn delta(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn describe(t: &[f64]) -> String {
    match (t.first(), t.last()) {
        (Some(a), Some(b)) => format!("{} points on [{a}, {b}]", t.len()),
        _ => "an empty grid".into(),
    }
}

fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

fn diff(name: String, a: &[f64], b: &[f64], sems: Option<(&[f64], &[f64])>) -> ObservableDiff {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| delta(*x, *y)).collect();
    let n = d.len();
    let max_abs = d.iter().copied().fold(0.0, f64::max);
    let rms = if n == 0 { 0.0 } else { (d.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt() };
    let within_3sem = sems.map(|(sa, sb)| {
        let inside = d.iter().zip(sa.iter().zip(sb)).filter(|(dd, (x, y))| **dd <= 3.0 * (*x * *x + *y * *y).sqrt()).count();
        if n == 0 {
            1.0
        } else {
            inside as f64 / n as f64
        }
    });
    ObservableDiff { name, points: n, max_abs, rms, within_3sem }
}

pub fn compare_runs(a: &Path, b: &Path) -> Result<CompareReport, CompareError> {
    let ta = read_dir(a)?;
    let tb = read_dir(b)?;
    let mut observables = Vec::new();
    for (name, x) in &ta {
        let Some(y) = tb.get(name) else { continue };
        let (t_a, t_b) = (x.column("t").unwrap_or_default(), y.column("t").unwrap_or_default());
        if !same_grid(&t_a, &t_b) {
            return Err(CompareError::GridMismatch {
                name: name.clone(),
                a: a.to_path_buf(),
                b: b.to_path_buf(),
                a_grid: describe(&t_a),
                b_grid: describe(&t_b),
            });
        }
        if x.columns == ["t", "value", "sem"] && y.columns == x.columns {
            let (va, vb) = (x.column("value").expect("value"), y.column("value").expect("value"));
            let (sa, sb) = (x.column("sem").expect("sem"), y.column("sem").expect("sem"));
            observables.push(diff(name.clone(), &va, &vb, Some((&sa, &sb))));
        } else {
            for col in x.columns.iter().filter(|c| *c != "t") {
                if let (Some(va), Some(vb)) = (x.column(col), y.column(col)) {
                    observables.push(diff(format!("{name}:{col}"), &va, &vb, None));
                }
            }
        }
    }
    Ok(CompareReport {
        run_a: a.to_path_buf(),
        run_b: b.to_path_buf(),
        observables,
        only_in_a: ta.keys().filter(|k| !tb.contains_key(*k)).cloned().collect(),
        only_in_b: tb.keys().filter(|k| !ta.contains_key(*k)).cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_statistics() {
        let d = diff("x".into(), &[0.0, 1.0, f64::INFINITY], &[0.0, 1.5, f64::INFINITY], Some((&[0.1; 3], &[0.1; 3])));
        assert_eq!(d.max_abs, 0.5);
        assert!((d.rms - (0.25f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(d.within_3sem, Some(2.0 / 3.0));
    }

    #[test]
    fn grids() {
        assert!(same_grid(&[0.0, 0.1], &[0.0, 0.1]));
        assert!(!same_grid(&[0.0, 0.1], &[0.0, 0.2]));
        assert!(!same_grid(&[0.0], &[0.0, 0.1]));
        assert_eq!(describe(&[0.0, 0.5, 1.0]), "3 points on [0, 1]");
    }
}
