//! Result files of a run directory.
//!
//! ```text
//! <out>/observables/<name>.csv     # manifest-hash header, then t,value,sem
//! <out>/observables/density_matrix.csv
//! <out>/manifest.json
//! <out>/config.toml               resolved configuration
//! <out>/diagnostics.log
//! <out>/noise/trajectory_<k>.csv  t,re_z,im_z,observable
//! <out>/states/trajectory_<k>.csv t,re_0,im_0,...
//! ```

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nmsse_core::ensemble::{EnsembleResult, ObservableSeries};
use serde::Serialize;

pub const OBSERVABLES_DIR: &str = "observables";
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const DIAGNOSTICS: &str = "diagnostics.log";
pub const DENSITY_MATRIX: &str = "density_matrix";

/// Shortest round-trip decimal, switching to exponent form for tiny magnitudes.
pub fn num(x: f64) -> String {
    if x != 0.0 && x.is_finite() && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_series(path: &Path, hash: &str, s: &ObservableSeries) -> io::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# manifest-hash: {hash}")?;
    writeln!(w, "t,value,sem")?;
    for ((t, v), e) in s.times.iter().zip(&s.values).zip(&s.sem) {
        writeln!(w, "{},{},{}", num(*t), num(*v), num(*e))?;
    }
    w.flush()
}

fn write_density(path: &Path, hash: &str, r: &EnsembleResult) -> io::Result<()> {
    let dim = r.rho_raw.first().map_or(0, |m| m.nrows());
    let mut w = create(path)?;
    writeln!(w, "# manifest-hash: {hash}")?;
    let mut header = vec!["t".to_string()];
    for kind in ["raw", "normalized"] {
        for i in 0..dim {
            for j in 0..dim {
                header.push(format!("{kind}_re_{i}{j}"));
                header.push(format!("{kind}_im_{i}{j}"));
            }
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, t) in r.times.iter().enumerate() {
        let mut row = vec![num(*t)];
        for m in [&r.rho_raw[k], &r.rho_normalized[k]] {
            for i in 0..dim {
                for j in 0..dim {
                    row.push(num(m[(i, j)].re));
                    row.push(num(m[(i, j)].im));
                }
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

/// Write every observable series plus the density matrix; returns the file stems.
pub fn write_observables(out: &Path, hash: &str, r: &EnsembleResult) -> io::Result<Vec<String>> {
    let dir = out.join(OBSERVABLES_DIR);
    fs::create_dir_all(&dir)?;
    let mut names = Vec::new();
    for (name, s) in &r.series {
        write_series(&dir.join(format!("{name}.csv")), hash, s)?;
        names.push(name.clone());
    }
    write_density(&dir.join(format!("{DENSITY_MATRIX}.csv")), hash, r)?;
    names.push(DENSITY_MATRIX.to_string());
    Ok(names)
}

/// Per-trajectory noise and state dumps of the kept trajectories.
pub fn write_dumps(out: &Path, r: &EnsembleResult, noise: bool, states: bool) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if noise {
        let dir = out.join("noise");
        fs::create_dir_all(&dir)?;
        for k in &r.kept {
            let path = dir.join(format!("trajectory_{}.csv", k.index));
            let mut w = create(&path)?;
            k.noise.write_csv(&mut w, &r.steps, Some(&k.observable))?;
            w.flush()?;
            written.push(path);
        }
    }
    if states {
        let dir = out.join("states");
        fs::create_dir_all(&dir)?;
        for k in &r.kept {
            let path = dir.join(format!("trajectory_{}.csv", k.index));
            let mut w = create(&path)?;
            let dim = k.system_states.first().map_or(0, Vec::len);
            let cols: Vec<String> = (0..dim).flat_map(|i| [format!("re_{i}"), format!("im_{i}")]).collect();
            writeln!(w, "t,{}", cols.join(","))?;
            for (t, psi) in r.times.iter().zip(&k.system_states) {
                let vals: Vec<String> = psi.iter().flat_map(|a| [num(a.re), num(a.im)]).collect();
                writeln!(w, "{},{}", num(*t), vals.join(","))?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct ModeEntry {
    pub d: [f64; 2],
    pub nu: [f64; 2],
}

#[derive(Debug, Serialize)]
pub struct FitEntry {
    pub modes: Vec<ModeEntry>,
    pub residual: f64,
    pub window: f64,
    pub grid_points: usize,
}

#[derive(Debug, Serialize)]
pub struct SeedEntry {
    pub master: u64,
    pub first_index: u64,
    pub trajectories: usize,
    pub dumped: Vec<(u64, u64)>,
}

#[derive(Debug, Serialize)]
pub struct FailureEntry {
    pub index: u64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: SeedEntry,
    pub fit: FitEntry,
    pub lindblad_rate: f64,
    pub n_requested: usize,
    pub n_effective: usize,
    pub degraded: bool,
    pub failures: Vec<FailureEntry>,
    pub non_analytic_times: Vec<f64>,
    pub invalid_rate_points: usize,
    /// max_t |Λ_trajectory − Λ_fidelity| when the system has reference states.
    pub rate_mode_discrepancy: Option<f64>,
    pub observables: Vec<String>,
    pub oracles: Vec<String>,
    pub threads: usize,
    pub wall_time_s: f64,
}

/// Largest pointwise gap between the two rate-function conventions.
pub fn rate_mode_discrepancy(r: &EnsembleResult) -> Option<f64> {
    let a = r.get("rate_function_trajectory")?;
    let b = r.get("rate_function_fidelity")?;
    Some(a.values.iter().zip(&b.values).map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() }).fold(0.0, f64::max))
}

impl Manifest {
    pub fn write(&self, out: &Path) -> io::Result<()> {
        let path = out.join(MANIFEST);
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, self).map_err(io::Error::other)?;
        writeln!(w)?;
        w.flush()
    }
}

pub fn fit_entry(r: &EnsembleResult) -> FitEntry {
    FitEntry {
        modes: r.fit.expansion.modes.iter().map(|m| ModeEntry { d: [m.d.re, m.d.im], nu: [m.nu.re, m.nu.im] }).collect(),
        residual: r.fit.residual,
        window: r.fit.window,
        grid_points: r.fit.grid_points,
    }
}
