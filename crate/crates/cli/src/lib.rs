//! Command-line front end: `nmsse run`, `nmsse validate` and `nmsse compare`.

pub mod compare;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nmsse_core::ensemble::{self, Backend, EnsembleResult, ResolvedRun};
use nmsse_core::{BathKind, Error as CoreError, SystemKind};
use toml::Value;

use crate::compare::compare_runs;
use crate::config::{ConfigIssue, ConfigSource, ResolvedConfig};
use crate::output::{Manifest, SeedEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
/// `compare --threshold` was exceeded.
pub const EXIT_THRESHOLD: i32 = 3;

const UNITS: &str = "\
Units: natural units with ħ = k_B = 1. Energies, rates (γ, Γ, ν) and the
temperature T share one unit; times are in its inverse.

Configuration: a TOML file with top-level run keys, [params] for preset
parameters, [vqs] for the variational solver, [[expansion]] for frozen bath
modes and [output] for dumps and oracles. Unknown keys are errors.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 compare threshold exceeded.";

#[derive(Debug, Parser)]
#[command(name = "nmsse", version, about = "Non-Markovian stochastic Schrödinger equation ensembles", after_help = UNITS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an ensemble and write observables, manifest and diagnostics.
    Run(RunArgs),
    /// Check a configuration and print the resolved physical parameters.
    Validate(ConfigArgs),
    /// Compare the observables of two run directories.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run file (TOML) or a manifest.json from an earlier run.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a configuration key, e.g. --set params.gamma=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// exact, hops, vqs or lindblad.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "NMSSE_THREADS")]
    pub threads: Option<usize>,
    /// Write the noise of the first output.dump_limit trajectories.
    #[arg(long)]
    pub dump_noise: bool,
    /// Write the system vectors of the first output.dump_limit trajectories.
    #[arg(long)]
    pub dump_states: bool,
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 when any max |Δ| exceeds this value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Parse arguments and run; returns the process exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, stdout, stderr),
        Command::Validate(a) => cmd_validate(a, stdout),
        Command::Compare(a) => cmd_compare(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(failure) => {
            for line in &failure.messages {
                let _ = writeln!(stderr, "error: {line}");
            }
            failure.code
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    messages: Vec<String>,
}

impl Failure {
    fn config(issues: Vec<ConfigIssue>) -> Self {
        Self { code: EXIT_CONFIG, messages: issues.iter().map(ToString::to_string).collect() }
    }

    fn runtime(m: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, messages: vec![m.into()] }
    }

    fn core(e: CoreError) -> Self {
        let code = match e {
            CoreError::Config(_) | CoreError::FitResidual { .. } | CoreError::InvalidParameter(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self { code, messages: vec![e.to_string()] }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::runtime(e.to_string())
}

fn load_config(a: &ConfigArgs, extra: &[(&str, Value)]) -> Result<ResolvedConfig, Failure> {
    let mut src = ConfigSource::load(&a.config).map_err(Failure::config)?;
    let mut issues = Vec::new();
    for s in &a.set {
        if let Err(i) = src.set(s) {
            issues.push(i);
        }
    }
    if let Some(seed) = a.seed {
        match i64::try_from(seed) {
            Ok(v) => extra_set(&mut src, "seed", Value::Integer(v), &mut issues),
            Err(_) => issues.push(ConfigIssue { key: "seed".into(), line: None, message: format!("seed {seed} exceeds 2^63 − 1") }),
        }
    }
    if let Some(b) = &a.backend {
        extra_set(&mut src, "backend", Value::String(b.clone()), &mut issues);
    }
    for (k, v) in extra {
        extra_set(&mut src, k, v.clone(), &mut issues);
    }
    if !issues.is_empty() {
        return Err(Failure::config(issues));
    }
    src.resolve().map_err(Failure::config)
}

fn extra_set(src: &mut ConfigSource, key: &str, v: Value, issues: &mut Vec<ConfigIssue>) {
    if let Err(i) = src.set_value(key, v) {
        issues.push(i);
    }
}

fn describe_system(kind: &SystemKind) -> String {
    match kind {
        SystemKind::SpinBoson { epsilon, delta } => format!("spin-boson  H = ε Z + Δ X, L = Z  (ε = {epsilon}, Δ = {delta})"),
        SystemKind::Tfim2 { j, b } => format!("2-spin TFIM  H = −J XX − B (ZI + IZ), L = σ⁺₁ + σ⁺₂  (J = {j}, B = {b})"),
        SystemKind::Custom => "custom".into(),
    }
}

fn describe_bath(kind: &BathKind) -> String {
    match kind {
        BathKind::Debye { eta, gamma, temperature } => format!("Debye  η = {eta}, γ = {gamma}, T = {temperature} (β = {})", 1.0 / temperature),
        BathKind::OrnsteinUhlenbeck { coupling, gamma } => format!("Ornstein-Uhlenbeck  Γ = {coupling}, γ = {gamma}"),
    }
}

fn parameter_table(cfg: &ResolvedConfig, r: &ResolvedRun) -> Vec<(String, String)> {
    let e = cfg.ensemble();
    let mut rows = vec![
        ("preset".to_string(), cfg.preset.clone()),
        ("backend".into(), cfg.backend.clone()),
        ("system".into(), describe_system(&r.system.kind)),
        ("bath".into(), describe_bath(&r.bath.kind)),
        ("window".into(), format!("t ∈ [0, {}], dt = {}, N = {}, stride = {}", e.window(), cfg.dt, cfg.steps, cfg.stride)),
        ("trajectories".into(), format!("{} (seed {}, first index {})", cfg.n_traj, cfg.seed, cfg.first_index)),
        ("hierarchy".into(), format!("n_max = {}, closure = {}", cfg.n_max, cfg.closure)),
        ("register".into(), format!("{} qubits, {} generators", r.model.n_qubits, r.model.generators.len())),
    ];
    if cfg.backend == "vqs" {
        rows.push(("ansatz".into(), format!("depth m = {}", cfg.depth)));
    }
    for (k, m) in r.fit.expansion.modes.iter().enumerate() {
        rows.push((format!("mode {}", k + 1), format!("d = {}{:+}i, ν = {}{:+}i", m.d.re, m.d.im, m.nu.re, m.nu.im)));
    }
    rows.push(("fit residual".into(), format!("{:.3e} (max over {} points on [0, {}])", r.fit.residual, r.fit.grid_points, r.fit.window)));
    rows.push(("lindblad rate".into(), format!("{}", r.lindblad_rate)));
    rows
}

fn cmd_validate(a: &ConfigArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let cfg = load_config(a, &[])?;
    let resolved = ensemble::resolve(&cfg.ensemble()).map_err(Failure::core)?;
    for (k, v) in parameter_table(&cfg, &resolved) {
        writeln!(stdout, "{k:<14} {v}").map_err(io_failure)?;
    }
    writeln!(stdout, "configuration ok").map_err(io_failure)?;
    Ok(EXIT_OK)
}

struct Log {
    lines: Vec<String>,
    verbose: bool,
}

impl Log {
    fn line(&mut self, stderr: &mut dyn Write, s: String) {
        if self.verbose {
            let _ = writeln!(stderr, "{s}");
        }
        self.lines.push(s);
    }
}

fn run_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<(R, usize), Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    let n = pool.current_num_threads();
    Ok((pool.install(f), n))
}

fn write_run(out: &Path, cfg: &ResolvedConfig, result: &EnsembleResult, oracles: Vec<String>, threads: usize, wall: f64, dumps: bool) -> Result<Vec<String>, Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))?;
    let hash = cfg.hash();
    let names = output::write_observables(out, &hash, result).map_err(io_failure)?;
    if dumps {
        output::write_dumps(out, result, cfg.output.dump_noise, cfg.output.dump_states).map_err(io_failure)?;
    }
    fs::write(out.join(output::RESOLVED_CONFIG), cfg.to_toml()).map_err(io_failure)?;
    let manifest = Manifest {
        tool: "nmsse",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash,
        config: serde_json::to_value(cfg).expect("serializable"),
        seeds: SeedEntry {
            master: cfg.seed,
            first_index: cfg.first_index,
            trajectories: cfg.n_traj,
            dumped: result.kept.iter().map(|k| (k.index, k.seed)).collect(),
        },
        fit: output::fit_entry(result),
        lindblad_rate: result.lindblad_rate,
        n_requested: result.n_requested,
        n_effective: result.n_effective,
        degraded: result.degraded,
        failures: result
            .failures
            .iter()
            .map(|f| output::FailureEntry { index: f.index, seed: f.seed, message: f.message.clone() })
            .collect(),
        non_analytic_times: result.non_analytic_times.clone(),
        invalid_rate_points: result.invalid_rate_points,
        rate_mode_discrepancy: output::rate_mode_discrepancy(result),
        observables: names.clone(),
        oracles,
        threads,
        wall_time_s: wall,
    };
    manifest.write(out).map_err(io_failure)?;
    Ok(names)
}

fn cmd_run(a: &RunArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, Failure> {
    let mut extra: Vec<(&str, Value)> = Vec::new();
    if let Some(o) = &a.out {
        extra.push(("output.dir", Value::String(o.to_string_lossy().into_owned())));
    }
    if a.dump_noise {
        extra.push(("output.dump_noise", Value::Boolean(true)));
    }
    if a.dump_states {
        extra.push(("output.dump_states", Value::Boolean(true)));
    }
    if a.verbose {
        extra.push(("output.verbose", Value::Boolean(true)));
    }
    let cfg = load_config(&a.config, &extra)?;
    let out = cfg.output.dir.clone().ok_or_else(|| {
        Failure::config(vec![ConfigIssue { key: "output.dir".into(), line: None, message: "no output directory (use --out)".into() }])
    })?;
    let mut log = Log { lines: Vec::new(), verbose: cfg.output.verbose };
    log.line(stderr, format!("config hash {}", cfg.hash()));

    let ens = cfg.ensemble();
    let resolved = ensemble::resolve(&ens).map_err(Failure::core)?;
    for (k, v) in parameter_table(&cfg, &resolved) {
        log.line(stderr, format!("{k:<14} {v}"));
    }
    let start = Instant::now();
    let (result, threads) = run_pool(a.threads, || ensemble::run_resolved(&ens, &resolved))?;
    let result = result.map_err(Failure::core)?;
    let wall = start.elapsed().as_secs_f64();
    log.line(stderr, format!("threads {threads}, wall time {wall:.3} s"));
    log.line(stderr, format!("trajectories {} requested, {} effective", result.n_requested, result.n_effective));
    for f in &result.failures {
        log.line(stderr, format!("trajectory {} (seed {}) failed: {}", f.index, f.seed, f.message));
    }
    if result.degraded {
        log.line(stderr, format!("warning: run degraded, {} of {} trajectories failed", result.failures.len(), result.n_requested));
    }
    if result.invalid_rate_points > 0 {
        log.line(stderr, format!("warning: {} output times had zero-norm system vectors", result.invalid_rate_points));
    }
    for t in &result.non_analytic_times {
        log.line(stderr, format!("non-analytic point: Loschmidt echo vanishes at t = {t}"));
    }
    if let Some(d) = output::rate_mode_discrepancy(&result) {
        log.line(stderr, format!("rate function: max |Λ_trajectory − Λ_fidelity| = {d:.6}"));
    }

    let mut oracle_names = Vec::new();
    for name in &cfg.output.oracles {
        let backend = Backend::from_name(name).expect("checked during parsing");
        if backend == Backend::from_name(&cfg.backend).expect("checked") {
            continue;
        }
        let mut ocfg = cfg.clone();
        ocfg.backend = name.clone();
        ocfg.output.oracles.clear();
        ocfg.output.dump_noise = false;
        ocfg.output.dump_states = false;
        let odir = out.join("oracles").join(name);
        let oens = ocfg.ensemble();
        let ostart = Instant::now();
        let (ores, _) = run_pool(a.threads, || ensemble::run_resolved(&oens, &resolved))?;
        let ores = ores.map_err(Failure::core)?;
        write_run(&odir, &ocfg, &ores, Vec::new(), threads, ostart.elapsed().as_secs_f64(), false)?;
        oracle_names.push(name.clone());
    }

    let names = write_run(&out, &cfg, &result, oracle_names.clone(), threads, wall, true)?;
    for name in &oracle_names {
        let odir = out.join("oracles").join(name);
        let report = compare_runs(&out, &odir).map_err(|e| Failure::runtime(e.to_string()))?;
        fs::write(odir.join("compare.json"), serde_json::to_string_pretty(&report).expect("serializable")).map_err(io_failure)?;
        for o in report.observables.iter().filter(|o| !o.name.contains(':')) {
            log.line(stderr, format!("oracle {name}: {} max |Δ| = {:.3e}, rms = {:.3e}", o.name, o.max_abs, o.rms));
        }
    }
    let mut text = log.lines.join("\n");
    text.push('\n');
    fs::write(out.join(output::DIAGNOSTICS), text).map_err(io_failure)?;
    writeln!(
        stdout,
        "wrote {} observables to {} ({} of {} trajectories{})",
        names.len(),
        out.display(),
        result.n_effective,
        result.n_requested,
        if result.degraded { ", degraded" } else { "" }
    )
    .map_err(io_failure)?;
    Ok(EXIT_OK)
}

fn cmd_compare(a: &CompareArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let report = compare_runs(&a.run_a, &a.run_b).map_err(|e| Failure::runtime(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    if let Some(p) = &a.out {
        fs::write(p, &json).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
    }
    writeln!(stdout, "{json}").map_err(io_failure)?;
    match a.threshold {
        Some(t) if report.max_abs() > t => {
            let worst = report.observables.iter().max_by(|x, y| x.max_abs.total_cmp(&y.max_abs)).expect("non-empty");
            Err(Failure {
                code: EXIT_THRESHOLD,
                messages: vec![format!("max |Δ| = {} in `{}` exceeds threshold {t}", worst.max_abs, worst.name)],
            })
        }
        _ => Ok(EXIT_OK),
    }
}
