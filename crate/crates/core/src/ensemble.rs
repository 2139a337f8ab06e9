//! Trajectory ensembles and their observables.
//!
//! Each trajectory k uses the noise seed `trajectory_seed(master, first + k)`.
//! From every joint state the system vector ψ⁰ (all modes at level 0) is
//! extracted and accumulated into ρ = E[|ψ⁰⟩⟨ψ⁰|]. Trajectories run in fixed
//! chunks whose partial sums are merged in index order, so results do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{self, BathSpec, FitReport, ModeExpansion};
use crate::error::{Error, Result};
use crate::model::{build_effective_model, EffectiveModel, Preset, PresetOverrides, SystemSpec};
use crate::noise::{trajectory_seed, NoiseGenerator, NoiseTrajectory};
use crate::pauli::Statevector;
use crate::reference::{lindblad_run, Closure, DensityMatrix, ExactPropagator, HierarchySolver};
use crate::vqs::{AnsatzSpec, VqsEngine, VqsOptions};

/// Trajectories per deterministic accumulation chunk.
const CHUNK: usize = 32;
/// Chunks evaluated in parallel before their partial sums are merged.
const BATCH_CHUNKS: usize = 64;
/// Fraction of failed trajectories above which a run is degraded.
pub const DEGRADED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Exact,
    Hops,
    Vqs,
    Lindblad,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Hops => "hops",
            Self::Vqs => "vqs",
            Self::Lindblad => "lindblad",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Self::Exact),
            "hops" => Some(Self::Hops),
            "vqs" => Some(Self::Vqs),
            "lindblad" => Some(Self::Lindblad),
            _ => None,
        }
    }
}

/// How the averaged rate function is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Mean over trajectories of Λ evaluated on each normalized ψ⁰.
    #[default]
    Trajectory,
    /// Λ of the trace-normalized averaged density matrix.
    Fidelity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub preset: Preset,
    pub backend: Backend,
    pub n_traj: usize,
    pub dt: f64,
    pub steps: usize,
    pub master_seed: u64,
    /// Index of the first trajectory, for disjoint sub-ensembles.
    pub first_index: u64,
    pub n_max: usize,
    /// Preset parameter replacements, including γ.
    pub overrides: PresetOverrides,
    /// Number of exponential modes K to fit.
    pub modes: usize,
    /// Frozen modes used instead of a fit.
    pub expansion: Option<ModeExpansion>,
    /// Output every `stride` steps (the last step is always included).
    pub stride: usize,
    pub closure: Closure,
    pub depth: usize,
    pub vqs: VqsOptions,
    /// Force Z ≡ 0.
    pub zero_noise: bool,
    /// Which convention is published as `rate_function`.
    pub rate_mode: RateMode,
    /// Keep noise and ψ⁰ of the first trajectories for dumps.
    pub keep_trajectories: usize,
}

impl EnsembleConfig {
    pub fn preset(preset: Preset) -> Self {
        let dt = 0.002;
        Self {
            preset,
            backend: Backend::Exact,
            n_traj: 1000,
            dt,
            steps: (preset.default_window() / dt).round() as usize,
            master_seed: 0,
            first_index: 0,
            n_max: preset.default_n_max(),
            overrides: PresetOverrides::default(),
            modes: 1,
            expansion: None,
            stride: 10,
            closure: Closure::Truncate,
            depth: preset.default_depth(),
            vqs: VqsOptions::default(),
            zero_noise: false,
            rate_mode: RateMode::Trajectory,
            keep_trajectories: 0,
        }
    }

    /// Set `steps` so that steps·dt covers `t_end`.
    pub fn with_window(mut self, t_end: f64) -> Self {
        self.steps = (t_end / self.dt).round() as usize;
        self
    }

    pub fn window(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Every configuration problem found, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_traj == 0 {
            p.push("n_traj must be at least 1".to_string());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            p.push(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps == 0 {
            p.push("the window must contain at least one step".into());
        }
        if self.n_max == 0 {
            p.push("n_max must be at least 1".into());
        }
        if self.modes == 0 {
            p.push("modes must be at least 1".into());
        }
        if self.stride == 0 {
            p.push("stride must be at least 1".into());
        }
        if self.backend == Backend::Vqs && self.depth == 0 {
            p.push("backend vqs needs depth m ≥ 1".into());
        }
        if self.closure == Closure::MarkovianTerminator {
            if self.n_max != 1 {
                p.push(format!("the Markovian terminator requires n_max = 1, got {}", self.n_max));
            }
            if self.backend != Backend::Hops {
                p.push(format!("the Markovian terminator is only available on the hops backend, not {}", self.backend.name()));
            }
        }
        let foreign = self.preset.foreign_overrides(&self.overrides);
        if !foreign.is_empty() {
            p.push(format!("preset {} has no parameter(s) {}", self.preset.name(), foreign.join(", ")));
        }
        if let Err(e) = self.preset.bath_with(&self.overrides).and_then(|_| self.preset.system_with(&self.overrides)) {
            if foreign.is_empty() {
                p.push(e.to_string());
            }
        }
        if !(self.vqs.regularization >= 0.0) {
            p.push(format!("vqs regularization must be ≥ 0, got {}", self.vqs.regularization));
        }
        if !(self.vqs.svd_cutoff > 0.0) {
            p.push(format!("vqs svd cutoff must be > 0, got {}", self.vqs.svd_cutoff));
        }
        if !(self.vqs.abort_residual > 0.0) {
            p.push(format!("vqs abort residual must be > 0, got {}", self.vqs.abort_residual));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            None => Ok(()),
            Some(m) => Err(Error::Config(m)),
        }
    }

    /// Output step indices: 0, stride, 2·stride, ..., and the last step.
    pub fn output_steps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=self.steps).step_by(self.stride.max(1)).collect();
        if *v.last().expect("non-empty") != self.steps {
            v.push(self.steps);
        }
        v
    }
}

/// Physical parameters resolved from a configuration.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub system: SystemSpec,
    pub bath: BathSpec,
    pub fit: FitReport,
    pub model: EffectiveModel,
    /// Markovian rate ∫α(τ)dτ over both signs, used by the Lindblad backend.
    pub lindblad_rate: f64,
}

pub fn resolve(cfg: &EnsembleConfig) -> Result<ResolvedRun> {
    cfg.validate()?;
    let system = cfg.preset.system_with(&cfg.overrides)?;
    let bath = cfg.preset.bath_with(&cfg.overrides)?;
    let window = bath::default_fit_window(&bath);
    let fit = match &cfg.expansion {
        Some(e) => {
            e.validate()?;
            let times: Vec<f64> = (0..bath::FIT_GRID_POINTS).map(|j| window * j as f64 / (bath::FIT_GRID_POINTS - 1) as f64).collect();
            let samples = times.iter().map(|&t| bath::correlation_function(&bath, t)).collect::<Result<Vec<_>>>()?;
            FitReport { expansion: e.clone(), residual: bath::max_residual(e, &times, &samples), window, grid_points: times.len() }
        }
        None => {
            let a0 = bath::correlation_function(&bath, 0.0)?.norm();
            bath::fit_expansion(&bath, cfg.modes, window, cfg.preset.fit_tolerance() * a0)?
        }
    };
    let model = build_effective_model(&system, &fit.expansion, cfg.n_max)?;
    let lindblad_rate = bath.spectral_weight(0.0);
    Ok(ResolvedRun { system, bath, fit, model, lindblad_rate })
}

/// min_i −½ ln|⟨ψ_i|ψ̂⟩|² with ψ̂ = ψ/‖ψ‖.
pub fn rate_function(psi: &[Complex64], references: &[Statevector]) -> Result<f64> {
    let n2: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::NonFinite("zero-norm system vector in rate function"));
    }
    Ok(references
        .iter()
        .map(|r| {
            let ov: Complex64 = r.amplitudes().iter().zip(psi).map(|(a, b)| a.conj() * b).sum();
            -0.5 * (ov.norm_sqr() / n2).ln()
        })
        .fold(f64::INFINITY, f64::min))
}

/// Rate function of a density matrix: min_i −½ ln⟨ψ_i|ρ̂|ψ_i⟩ with ρ̂ = ρ/Tr ρ.
pub fn rate_function_density(rho: &DensityMatrix, references: &[Statevector]) -> f64 {
    let tr = rho.trace().re;
    references.iter().map(|r| -0.5 * (rho.expectation_in(r.amplitudes()) / tr).ln()).fold(f64::INFINITY, f64::min)
}

/// L = |⟨ψ₀|ψ_t⟩|².
pub fn loschmidt_echo(psi0: &[Complex64], psit: &[Complex64]) -> f64 {
    psi0.iter().zip(psit).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr()
}

/// λ = −(1/D) ln L; `+∞` marks L = 0.
pub fn loschmidt_rate(echo: f64, degrees_of_freedom: usize) -> Result<f64> {
    if degrees_of_freedom == 0 {
        return Err(Error::InvalidParameter("D must be at least 1".into()));
    }
    if echo <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-echo.ln() / degrees_of_freedom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableKind {
    Population,
    SigmaZ,
    RateFunction,
    Trace,
    DensityMatrix,
    LoschmidtEcho,
    LoschmidtRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub kind: ObservableKind,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub sem: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFailure {
    pub index: u64,
    pub seed: u64,
    pub message: String,
}

/// Noise and system vectors of one trajectory, kept for dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptTrajectory {
    pub index: u64,
    pub seed: u64,
    pub noise: NoiseTrajectory,
    pub system_states: Vec<Vec<Complex64>>,
    /// Normalized ⟨σ_z⟩ of qubit 0, or the rate function when the system has references.
    pub observable: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub series: BTreeMap<String, ObservableSeries>,
    pub rho_raw: Vec<DMatrix<Complex64>>,
    pub rho_normalized: Vec<DMatrix<Complex64>>,
    pub n_requested: usize,
    pub n_effective: usize,
    pub failures: Vec<TrajectoryFailure>,
    pub degraded: bool,
    /// Times at which the Loschmidt echo vanished.
    pub non_analytic_times: Vec<f64>,
    /// Output steps at which some trajectory had a zero-norm ψ⁰.
    pub invalid_rate_points: usize,
    pub kept: Vec<KeptTrajectory>,
    pub fit: FitReport,
    pub lindblad_rate: f64,
}

impl EnsembleResult {
    pub fn get(&self, name: &str) -> Option<&ObservableSeries> {
        self.series.get(name)
    }
}

// ---- streaming statistics ----

#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: Complex64,
    comp: Complex64,
}

impl Compensated {
    fn add(&mut self, x: Complex64) {
        fn neumaier(sum: &mut f64, comp: &mut f64, x: f64) {
            let t = *sum + x;
            if sum.abs() >= x.abs() {
                *comp += (*sum - t) + x;
            } else {
                *comp += (x - t) + *sum;
            }
            *sum = t;
        }
        neumaier(&mut self.sum.re, &mut self.comp.re, x.re);
        neumaier(&mut self.sum.im, &mut self.comp.im, x.im);
    }

    fn merge(&mut self, other: &Compensated) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> Complex64 {
        self.sum + self.comp
    }
}

/// Bivariate Welford moments of (a, b), merged with Chan's formula.
#[derive(Debug, Clone, Copy, Default)]
struct Pair {
    n: f64,
    mean_a: f64,
    mean_b: f64,
    m2_a: f64,
    m2_b: f64,
    c_ab: f64,
}

impl Pair {
    fn push(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        let da = a - self.mean_a;
        let db = b - self.mean_b;
        self.mean_a += da / self.n;
        self.mean_b += db / self.n;
        self.m2_a += da * (a - self.mean_a);
        self.m2_b += db * (b - self.mean_b);
        self.c_ab += da * (b - self.mean_b);
    }

    fn merge(&mut self, o: &Pair) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let da = o.mean_a - self.mean_a;
        let db = o.mean_b - self.mean_b;
        let w = self.n * o.n / n;
        self.m2_a += o.m2_a + da * da * w;
        self.m2_b += o.m2_b + db * db * w;
        self.c_ab += o.c_ab + da * db * w;
        self.mean_a += da * o.n / n;
        self.mean_b += db * o.n / n;
        self.n = n;
    }

    fn var(m2: f64, n: f64) -> f64 {
        if n > 1.0 {
            m2 / (n - 1.0)
        } else {
            0.0
        }
    }

    fn mean_sem_a(&self) -> (f64, f64) {
        (self.mean_a, (Self::var(self.m2_a, self.n) / self.n.max(1.0)).sqrt())
    }

    /// Ratio E[a]/E[b] with its delta-method standard error.
    fn ratio(&self) -> (f64, f64) {
        let r = self.mean_a / self.mean_b;
        let n = self.n.max(1.0);
        let v = Self::var(self.m2_a, self.n) - 2.0 * r * Self::var(self.c_ab, self.n) + r * r * Self::var(self.m2_b, self.n);
        (r, (v.max(0.0) / n).sqrt() / self.mean_b.abs())
    }
}

#[derive(Debug, Clone)]
struct TimeAccumulator {
    rho: Vec<Compensated>,
    // (σ_z, trace), (population_j, trace), (fidelity_k, trace)
    sigma_z: Pair,
    populations: Vec<Pair>,
    fidelities: Vec<Pair>,
    rate: Pair,
    invalid_rate: usize,
}

impl TimeAccumulator {
    fn new(dim: usize, refs: usize) -> Self {
        Self {
            rho: vec![Compensated::default(); dim * dim],
            sigma_z: Pair::default(),
            populations: vec![Pair::default(); dim],
            fidelities: vec![Pair::default(); refs],
            rate: Pair::default(),
            invalid_rate: 0,
        }
    }

    fn push(&mut self, psi: &[Complex64], refs: &[Statevector]) {
        let dim = psi.len();
        for r in 0..dim {
            for c in 0..dim {
                self.rho[r * dim + c].add(psi[r] * psi[c].conj());
            }
        }
        let tr: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        let sz: f64 = psi.iter().enumerate().map(|(b, a)| if b & 1 == 0 { a.norm_sqr() } else { -a.norm_sqr() }).sum();
        self.sigma_z.push(sz, tr);
        for (p, a) in self.populations.iter_mut().zip(psi) {
            p.push(a.norm_sqr(), tr);
        }
        for (f, r) in self.fidelities.iter_mut().zip(refs) {
            f.push(loschmidt_echo(r.amplitudes(), psi), tr);
        }
        if !refs.is_empty() {
            match rate_function(psi, refs) {
                Ok(v) if v.is_finite() => self.rate.push(v, 0.0),
                _ => self.invalid_rate += 1,
            }
        }
    }

    fn merge(&mut self, o: &TimeAccumulator) {
        for (a, b) in self.rho.iter_mut().zip(&o.rho) {
            a.merge(b);
        }
        self.sigma_z.merge(&o.sigma_z);
        for (a, b) in self.populations.iter_mut().zip(&o.populations) {
            a.merge(b);
        }
        for (a, b) in self.fidelities.iter_mut().zip(&o.fidelities) {
            a.merge(b);
        }
        self.rate.merge(&o.rate);
        self.invalid_rate += o.invalid_rate;
    }
}

#[derive(Debug, Clone)]
struct Partial {
    times: Vec<TimeAccumulator>,
    successes: usize,
    failures: Vec<TrajectoryFailure>,
    kept: Vec<KeptTrajectory>,
}

impl Partial {
    fn new(n_out: usize, dim: usize, refs: usize) -> Self {
        Self { times: vec![TimeAccumulator::new(dim, refs); n_out], successes: 0, failures: Vec::new(), kept: Vec::new() }
    }

    fn merge(&mut self, o: Partial) {
        for (a, b) in self.times.iter_mut().zip(&o.times) {
            a.merge(b);
        }
        self.successes += o.successes;
        self.failures.extend(o.failures);
        self.kept.extend(o.kept);
    }
}

enum Propagator {
    Exact(ExactPropagator, Statevector),
    Hops(Box<HierarchySolver>, Vec<Complex64>),
    Vqs(Box<VqsEngine>),
}

impl Propagator {
    fn system_states(&self, model: &EffectiveModel, noise: &NoiseTrajectory, cfg: &EnsembleConfig, n_out: usize) -> Result<Vec<Vec<Complex64>>> {
        let mut out = Vec::with_capacity(n_out);
        match self {
            Self::Exact(p, psi0) => p.run(noise, psi0, cfg.dt, cfg.steps, cfg.stride, |_, s| out.push(model.system_component(s)))?,
            Self::Hops(h, psi0) => h.run(noise, psi0, cfg.dt, cfg.steps, cfg.stride, |_, s| out.push(s.top().to_vec()))?,
            Self::Vqs(engine) => engine.run(noise, cfg.dt, cfg.steps, cfg.stride, |_, s| out.push(model.system_component(s.state().amplitudes())), |_| {})?,
        }
        debug_assert_eq!(out.len(), n_out);
        Ok(out)
    }
}

fn per_trajectory_observable(psi: &[Complex64], refs: &[Statevector]) -> f64 {
    if refs.is_empty() {
        let tr: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
        let sz: f64 = psi.iter().enumerate().map(|(b, a)| if b & 1 == 0 { a.norm_sqr() } else { -a.norm_sqr() }).sum();
        sz / tr
    } else {
        rate_function(psi, refs).unwrap_or(f64::NAN)
    }
}

/// Run the ensemble described by `cfg`.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleResult> {
    let resolved = resolve(cfg)?;
    run_resolved(cfg, &resolved)
}

pub fn run_resolved(cfg: &EnsembleConfig, resolved: &ResolvedRun) -> Result<EnsembleResult> {
    cfg.validate()?;
    let model = &resolved.model;
    let system = &resolved.system;
    let refs: Vec<Statevector> = system.references().map(|r| r.to_vec()).unwrap_or_default();
    let dim = system.dim();
    let steps = cfg.output_steps();
    let n_out = steps.len();

    if cfg.backend == Backend::Lindblad {
        return lindblad_ensemble(cfg, resolved, &refs, &steps);
    }

    let propagator = match cfg.backend {
        Backend::Exact => Propagator::Exact(ExactPropagator::new(model), model.initial_state()),
        Backend::Hops => Propagator::Hops(
            Box::new(HierarchySolver::new(system, &resolved.fit.expansion, cfg.n_max, cfg.closure)?),
            system.initial.amplitudes().to_vec(),
        ),
        Backend::Vqs => Propagator::Vqs(Box::new(VqsEngine::new(model, AnsatzSpec::from_model(model, cfg.depth)?, cfg.vqs)?)),
        Backend::Lindblad => unreachable!("handled above"),
    };
    let generator = if cfg.zero_noise {
        NoiseGenerator::Zero { dt: cfg.dt, steps: cfg.steps }
    } else {
        NoiseGenerator::for_bath(&resolved.bath, cfg.dt, cfg.steps)?
    };

    let run_chunk = |chunk: usize| -> Partial {
        let mut part = Partial::new(n_out, dim, refs.len());
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(cfg.n_traj);
        for k in lo..hi {
            let index = cfg.first_index + k as u64;
            let seed = if cfg.zero_noise { 0 } else { trajectory_seed(cfg.master_seed, index) };
            let outcome = generator.generate(seed).and_then(|noise| {
                let states = propagator.system_states(model, &noise, cfg, n_out)?;
                Ok((noise, states))
            });
            match outcome {
                Ok((noise, states)) => {
                    for (acc, psi) in part.times.iter_mut().zip(&states) {
                        acc.push(psi, &refs);
                    }
                    part.successes += 1;
                    if k < cfg.keep_trajectories {
                        let observable = states.iter().map(|s| per_trajectory_observable(s, &refs)).collect();
                        part.kept.push(KeptTrajectory { index, seed, noise, system_states: states, observable });
                    }
                }
                Err(e) => part.failures.push(TrajectoryFailure { index, seed, message: e.to_string() }),
            }
        }
        part
    };

    let n_chunks = cfg.n_traj.div_ceil(CHUNK);
    let mut total = Partial::new(n_out, dim, refs.len());
    let mut start = 0;
    while start < n_chunks {
        let end = (start + BATCH_CHUNKS).min(n_chunks);
        let parts: Vec<Partial> = (start..end).into_par_iter().map(run_chunk).collect();
        for p in parts {
            total.merge(p);
        }
        start = end;
    }
    if total.successes == 0 {
        return Err(Error::NoTrajectories { requested: cfg.n_traj });
    }
    Ok(finish(cfg, resolved, &refs, &steps, total))
}

fn finish(cfg: &EnsembleConfig, resolved: &ResolvedRun, refs: &[Statevector], steps: &[usize], total: Partial) -> EnsembleResult {
    let dim = resolved.system.dim();
    let times: Vec<f64> = steps.iter().map(|&s| s as f64 * cfg.dt).collect();
    let n = total.successes as f64;
    let mut series: BTreeMap<String, ObservableSeries> = BTreeMap::new();
    let mut put = |name: String, kind: ObservableKind, vals: Vec<(f64, f64)>| {
        let (values, sem) = vals.into_iter().unzip();
        series.insert(name, ObservableSeries { kind, times: times.clone(), values, sem });
    };
    let acc = &total.times;
    let trace_pair = |a: &TimeAccumulator| {
        let p = a.sigma_z;
        (p.mean_b, (Pair::var(p.m2_b, p.n) / p.n.max(1.0)).sqrt())
    };
    put("trace".into(), ObservableKind::Trace, acc.iter().map(trace_pair).collect());
    put("sigma_z".into(), ObservableKind::SigmaZ, acc.iter().map(|a| a.sigma_z.mean_sem_a()).collect());
    put("sigma_z_normalized".into(), ObservableKind::SigmaZ, acc.iter().map(|a| a.sigma_z.ratio()).collect());
    for j in 0..dim {
        put(format!("population_{j}"), ObservableKind::Population, acc.iter().map(|a| a.populations[j].ratio()).collect());
    }
    let mut non_analytic_times = Vec::new();
    if !refs.is_empty() {
        let per_traj: Vec<(f64, f64)> = acc.iter().map(|a| a.rate.mean_sem_a()).collect();
        let fid: Vec<(f64, f64)> = acc
            .iter()
            .map(|a| {
                let best = a.fidelities.iter().map(|f| f.ratio()).fold((f64::NEG_INFINITY, 0.0), |m, f| if f.0 > m.0 { f } else { m });
                (-0.5 * best.0.ln(), best.1 / (2.0 * best.0.abs()))
            })
            .collect();
        let chosen = match cfg.rate_mode {
            RateMode::Trajectory => per_traj.clone(),
            RateMode::Fidelity => fid.clone(),
        };
        put("rate_function".into(), ObservableKind::RateFunction, chosen);
        put("rate_function_trajectory".into(), ObservableKind::RateFunction, per_traj);
        put("rate_function_fidelity".into(), ObservableKind::RateFunction, fid);
        let echo: Vec<(f64, f64)> = acc.iter().map(|a| a.fidelities[0].ratio()).collect();
        let d = resolved.system.n_qubits();
        let rate: Vec<(f64, f64)> = echo
            .iter()
            .zip(&times)
            .map(|(&(l, s), &t)| {
                let r = loschmidt_rate(l, d).expect("D ≥ 1");
                if r.is_infinite() {
                    non_analytic_times.push(t);
                }
                (r, s / (d as f64 * l.abs()))
            })
            .collect();
        put("loschmidt_echo".into(), ObservableKind::LoschmidtEcho, echo);
        put("loschmidt_rate".into(), ObservableKind::LoschmidtRate, rate);
    }
    let rho_raw: Vec<DMatrix<Complex64>> = acc.iter().map(|a| DMatrix::from_fn(dim, dim, |r, c| a.rho[r * dim + c].value() / n)).collect();
    let rho_normalized = rho_raw.iter().map(|r| r / r.trace()).collect();
    let n_failed = total.failures.len();
    EnsembleResult {
        steps: steps.to_vec(),
        times,
        series,
        rho_raw,
        rho_normalized,
        n_requested: cfg.n_traj,
        n_effective: total.successes,
        degraded: n_failed as f64 > DEGRADED_FRACTION * cfg.n_traj as f64,
        failures: total.failures,
        non_analytic_times,
        invalid_rate_points: acc.iter().filter(|a| a.invalid_rate > 0).count(),
        kept: total.kept,
        fit: resolved.fit.clone(),
        lindblad_rate: resolved.lindblad_rate,
    }
}

fn lindblad_ensemble(cfg: &EnsembleConfig, resolved: &ResolvedRun, refs: &[Statevector], steps: &[usize]) -> Result<EnsembleResult> {
    let system = &resolved.system;
    let dim = system.dim();
    let rho0 = DensityMatrix::pure(system.initial.amplitudes());
    let mut rhos = Vec::with_capacity(steps.len());
    lindblad_run(system, resolved.lindblad_rate, &rho0, cfg.dt, cfg.steps, cfg.stride, |_, r| rhos.push(r.clone()))?;
    // one deterministic sample per output time
    let mut total = Partial::new(steps.len(), dim, refs.len());
    for (acc, r) in total.times.iter_mut().zip(&rhos) {
        for (k, c) in acc.rho.iter_mut().enumerate() {
            c.add(r.entries[(k / dim, k % dim)]);
        }
        let tr = r.trace().re;
        let sz: f64 = (0..dim).map(|b| if b & 1 == 0 { r.entries[(b, b)].re } else { -r.entries[(b, b)].re }).sum();
        acc.sigma_z.push(sz, tr);
        for (j, p) in acc.populations.iter_mut().enumerate() {
            p.push(r.entries[(j, j)].re, tr);
        }
        for (f, s) in acc.fidelities.iter_mut().zip(refs) {
            f.push(r.expectation_in(s.amplitudes()), tr);
        }
        if !refs.is_empty() {
            acc.rate.push(rate_function_density(r, refs), 0.0);
        }
    }
    total.successes = 1;
    Ok(finish(cfg, resolved, refs, steps, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tfim_reference_0;
    use crate::model::tfim_reference_1;
    use crate::pauli::to_dense;
    use crate::reference::propagate_exact;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn refs() -> Vec<Statevector> {
        vec![tfim_reference_0(), tfim_reference_1()]
    }

    #[test]
    fn rate_function_examples() {
        let r = refs();
        assert_eq!(rate_function(r[0].amplitudes(), &r).unwrap(), 0.0);
        let mix: Vec<Complex64> = r[0].amplitudes().iter().zip(r[1].amplitudes()).map(|(a, b)| (a + b) / 2f64.sqrt()).collect();
        assert!((rate_function(&mix, &r).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-14);
        assert!(rate_function(&[c(0.0, 0.0); 4], &r).is_err());
    }

    #[test]
    fn loschmidt_examples() {
        let r = refs();
        assert_eq!(loschmidt_echo(r[0].amplitudes(), r[0].amplitudes()), 1.0);
        assert_eq!(loschmidt_rate(1.0, 2).unwrap(), 0.0);
        assert_eq!(loschmidt_echo(r[0].amplitudes(), r[1].amplitudes()), 0.0);
        assert_eq!(loschmidt_rate(0.0, 2).unwrap(), f64::INFINITY);
        assert!(loschmidt_rate(0.5, 0).is_err());
    }

    #[test]
    fn closed_tfim_matches_dense_evolution() {
        let tf = SystemSpec::tfim2(2.0, 1.0 / 0.42).unwrap();
        let h = to_dense(&tf.hamiltonian).unwrap();
        let psi0 = nalgebra::DVector::from_column_slice(tf.initial.amplitudes());
        let closed = SystemSpec::custom(tf.hamiltonian.clone(), crate::OperatorSum::zero(2), tf.initial.clone()).unwrap();
        let model = build_effective_model(&closed, &ModeExpansion::single(c(25.0, 0.0), c(50.0, 0.0)).unwrap(), 1).unwrap();
        let dt = 0.001;
        let traj = propagate_exact(&model, &NoiseTrajectory::zero(dt, 3000), &model.initial_state(), dt, 3000).unwrap();
        for n in [700, 1500, 3000] {
            let t = n as f64 * dt;
            let exact = (&h * c(0.0, -t)).exp() * &psi0;
            let ours = model.system_component(traj[n].amplitudes());
            let r = refs();
            let overlap = |v: &[Complex64]| r.iter().map(|s| loschmidt_echo(s.amplitudes(), v)).collect::<Vec<_>>();
            let (a, b) = (overlap(&ours), overlap(exact.as_slice()));
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
            assert!((rate_function(&ours, &r).unwrap() - rate_function(exact.as_slice(), &r).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn single_zero_noise_trajectory_equals_deterministic_run() {
        let mut cfg = EnsembleConfig::preset(Preset::SpinBosonFig2).with_window(1.0);
        cfg.n_traj = 1;
        cfg.zero_noise = true;
        cfg.stride = 50;
        let res = run_ensemble(&cfg).unwrap();
        let resolved = resolve(&cfg).unwrap();
        let m = &resolved.model;
        let traj = propagate_exact(m, &NoiseTrajectory::zero(cfg.dt, cfg.steps), &m.initial_state(), cfg.dt, cfg.steps).unwrap();
        for (k, &s) in res.steps.iter().enumerate() {
            let psi = m.system_component(traj[s].amplitudes());
            let sz = psi[0].norm_sqr() - psi[1].norm_sqr();
            assert!((res.get("sigma_z").unwrap().values[k] - sz).abs() < 1e-14);
            assert_eq!(res.get("sigma_z").unwrap().sem[k], 0.0);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt).with_window(0.5);
        cfg.n_traj = 70;
        cfg.backend = Backend::Hops;
        cfg.n_max = 1;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_ensemble(&cfg).unwrap());
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run_ensemble(&cfg).unwrap());
        assert_eq!(one.series, three.series);
        assert_eq!(one.rho_raw, three.rho_raw);
    }

    #[test]
    fn exact_and_hops_backends_agree() {
        let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt).with_window(0.4);
        cfg.n_traj = 20;
        cfg.n_max = 1;
        let exact = run_ensemble(&cfg).unwrap();
        cfg.backend = Backend::Hops;
        let hops = run_ensemble(&cfg).unwrap();
        for (a, b) in exact.rho_raw.iter().zip(&hops.rho_raw) {
            assert!((a - b).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-8);
        }
    }

    #[test]
    fn lindblad_backend_is_deterministic() {
        let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt).with_window(1.0);
        cfg.backend = Backend::Lindblad;
        let res = run_ensemble(&cfg).unwrap();
        assert_eq!(res.n_effective, 1);
        assert!(res.get("trace").unwrap().values.iter().all(|t| (t - 1.0).abs() < 1e-10));
        assert_eq!(res.get("rate_function").unwrap().values[0], 0.0);
        let lf = &res.get("rate_function_fidelity").unwrap().values;
        let lt = &res.get("rate_function").unwrap().values;
        assert!(lf.iter().zip(lt).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(res.lindblad_rate, 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = EnsembleConfig::preset(Preset::SpinBosonFig2);
        let mut c1 = base.clone();
        c1.n_traj = 0;
        assert!(c1.validate().is_err());
        let mut c2 = base.clone();
        c2.backend = Backend::Vqs;
        c2.depth = 0;
        assert!(c2.validate().is_err());
        let mut c3 = base.clone();
        c3.closure = Closure::MarkovianTerminator;
        c3.backend = Backend::Hops;
        assert!(c3.validate().is_err());
        c3.n_max = 1;
        assert!(c3.validate().is_ok());
    }

    #[test]
    fn output_grid_includes_last_step() {
        let mut cfg = EnsembleConfig::preset(Preset::SpinBosonFig2);
        cfg.steps = 25;
        cfg.stride = 10;
        assert_eq!(cfg.output_steps(), vec![0, 10, 20, 25]);
    }

    #[test]
    fn failures_are_counted() {
        // an absurd step makes every trajectory blow up
        let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt);
        cfg.dt = 0.5;
        cfg.steps = 40;
        cfg.n_traj = 4;
        cfg.backend = Backend::Hops;
        assert!(matches!(run_ensemble(&cfg), Err(Error::NoTrajectories { requested: 4 })));
    }

    #[test]
    fn pair_statistics_match_direct_formulas() {
        let a = [1.0, 2.5, -0.3, 4.0, 0.7];
        let b = [1.1, 0.9, 1.3, 1.0, 0.8];
        let mut whole = Pair::default();
        let (mut p1, mut p2) = (Pair::default(), Pair::default());
        for (k, (&x, &y)) in a.iter().zip(&b).enumerate() {
            whole.push(x, y);
            if k < 2 { p1.push(x, y) } else { p2.push(x, y) }
        }
        p1.merge(&p2);
        let mean = a.iter().sum::<f64>() / 5.0;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((whole.mean_sem_a().1 - (var / 5.0).sqrt()).abs() < 1e-14);
        assert!((p1.mean_sem_a().0 - mean).abs() < 1e-14 && (p1.c_ab - whole.c_ab).abs() < 1e-12);
    }
}
