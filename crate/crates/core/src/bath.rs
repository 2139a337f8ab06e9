//! Bath spectral densities, correlation functions and exponential-mode fits.
//!
//! Units are ħ = k_B = 1. The correlation function of a bath with spectral
//! density S(ω) at temperature T is
//!
//! ```text
//! α(t) = (1/π) ∫₀^∞ dω S(ω) [coth(ω/2T) cos ωt − i sin ωt]
//! ```
//!
//! defined for t ≥ 0 and extended to negative lags by α(−τ) = α(τ)*.
//! The Ornstein–Uhlenbeck bath is specified directly in the time domain as
//! α(t) = (Γγ/2) e^{−γt}.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Absolute tolerance on the quadrature of the Debye correlation function.
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Number of grid points used by [`fit_expansion`].
pub const FIT_GRID_POINTS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BathKind {
    /// S(ω) = η ωγ / (ω² + γ²) at temperature T.
    Debye { eta: f64, gamma: f64, temperature: f64 },
    /// α(t) = (Γγ/2) e^{−γ|t|}, temperature-free.
    OrnsteinUhlenbeck { coupling: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    pub kind: BathKind,
}

impl BathSpec {
    pub fn debye(eta: f64, gamma: f64, temperature: f64) -> Result<Self> {
        let spec = Self { kind: BathKind::Debye { eta, gamma, temperature } };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ornstein_uhlenbeck(coupling: f64, gamma: f64) -> Result<Self> {
        let spec = Self { kind: BathKind::OrnsteinUhlenbeck { coupling, gamma } };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self.kind {
            BathKind::Debye { eta, gamma, temperature } => {
                positive("eta", eta)?;
                positive("gamma", gamma)?;
                positive("temperature", temperature)
            }
            BathKind::OrnsteinUhlenbeck { coupling, gamma } => {
                positive("coupling", coupling)?;
                positive("gamma", gamma)
            }
        }
    }

    /// Characteristic decay rate γ of the bath.
    pub fn gamma(&self) -> f64 {
        match self.kind {
            BathKind::Debye { gamma, .. } | BathKind::OrnsteinUhlenbeck { gamma, .. } => gamma,
        }
    }

    /// Upper end of the frequency window for Debye baths: 50·max(γ, T).
    pub fn frequency_cutoff(&self) -> f64 {
        match self.kind {
            BathKind::Debye { gamma, temperature, .. } => 50.0 * gamma.max(temperature),
            BathKind::OrnsteinUhlenbeck { .. } => f64::INFINITY,
        }
    }

    pub fn spectral_density(&self, omega: f64) -> Option<f64> {
        match self.kind {
            BathKind::Debye { eta, gamma, .. } => Some(eta * omega * gamma / (omega * omega + gamma * gamma)),
            BathKind::OrnsteinUhlenbeck { .. } => None,
        }
    }

    /// Two-sided spectral weight P(ω) = ∫ dτ α(τ) e^{iωτ} of the extended
    /// correlation, non-negative for every physical bath.
    ///
    /// For Debye this is 2S(ω)/(1 − e^{−ω/T}), truncated to |ω| ≤ Ω_max so
    /// that it matches the windowed quadrature of [`correlation_function`].
    pub fn spectral_weight(&self, omega: f64) -> f64 {
        match self.kind {
            BathKind::Debye { eta, gamma, temperature } => {
                if omega.abs() > self.frequency_cutoff() {
                    return 0.0;
                }
                let x = omega / temperature;
                // 2S(ω)/(1 − e^{−x}) = 2ηγ T · [x/(1 − e^{−x})] / (ω² + γ²)
                let bose = if x.abs() < 1e-8 { 1.0 + 0.5 * x } else { x / (-(-x).exp_m1()) };
                2.0 * eta * gamma * temperature * bose / (omega * omega + gamma * gamma)
            }
            BathKind::OrnsteinUhlenbeck { coupling, gamma } => coupling * gamma * gamma / (gamma * gamma + omega * omega),
        }
    }
}

/// `x·coth(x)`, regular at the origin.
fn x_coth_x(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 + x2 / 3.0 - x2 * x2 / 45.0
    } else {
        x / x.tanh()
    }
}

/// Bath correlation function α(t) for t ≥ 0.
pub fn correlation_function(spec: &BathSpec, t: f64) -> Result<Complex64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("correlation requested at t = {t} < 0")));
    }
    match spec.kind {
        BathKind::OrnsteinUhlenbeck { coupling, gamma } => Ok(Complex64::new(0.5 * coupling * gamma * (-gamma * t).exp(), 0.0)),
        BathKind::Debye { eta, gamma, temperature } => {
            let cutoff = spec.frequency_cutoff();
            // S(ω)coth(ω/2T) = ηγ/(ω²+γ²) · 2T · x coth x with x = ω/2T
            let re = quadrature::integrate(
                |w| {
                    let x = w / (2.0 * temperature);
                    eta * gamma / (w * w + gamma * gamma) * 2.0 * temperature * x_coth_x(x) * (w * t).cos()
                },
                0.0,
                cutoff,
                QUADRATURE_TOL * 0.1,
                0.0,
                20_000,
            );
            let im = quadrature::integrate(
                |w| eta * w * gamma / (w * w + gamma * gamma) * (w * t).sin(),
                0.0,
                cutoff,
                QUADRATURE_TOL * 0.1,
                0.0,
                20_000,
            );
            let estimate = (re.error + im.error) / std::f64::consts::PI;
            if estimate > QUADRATURE_TOL {
                return Err(Error::Quadrature { t, estimate, tol: QUADRATURE_TOL });
            }
            Ok(Complex64::new(re.value, -im.value) / std::f64::consts::PI)
        }
    }
}

/// One exponential term d·e^{−νt} of a correlation expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub d: Complex64,
    pub nu: Complex64,
}

/// A list of decaying exponential modes, α̃(t) = Σ_k d_k e^{−ν_k t}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeExpansion {
    pub modes: Vec<Mode>,
}

impl ModeExpansion {
    pub fn new(modes: Vec<Mode>) -> Result<Self> {
        let e = Self { modes };
        e.validate()?;
        Ok(e)
    }

    pub fn single(d: Complex64, nu: Complex64) -> Result<Self> {
        Self::new(vec![Mode { d, nu }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidParameter("mode expansion has no modes".into()));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if !(m.nu.re > 0.0) {
                return Err(Error::InvalidParameter(format!("mode {k} has Re ν = {} ≤ 0", m.nu.re)));
            }
            if !(m.d.re.is_finite() && m.d.im.is_finite() && m.nu.im.is_finite()) {
                return Err(Error::NonFinite("mode parameters"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Two-sided spectral weight of the Hermitian extension,
    /// P(ω) = 2 Re Σ_k d_k / (ν_k − iω). May be negative for a fit.
    pub fn spectral_weight(&self, omega: f64) -> f64 {
        self.modes
            .iter()
            .map(|m| 2.0 * (m.d / (m.nu - Complex64::new(0.0, omega))).re)
            .sum()
    }
}

/// Σ_k d_k e^{−ν_k t} for t ≥ 0. Negative lags are obtained from the
/// Hermitian extension α̃(−τ) = α̃(τ)*, see [`reconstruct_extended`].
pub fn reconstruct(expansion: &ModeExpansion, t: f64) -> Complex64 {
    expansion.modes.iter().map(|m| m.d * (-m.nu * t).exp()).sum()
}

pub fn reconstruct_extended(expansion: &ModeExpansion, tau: f64) -> Complex64 {
    if tau >= 0.0 {
        reconstruct(expansion, tau)
    } else {
        reconstruct(expansion, -tau).conj()
    }
}

/// Fitted modes and the achieved max-norm residual on the fit grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub expansion: ModeExpansion,
    pub residual: f64,
    pub window: f64,
    pub grid_points: usize,
}

/// Default fit window: ten times the slowest intrinsic memory time 1/γ.
pub fn default_fit_window(spec: &BathSpec) -> f64 {
    10.0 / spec.gamma()
}

fn fit_grid(window: f64) -> Vec<f64> {
    let n = FIT_GRID_POINTS;
    (0..n).map(|j| window * j as f64 / (n - 1) as f64).collect()
}

/// Max-norm residual of `expansion` against samples.
pub fn max_residual(expansion: &ModeExpansion, times: &[f64], samples: &[Complex64]) -> f64 {
    times
        .iter()
        .zip(samples)
        .map(|(&t, a)| (reconstruct(expansion, t) - a).norm())
        .fold(0.0, f64::max)
}

/// Fit `modes` exponentials to α(t) on `[0, window]`, minimizing the max-norm
/// error over a uniform grid of [`FIT_GRID_POINTS`] points.
///
/// Starts from Prony's method, polishes with Levenberg–Marquardt least
/// squares, then refines the max-norm error with Nelder–Mead. Returns an
/// error carrying the achieved residual when it exceeds `tol`.
pub fn fit_expansion(spec: &BathSpec, modes: usize, window: f64, tol: f64) -> Result<FitReport> {
    spec.validate()?;
    if modes == 0 {
        return Err(Error::InvalidParameter("at least one mode is required".into()));
    }
    if !(window > 0.0) {
        return Err(Error::InvalidParameter(format!("fit window must be positive, got {window}")));
    }
    let times = fit_grid(window);
    let samples = times.iter().map(|&t| correlation_function(spec, t)).collect::<Result<Vec<_>>>()?;

    let expansion = match spec.kind {
        BathKind::OrnsteinUhlenbeck { coupling, gamma } if modes == 1 => {
            ModeExpansion::single(Complex64::new(0.5 * coupling * gamma, 0.0), Complex64::new(gamma, 0.0))?
        }
        _ => fit_samples(&times, &samples, modes)?,
    };
    let residual = max_residual(&expansion, &times, &samples);
    if residual > tol {
        return Err(Error::FitResidual { achieved: residual, tol, modes });
    }
    Ok(FitReport { expansion, residual, window, grid_points: times.len() })
}

/// Exponential fit of sampled data on a uniform grid.
pub fn fit_samples(times: &[f64], samples: &[Complex64], modes: usize) -> Result<ModeExpansion> {
    let h = times[1] - times[0];
    let start = prony(samples, h, modes)?;
    let mut p = pack(&start);
    let residual_vec = |p: &[f64]| -> Vec<f64> {
        let e = unpack(p);
        times
            .iter()
            .zip(samples)
            .flat_map(|(&t, a)| {
                let r = reconstruct(&e, t) - a;
                [r.re, r.im]
            })
            .collect()
    };
    p = levenberg_marquardt(&residual_vec, p, 200);
    let max_err = |p: &[f64]| {
        let e = unpack(p);
        max_residual(&e, times, samples)
    };
    // a few restarts shake the simplex out of kinks of the max-norm surface
    for _ in 0..4 {
        p = nelder_mead(&max_err, p, 0.05, 4000);
    }
    let e = unpack(&p);
    e.validate()?;
    Ok(e)
}

// Parameters per mode: Re d, Im d, ln Re ν, Im ν. The log keeps Re ν > 0.
fn pack(e: &ModeExpansion) -> Vec<f64> {
    e.modes.iter().flat_map(|m| [m.d.re, m.d.im, m.nu.re.ln(), m.nu.im]).collect()
}

fn unpack(p: &[f64]) -> ModeExpansion {
    ModeExpansion {
        modes: p
            .chunks(4)
            .map(|c| Mode { d: Complex64::new(c[0], c[1]), nu: Complex64::new(c[2].exp(), c[3]) })
            .collect(),
    }
}

/// Prony's method: linear prediction for the exponents, then least squares
/// for the amplitudes.
fn prony(samples: &[Complex64], h: f64, modes: usize) -> Result<ModeExpansion> {
    let n = samples.len();
    if n < 2 * modes + 1 {
        return Err(Error::InvalidParameter("too few samples for Prony".into()));
    }
    let rows = n - modes;
    let a = DMatrix::from_fn(rows, modes, |i, j| samples[i + j]);
    let b = DVector::from_fn(rows, |i, _| -samples[i + modes]);
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidParameter(format!("Prony solve failed: {e}")))?;
    // z^K + c_{K-1} z^{K-1} + ... + c_0
    let mut poly: Vec<Complex64> = coeffs.iter().copied().collect();
    poly.push(Complex64::new(1.0, 0.0));
    let roots = polynomial_roots(&poly);
    let nus: Vec<Complex64> = roots
        .iter()
        .map(|z| {
            let mut nu = -z.ln() / h;
            if !(nu.re > 0.0) || !nu.re.is_finite() {
                nu = Complex64::new(1.0 / (h * n as f64), 0.0);
            }
            nu
        })
        .collect();
    let v = DMatrix::from_fn(n, modes, |i, k| (-nus[k] * (i as f64 * h)).exp());
    let y = DVector::from_column_slice(samples);
    let amps = v
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::InvalidParameter(format!("amplitude solve failed: {e}")))?;
    Ok(ModeExpansion { modes: amps.iter().zip(&nus).map(|(&d, &nu)| Mode { d, nu }).collect() })
}

/// Durand–Kerner iteration for the roots of Σ c_j z^j (leading coefficient last).
fn polynomial_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let degree = coeffs.len() - 1;
    let lead = coeffs[degree];
    let monic: Vec<Complex64> = coeffs.iter().map(|c| c / lead).collect();
    let eval = |z: Complex64| monic.iter().rev().fold(Complex64::default(), |acc, c| acc * z + c);
    let seed = Complex64::new(0.4, 0.9);
    let mut roots: Vec<Complex64> = (0..degree).map(|k| seed.powu(k as u32)).collect();
    for _ in 0..500 {
        let mut shift = 0.0f64;
        for i in 0..degree {
            let denom: Complex64 = (0..degree).filter(|&j| j != i).map(|j| roots[i] - roots[j]).product();
            let delta = eval(roots[i]) / denom;
            roots[i] -= delta;
            shift = shift.max(delta.norm());
        }
        if shift < 1e-15 {
            break;
        }
    }
    roots
}

fn levenberg_marquardt<F: Fn(&[f64]) -> Vec<f64>>(f: &F, mut p: Vec<f64>, iterations: usize) -> Vec<f64> {
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut r = f(&p);
    let mut c = cost(&r);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let m = r.len();
        let n = p.len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let step = 1e-7 * p[j].abs().max(1.0);
            let mut q = p.clone();
            q[j] += step;
            let rq = f(&q);
            for i in 0..m {
                jac[(i, j)] = (rq[i] - r[i]) / step;
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let q: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let rq = f(&q);
            let cq = cost(&rq);
            if cq.is_finite() && cq < c {
                let rel = (c - cq) / c.max(1e-300);
                p = q;
                r = rq;
                c = cq;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    p
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: Vec<f64>, scale: f64, iterations: usize) -> Vec<f64> {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = f(&start);
    simplex.push((start.clone(), f0));
    for j in 0..n {
        let mut v = start.clone();
        v[j] += scale * start[j].abs().max(0.1);
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        if spread.abs() <= 1e-15 * simplex[0].1.abs().max(1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v.0[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n].0[k] - centroid[k])).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[n].1 { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = best.iter().zip(&v.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let fs = f(&shrunk);
                    *v = (shrunk, fs);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}
