//! Emulated variational simulation of the non-unitary pseudo-Fock equation.
//!
//! The ansatz is |Φ⟩ = α U(θ)|Φ₀⟩ with U(θ) = ∏_j U_{n,j}···U_{1,j} and
//! U_{i,j} = exp(−iθ_{i,j} H^(i)). Parameters Θ = (α, θ) follow McLachlan's
//! principle, M Θ̇ = V with
//!
//! ```text
//! M_00 = 1,  M_0j = 0,  M_ij = α² Re⟨∂_iφ|∂_jφ⟩
//! V_0 = α Im⟨φ|H_eff|φ⟩,  V_i = α² Im⟨∂_iφ|H_eff|φ⟩
//! ```
//!
//! Inner products are evaluated exactly on statevectors. Parameter index p
//! maps to layer p / n and generator p % n.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EffectiveModel;
use crate::noise::NoiseTrajectory;
use crate::pauli::{rotate, CompiledOperator, OperatorSum, PauliWord, Statevector};
use crate::rk4;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Defaults: Tikhonov weight, relative singular-value cutoff and the
/// relative solver residual above which a trajectory is abandoned.
pub const DEFAULT_REGULARIZATION: f64 = 1e-6;
pub const DEFAULT_SVD_CUTOFF: f64 = 1e-8;
pub const DEFAULT_ABORT_RESIDUAL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzSpec {
    pub generators: Vec<PauliWord>,
    pub depth: usize,
    pub initial: Statevector,
}

impl AnsatzSpec {
    pub fn new(generators: Vec<PauliWord>, depth: usize, initial: Statevector) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidParameter("ansatz depth must be at least 1".into()));
        }
        if generators.is_empty() {
            return Err(Error::InvalidParameter("ansatz needs at least one generator".into()));
        }
        if let Some(w) = generators.iter().find(|w| w.n_qubits() != initial.n_qubits()) {
            return Err(Error::QubitMismatch { expected: initial.n_qubits(), found: w.n_qubits() });
        }
        Ok(Self { generators, depth, initial })
    }

    /// Generators from the model's decomposition, starting in the encoded initial state.
    pub fn from_model(model: &EffectiveModel, depth: usize) -> Result<Self> {
        Self::new(model.generators.clone(), depth, model.initial_state())
    }

    pub fn n_angles(&self) -> usize {
        self.generators.len() * self.depth
    }

    /// l = n·m + 1.
    pub fn n_params(&self) -> usize {
        self.n_angles() + 1
    }

    fn generator(&self, p: usize) -> &PauliWord {
        &self.generators[p % self.generators.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzState {
    pub alpha: f64,
    pub angles: Vec<f64>,
    phi: Statevector,
}

impl AnsatzState {
    pub fn new(spec: &AnsatzSpec, alpha: f64, angles: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("norm parameter must be positive, got {alpha}")));
        }
        if angles.len() != spec.n_angles() {
            return Err(Error::InvalidParameter(format!("expected {} angles, got {}", spec.n_angles(), angles.len())));
        }
        let mut amps = spec.initial.amplitudes().to_vec();
        for (p, &theta) in angles.iter().enumerate() {
            rotate(spec.generator(p), theta, &mut amps);
        }
        let phi = Statevector::from_amplitudes(spec.initial.n_qubits(), amps)?;
        Ok(Self { alpha, angles, phi })
    }

    /// α = 1 and θ = 0, so the ansatz starts exactly at |Φ₀⟩.
    pub fn initial(spec: &AnsatzSpec) -> Self {
        Self::new(spec, 1.0, vec![0.0; spec.n_angles()]).expect("valid defaults")
    }

    pub fn phi(&self) -> &Statevector {
        &self.phi
    }

    /// α|φ(θ)⟩.
    pub fn state(&self) -> Statevector {
        self.phi.scaled(Complex64::new(self.alpha, 0.0))
    }

    pub fn params(&self) -> Vec<f64> {
        std::iter::once(self.alpha).chain(self.angles.iter().copied()).collect()
    }
}

/// ∂|φ⟩/∂θ_p: the product with −iH^(i) inserted right after gate p.
pub fn tangent_states(spec: &AnsatzSpec, state: &AnsatzState) -> Vec<Statevector> {
    tangents_raw(spec, &state.angles).into_iter().map(|a| Statevector::from_amplitudes(spec.initial.n_qubits(), a).expect("register size")).collect()
}

fn tangents_raw(spec: &AnsatzSpec, angles: &[f64]) -> Vec<Vec<Complex64>> {
    let mut prefix = spec.initial.amplitudes().to_vec();
    let mut out = Vec::with_capacity(angles.len());
    for p in 0..angles.len() {
        let word = spec.generator(p);
        rotate(word, angles[p], &mut prefix);
        let mut t = vec![Complex64::default(); prefix.len()];
        for (b, a) in prefix.iter().enumerate() {
            let (target, phase) = word.action(b);
            t[target] = -I * phase * a;
        }
        for q in p + 1..angles.len() {
            rotate(spec.generator(q), angles[q], &mut t);
        }
        out.push(t);
    }
    out
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct McLachlanSystem {
    pub m: DMatrix<f64>,
    pub v: DVector<f64>,
}

fn assemble_from(alpha: f64, phi: &[Complex64], tangents: &[Vec<Complex64>], h_phi: &[Complex64]) -> McLachlanSystem {
    let l = tangents.len() + 1;
    let a2 = alpha * alpha;
    let mut m = DMatrix::zeros(l, l);
    let mut v = DVector::zeros(l);
    m[(0, 0)] = 1.0;
    v[0] = alpha * inner(phi, h_phi).im;
    for i in 0..tangents.len() {
        for j in i..tangents.len() {
            let g = a2 * inner(&tangents[i], &tangents[j]).re;
            m[(i + 1, j + 1)] = g;
            m[(j + 1, i + 1)] = g;
        }
        v[i + 1] = a2 * inner(&tangents[i], h_phi).im;
    }
    McLachlanSystem { m, v }
}

pub fn assemble_mclachlan(spec: &AnsatzSpec, state: &AnsatzState, h_eff: &OperatorSum) -> Result<McLachlanSystem> {
    if h_eff.n_qubits() != spec.initial.n_qubits() {
        return Err(Error::QubitMismatch { expected: spec.initial.n_qubits(), found: h_eff.n_qubits() });
    }
    let tangents = tangents_raw(spec, &state.angles);
    let h_phi = h_eff.compile().apply(&state.phi)?;
    Ok(assemble_from(state.alpha, state.phi.amplitudes(), &tangents, h_phi.amplitudes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub theta_dot: DVector<f64>,
    /// ‖M Θ̇ − V‖ against the unregularized M.
    pub residual: f64,
    pub pseudo_inverse: bool,
}

fn check_finite(sys: &McLachlanSystem) -> Result<()> {
    if sys.m.iter().chain(sys.v.iter()).all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("McLachlan system"))
    }
}

/// Minimum-norm least-squares solution with singular values below
/// `cutoff·σ_max` discarded.
pub fn pseudo_inverse_solve(a: &DMatrix<f64>, b: &DVector<f64>, cutoff: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.as_ref().expect("computed");
    let vt = svd.v_t.as_ref().expect("computed");
    let mut x = DVector::zeros(a.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff * smax && s > 0.0 {
            let coef = u.column(k).dot(b) / s;
            x += vt.row(k).transpose() * coef;
        }
    }
    x
}

fn solve_with(sys: &McLachlanSystem, regularized: DMatrix<f64>, cutoff: f64) -> Result<StepSolution> {
    check_finite(sys)?;
    let n = regularized.nrows();
    let chol = regularized.clone().cholesky().filter(|c| {
        let d = c.l_dirty().diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x.abs()), hi.max(x.abs())));
        // (hi/lo)² estimates the condition number; beyond 1/cutoff the
        // pseudo-inverse drops the near-null directions instead
        lo > 0.0 && (lo / hi).powi(2) > cutoff
    });
    let (theta_dot, pseudo_inverse) = match chol {
        Some(c) => (c.solve(&sys.v), false),
        None => (pseudo_inverse_solve(&regularized, &sys.v, cutoff), true),
    };
    debug_assert_eq!(theta_dot.len(), n);
    if theta_dot.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("parameter derivative"));
    }
    let residual = (&sys.m * &theta_dot - &sys.v).norm();
    Ok(StepSolution { theta_dot, residual, pseudo_inverse })
}

/// Solve (M + reg·I) Θ̇ = V by Cholesky, falling back to an SVD
/// pseudo-inverse when the factorization fails or is too ill-conditioned.
pub fn solve_step(sys: &McLachlanSystem, reg: f64) -> Result<StepSolution> {
    solve_step_with_cutoff(sys, reg, DEFAULT_SVD_CUTOFF)
}

pub fn solve_step_with_cutoff(sys: &McLachlanSystem, reg: f64, cutoff: f64) -> Result<StepSolution> {
    if !(reg >= 0.0) {
        return Err(Error::InvalidParameter(format!("regularization must be non-negative, got {reg}")));
    }
    let n = sys.m.nrows();
    solve_with(sys, &sys.m + DMatrix::identity(n, n) * reg, cutoff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqsOptions {
    pub regularization: f64,
    pub svd_cutoff: f64,
    /// Relative residual ‖MΘ̇ − V‖ / ‖V‖ above which the trajectory fails.
    pub abort_residual: f64,
    /// Check M symmetry and positivity, tangent finite differences and the
    /// norm row at every step (expensive).
    pub check_invariants: bool,
}

impl Default for VqsOptions {
    fn default() -> Self {
        Self {
            regularization: DEFAULT_REGULARIZATION,
            svd_cutoff: DEFAULT_SVD_CUTOFF,
            abort_residual: DEFAULT_ABORT_RESIDUAL,
            check_invariants: false,
        }
    }
}

/// Per-step diagnostic record. Invariant fields are filled only when
/// [`VqsOptions::check_invariants`] is set, and hold the worst value over
/// the step's RK4 stages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub alpha: f64,
    pub residual: f64,
    pub condition: Option<f64>,
    pub symmetry_error: Option<f64>,
    pub min_eigenvalue: Option<f64>,
    pub tangent_fd_error: Option<f64>,
    pub norm_row_error: Option<f64>,
}

impl StepDiagnostics {
    fn merge(&mut self, other: &StepDiagnostics) {
        let worst = |a: Option<f64>, b: Option<f64>, pick: fn(f64, f64) -> f64| match (a, b) {
            (Some(x), Some(y)) => Some(pick(x, y)),
            (x, None) => x,
            (None, y) => y,
        };
        self.residual = self.residual.max(other.residual);
        self.condition = worst(self.condition, other.condition, f64::max);
        self.symmetry_error = worst(self.symmetry_error, other.symmetry_error, f64::max);
        self.min_eigenvalue = worst(self.min_eigenvalue, other.min_eigenvalue, f64::min);
        self.tangent_fd_error = worst(self.tangent_fd_error, other.tangent_fd_error, f64::max);
        self.norm_row_error = worst(self.norm_row_error, other.norm_row_error, f64::max);
    }
}

/// Central finite difference of |φ(θ)⟩ with step `h`, max amplitude error
/// against the analytic tangents.
pub fn tangent_fd_error(spec: &AnsatzSpec, angles: &[f64], h: f64) -> f64 {
    let analytic = tangents_raw(spec, angles);
    let prep = |th: &[f64]| {
        let mut a = spec.initial.amplitudes().to_vec();
        for (p, &t) in th.iter().enumerate() {
            rotate(spec.generator(p), t, &mut a);
        }
        a
    };
    let mut worst = 0.0f64;
    let mut th = angles.to_vec();
    for p in 0..angles.len() {
        th[p] = angles[p] + h;
        let plus = prep(&th);
        th[p] = angles[p] - h;
        let minus = prep(&th);
        th[p] = angles[p];
        for ((a, b), t) in plus.iter().zip(&minus).zip(&analytic[p]) {
            worst = worst.max(((a - b) / (2.0 * h) - t).norm());
        }
    }
    worst
}

/// Variational propagator sharing compiled operators across steps.
#[derive(Debug, Clone)]
pub struct VqsEngine {
    spec: AnsatzSpec,
    h_static: CompiledOperator,
    g_noise: CompiledOperator,
    options: VqsOptions,
}

/// One recorded point of a variational trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct VqsSample {
    pub step: usize,
    pub alpha: f64,
    pub angles: Vec<f64>,
    /// α|φ(θ)⟩.
    pub state: Statevector,
}

impl VqsEngine {
    pub fn new(model: &EffectiveModel, spec: AnsatzSpec, options: VqsOptions) -> Result<Self> {
        if spec.initial.n_qubits() != model.n_qubits {
            return Err(Error::QubitMismatch { expected: model.n_qubits, found: spec.initial.n_qubits() });
        }
        if !(options.regularization >= 0.0) || !(options.svd_cutoff > 0.0) {
            return Err(Error::InvalidParameter("regularization must be ≥ 0 and the SVD cutoff > 0".into()));
        }
        Ok(Self { spec, h_static: model.h_static.compile(), g_noise: model.g_noise.compile(), options })
    }

    pub fn spec(&self) -> &AnsatzSpec {
        &self.spec
    }

    /// Θ̇ at parameters `params` for noise value z*.
    fn derivative(&self, params: &[f64], z_conj: Complex64, diag: &mut StepDiagnostics) -> Result<Vec<f64>> {
        let alpha = params[0];
        let angles = &params[1..];
        let state = AnsatzState::new(&self.spec, alpha, angles.to_vec())?;
        let phi = state.phi.amplitudes();
        let mut h_phi = vec![Complex64::default(); phi.len()];
        self.h_static.apply_add(Complex64::new(1.0, 0.0), phi, &mut h_phi);
        self.g_noise.apply_add(z_conj, phi, &mut h_phi);
        let tangents = tangents_raw(&self.spec, angles);
        let sys = assemble_from(alpha, phi, &tangents, &h_phi);
        let n = sys.m.nrows();
        // regularize the θ block only so the α row stays exactly the norm equation
        let mut reg = sys.m.clone();
        for k in 1..n {
            reg[(k, k)] += self.options.regularization;
        }
        let sol = solve_with(&sys, reg, self.options.svd_cutoff)?;
        let scale = sys.v.norm().max(f64::MIN_POSITIVE);
        let mut here = StepDiagnostics { residual: sol.residual / scale, ..Default::default() };
        if self.options.check_invariants {
            here.symmetry_error = Some((&sys.m - sys.m.transpose()).abs().max());
            let eig = sys.m.clone().symmetric_eigenvalues();
            let (lo, hi) = (eig.min(), eig.max());
            here.min_eigenvalue = Some(lo);
            here.condition = Some(hi / (lo + self.options.regularization).max(f64::MIN_POSITIVE));
            here.tangent_fd_error = Some(tangent_fd_error(&self.spec, angles, 1e-5));
            here.norm_row_error = Some((sol.theta_dot[0] - alpha * inner(phi, &h_phi).im).abs());
        }
        diag.merge(&here);
        if here.residual > self.options.abort_residual {
            return Err(Error::InvalidParameter(format!(
                "variational solve residual {:.3e} exceeds the abort threshold {:.3e}",
                here.residual, self.options.abort_residual
            )));
        }
        Ok(sol.theta_dot.iter().copied().collect())
    }

    /// Propagate from α = 1, θ = 0. `observe(step, state)` sees step 0, every
    /// `stride` steps and the last step; `diagnostics` receives one record per step.
    pub fn run<F, D>(&self, noise: &NoiseTrajectory, dt: f64, steps: usize, stride: usize, mut observe: F, mut diagnostics: D) -> Result<()>
    where
        F: FnMut(usize, &AnsatzState),
        D: FnMut(&StepDiagnostics),
    {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let needed = ((steps.saturating_sub(1) as f64 * dt) / noise.dt + 1e-9).floor() as usize;
        if steps > 0 && needed > noise.steps() {
            return Err(Error::InvalidParameter("noise trajectory shorter than the run".into()));
        }
        let stride = stride.max(1);
        let mut params = AnsatzState::initial(&self.spec).params();
        observe(0, &AnsatzState::initial(&self.spec));
        for step in 0..steps {
            let idx = ((step as f64 * dt) / noise.dt + 1e-9).floor() as usize;
            let zc = noise.at(idx).conj();
            let mut diag = StepDiagnostics { step: step + 1, t: (step + 1) as f64 * dt, ..Default::default() };
            params = rk4::step_real(&params, dt, |p| self.derivative(p, zc, &mut diag))?;
            if !(params[0] > 0.0) || params.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("variational parameters"));
            }
            if params[0] > crate::reference::INSTABILITY_NORM {
                return Err(Error::Unstable { step: step + 1, norm: params[0] });
            }
            diag.alpha = params[0];
            diagnostics(&diag);
            if (step + 1) % stride == 0 || step + 1 == steps {
                observe(step + 1, &AnsatzState::new(&self.spec, params[0], params[1..].to_vec())?);
            }
        }
        Ok(())
    }
}

/// Full trajectory of (α, θ, α|φ⟩) at every step plus the diagnostics stream.
pub fn evolve_vqs(
    model: &EffectiveModel,
    spec: &AnsatzSpec,
    noise: &NoiseTrajectory,
    dt: f64,
    steps: usize,
    options: VqsOptions,
) -> Result<(Vec<VqsSample>, Vec<StepDiagnostics>)> {
    let engine = VqsEngine::new(model, spec.clone(), options)?;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut diags = Vec::with_capacity(steps);
    engine.run(
        noise,
        dt,
        steps,
        1,
        |step, s| samples.push(VqsSample { step, alpha: s.alpha, angles: s.angles.clone(), state: s.state() }),
        |d| diags.push(*d),
    )?;
    Ok((samples, diags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::ModeExpansion;
    use crate::model::{build_effective_model, SystemSpec};
    use crate::pauli::to_dense;
    use crate::reference::propagate_exact;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sb_model() -> EffectiveModel {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        build_effective_model(&sb, &ModeExpansion::single(c(1.06085253, -0.0328022), c(0.30333961, 0.00212558)).unwrap(), 2).unwrap()
    }

    #[test]
    fn tangent_at_identity() {
        let z = PauliWord::parse("Z").unwrap();
        let spec = AnsatzSpec::new(vec![z], 1, Statevector::basis(1, 0).unwrap()).unwrap();
        let t = tangent_states(&spec, &AnsatzState::initial(&spec));
        assert_eq!(t[0].amplitudes(), &[c(0.0, -1.0), c(0.0, 0.0)]);
    }

    #[test]
    fn parameter_count() {
        let model = sb_model();
        let spec = AnsatzSpec::from_model(&model, 3).unwrap();
        assert_eq!(spec.n_params(), 12 * 3 + 1);
        assert!(AnsatzSpec::from_model(&model, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn tangents_match_finite_differences(angles in proptest::collection::vec(-1.5f64..1.5, 24)) {
            let model = sb_model();
            let spec = AnsatzSpec::from_model(&model, 2).unwrap();
            prop_assert!(tangent_fd_error(&spec, &angles, 1e-5) < 1e-8);
        }

        #[test]
        fn norm_derivative_vanishes(angles in proptest::collection::vec(-1.5f64..1.5, 24)) {
            let model = sb_model();
            let spec = AnsatzSpec::from_model(&model, 2).unwrap();
            let st = AnsatzState::new(&spec, 1.3, angles).unwrap();
            prop_assert!((st.phi().norm() - 1.0).abs() < 1e-10);
            for t in tangent_states(&spec, &st) {
                prop_assert!(t.inner(st.phi()).re.abs() < 1e-12);
            }
        }

        #[test]
        fn m_symmetric_psd(angles in proptest::collection::vec(-1.5f64..1.5, 24), zr in -2.0f64..2.0, zi in -2.0f64..2.0) {
            let model = sb_model();
            let spec = AnsatzSpec::from_model(&model, 2).unwrap();
            let st = AnsatzState::new(&spec, 0.8, angles).unwrap();
            let sys = assemble_mclachlan(&spec, &st, &model.eval_h_eff(c(zr, zi))).unwrap();
            prop_assert!((&sys.m - sys.m.transpose()).abs().max() <= 1e-12);
            prop_assert!(sys.m.clone().symmetric_eigenvalues().min() >= -1e-10);
            prop_assert_eq!(sys.m[(0, 0)], 1.0);
            for j in 1..sys.m.ncols() {
                prop_assert_eq!(sys.m[(0, j)], 0.0);
            }
        }
    }

    #[test]
    fn hermitian_expectation_gives_zero_norm_rate() {
        let model = sb_model();
        let spec = AnsatzSpec::from_model(&model, 1).unwrap();
        let st = AnsatzState::new(&spec, 1.0, (0..12).map(|k| 0.1 * k as f64).collect()).unwrap();
        let h = model.system.hamiltonian.embed(model.n_qubits, 0).unwrap();
        let sys = assemble_mclachlan(&spec, &st, &h).unwrap();
        assert!(sys.v[0].abs() < 1e-14);
    }

    #[test]
    fn gram_matches_dense_oracle() {
        let model = sb_model();
        let spec = AnsatzSpec::from_model(&model, 1).unwrap();
        let st = AnsatzState::initial(&spec);
        let sys = assemble_mclachlan(&spec, &st, &model.eval_h_eff(c(0.0, 0.0))).unwrap();
        // at θ = 0 every tangent is −iP|Φ₀⟩
        let psi0 = nalgebra::DVector::from_column_slice(model.initial_state().amplitudes());
        let cols: Vec<_> = spec.generators.iter().map(|w| {
            let p = to_dense(&OperatorSum::from_terms(w.n_qubits(), [crate::PauliTerm::new(c(1.0, 0.0), *w)]).unwrap()).unwrap();
            (p * &psi0) * c(0.0, -1.0)
        }).collect();
        for i in 0..cols.len() {
            for j in 0..cols.len() {
                let g = cols[i].dotc(&cols[j]).re;
                assert!((sys.m[(i + 1, j + 1)] - g).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_system_solution() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let sys = McLachlanSystem { m: DMatrix::identity(3, 3), v: v.clone() };
        let s = solve_step(&sys, 0.1).unwrap();
        assert!((s.theta_dot - v / 1.1).norm() < 1e-14);
        assert!(!s.pseudo_inverse);
    }

    #[test]
    fn singular_system_minimum_norm() {
        // duplicated generator: rows/cols 1 and 2 identical
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 2.0, 2.0]);
        let v = DVector::from_vec(vec![0.3, 1.0, 1.0]);
        let sys = McLachlanSystem { m: m.clone(), v: v.clone() };
        let s = solve_step(&sys, 0.0).unwrap();
        assert!(s.pseudo_inverse);
        // minimizers: x0 = 0.3, x1 + x2 = 0.5; minimum norm splits evenly
        assert!((s.theta_dot[0] - 0.3).abs() < 1e-12);
        assert!((s.theta_dot[1] - 0.25).abs() < 1e-12 && (s.theta_dot[2] - 0.25).abs() < 1e-12);
        assert!(s.residual <= v.norm());
        assert!(s.residual < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let sys = McLachlanSystem { m: DMatrix::identity(2, 2), v: DVector::from_vec(vec![f64::NAN, 0.0]) };
        assert!(matches!(solve_step(&sys, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unitary_limit_tracks_exact() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &ModeExpansion::single(c(0.0, 0.0), c(0.3, 0.0)).unwrap(), 1).unwrap();
        let spec = AnsatzSpec::from_model(&model, 3).unwrap();
        let (dt, steps) = (0.005, 400);
        let noise = NoiseTrajectory::zero(dt, steps);
        let (vqs, _) = evolve_vqs(&model, &spec, &noise, dt, steps, VqsOptions::default()).unwrap();
        let exact = propagate_exact(&model, &noise, &model.initial_state(), dt, steps).unwrap();
        for (a, b) in vqs.iter().zip(&exact) {
            assert!((a.alpha - 1.0).abs() < 1e-8);
            assert!(a.state.inner(b).norm() > 1.0 - 1e-6);
        }
    }

    #[test]
    fn invariants_along_short_run() {
        let model = sb_model();
        let spec = AnsatzSpec::from_model(&model, 3).unwrap();
        let bath = crate::BathSpec::debye(0.5, 0.25, 2.0).unwrap();
        let noise = crate::noise::generate_spectral(&bath, 0.002, 50, 1).unwrap();
        let opts = VqsOptions { check_invariants: true, ..Default::default() };
        let (_, diags) = evolve_vqs(&model, &spec, &noise, 0.002, 50, opts).unwrap();
        for d in diags {
            assert!(d.symmetry_error.unwrap() <= 1e-12);
            assert!(d.min_eigenvalue.unwrap() >= -1e-10);
            assert!(d.tangent_fd_error.unwrap() <= 1e-8);
            assert!(d.norm_row_error.unwrap() <= 1e-10);
        }
    }
}
