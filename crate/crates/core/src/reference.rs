//! Exact propagators: the pseudo-Fock Schrödinger equation on the joint
//! register, the HOPS hierarchy on system-space vectors, and the Lindblad
//! master equation.
//!
//! All three use classical RK4 with the noise frozen at the left end of each
//! step. The noise is held constant over its own grid, so a propagator may
//! run at a finer step than the noise without changing the driven ODE.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::bath::ModeExpansion;
use crate::error::{Error, Result};
use crate::model::{EffectiveModel, SystemSpec};
use crate::noise::NoiseTrajectory;
use crate::pauli::{to_dense, CompiledOperator, Statevector};
use crate::rk4::Rk4;

/// Norm above which a trajectory is declared unstable.
pub const INSTABILITY_NORM: f64 = 1e6;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Noise value at step `step` of a propagator running at `dt`.
fn held_noise(noise: &NoiseTrajectory, dt: f64, step: usize) -> Complex64 {
    let idx = ((step as f64 * dt) / noise.dt + 1e-9).floor() as usize;
    noise.at(idx)
}

fn check_noise(noise: &NoiseTrajectory, dt: f64, steps: usize) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let needed = (((steps.saturating_sub(1)) as f64 * dt) / noise.dt + 1e-9).floor() as usize;
    if steps > 0 && needed > noise.steps() {
        return Err(Error::InvalidParameter(format!(
            "noise covers {} steps of {} but the run needs t = {}",
            noise.steps(),
            noise.dt,
            steps as f64 * dt
        )));
    }
    Ok(())
}

fn check_norm(step: usize, state: &[Complex64]) -> Result<()> {
    let n2: f64 = state.iter().map(|a| a.norm_sqr()).sum();
    if !n2.is_finite() {
        return Err(Error::Unstable { step, norm: f64::INFINITY });
    }
    if n2 > INSTABILITY_NORM * INSTABILITY_NORM {
        return Err(Error::Unstable { step, norm: n2.sqrt() });
    }
    Ok(())
}

/// Compiled H_eff for repeated right-hand-side evaluations.
#[derive(Debug, Clone)]
pub struct ExactPropagator {
    n_qubits: usize,
    h_static: CompiledOperator,
    g_noise: CompiledOperator,
}

impl ExactPropagator {
    pub fn new(model: &EffectiveModel) -> Self {
        Self { n_qubits: model.n_qubits, h_static: model.h_static.compile(), g_noise: model.g_noise.compile() }
    }

    /// dψ/dt = −i H_eff(z*) ψ.
    pub fn rhs(&self, z_conj: Complex64, psi: &[Complex64], out: &mut [Complex64]) {
        out.fill(Complex64::default());
        self.h_static.apply_add(-I, psi, out);
        self.g_noise.apply_add(-I * z_conj, psi, out);
    }

    /// Propagate `steps` steps of `dt`, calling `observe(step, state)` at
    /// step 0, every `stride` steps and at the final step.
    pub fn run<F>(&self, noise: &NoiseTrajectory, psi0: &Statevector, dt: f64, steps: usize, stride: usize, mut observe: F) -> Result<()>
    where
        F: FnMut(usize, &[Complex64]),
    {
        if psi0.n_qubits() != self.n_qubits {
            return Err(Error::QubitMismatch { expected: self.n_qubits, found: psi0.n_qubits() });
        }
        check_noise(noise, dt, steps)?;
        let stride = stride.max(1);
        let mut psi = psi0.amplitudes().to_vec();
        let mut rk = Rk4::new(psi.len());
        observe(0, &psi);
        for step in 0..steps {
            let zc = held_noise(noise, dt, step).conj();
            rk.step(&mut psi, dt, |y, out| self.rhs(zc, y, out));
            check_norm(step + 1, &psi)?;
            if (step + 1) % stride == 0 || step + 1 == steps {
                observe(step + 1, &psi);
            }
        }
        Ok(())
    }
}

/// Integrate ∂_t|Ψ⟩ = −iH_eff(Z_t*)|Ψ⟩ and return the states at all N + 1 steps.
pub fn propagate_exact(model: &EffectiveModel, noise: &NoiseTrajectory, psi0: &Statevector, dt: f64, steps: usize) -> Result<Vec<Statevector>> {
    let mut out = Vec::with_capacity(steps + 1);
    ExactPropagator::new(model).run(noise, psi0, dt, steps, 1, |_, s| {
        out.push(Statevector::from_amplitudes(psi0.n_qubits(), s.to_vec()).expect("register size"));
    })?;
    Ok(out)
}

/// How the hierarchy is closed at the truncation level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    /// Vectors beyond n_max are zero.
    #[default]
    Truncate,
    /// ψ^{n+e_k} ≈ L ψ^n / (2√((n_k+1) d_k)) at the top level; needs n_max = 1.
    MarkovianTerminator,
}

/// Auxiliary vectors ψ^n on the hypercube {0..n_max}^K, stored with the
/// first mode index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyState {
    pub n_max: usize,
    pub modes: usize,
    pub sys_dim: usize,
    pub vectors: Vec<Vec<Complex64>>,
}

impl HierarchyState {
    fn flat(&self, levels: &[usize]) -> usize {
        levels.iter().rev().fold(0, |acc, &n| acc * (self.n_max + 1) + n)
    }

    pub fn levels(&self, flat: usize) -> Vec<usize> {
        let mut f = flat;
        (0..self.modes)
            .map(|_| {
                let n = f % (self.n_max + 1);
                f /= self.n_max + 1;
                n
            })
            .collect()
    }

    pub fn get(&self, levels: &[usize]) -> &[Complex64] {
        &self.vectors[self.flat(levels)]
    }

    /// The physical vector ψ⁰.
    pub fn top(&self) -> &[Complex64] {
        &self.vectors[0]
    }

    /// Embed into the joint register of `model`.
    pub fn flatten(&self, model: &EffectiveModel) -> Statevector {
        let mut amps = vec![Complex64::default(); 1 << model.n_qubits];
        for (f, v) in self.vectors.iter().enumerate() {
            let lv = self.levels(f);
            for (s, a) in v.iter().enumerate() {
                amps[model.joint_index(s, &lv)] = *a;
            }
        }
        Statevector::from_amplitudes(model.n_qubits, amps).expect("register size")
    }
}

/// Right-hand side of the rescaled linear hierarchy.
#[derive(Debug, Clone)]
pub struct HierarchySolver {
    n_max: usize,
    modes: usize,
    sys_dim: usize,
    h: CompiledOperator,
    l: CompiledOperator,
    ld: CompiledOperator,
    ldl: CompiledOperator,
    sqrt_d: Vec<Complex64>,
    nu: Vec<Complex64>,
    closure: Closure,
    // cached neighbours: (mode, flat index of n - e_k, flat index of n + e_k) per vector
    neighbours: Vec<Vec<(usize, Option<usize>, Option<usize>, usize)>>,
}

impl HierarchySolver {
    pub fn new(system: &SystemSpec, expansion: &ModeExpansion, n_max: usize, closure: Closure) -> Result<Self> {
        expansion.validate()?;
        if n_max == 0 {
            return Err(Error::InvalidParameter("n_max must be at least 1".into()));
        }
        if closure == Closure::MarkovianTerminator && n_max != 1 {
            return Err(Error::Config(format!("the Markovian terminator requires n_max = 1, got {n_max}")));
        }
        let modes = expansion.len();
        let size = (n_max + 1).pow(modes as u32);
        let probe = HierarchyState { n_max, modes, sys_dim: 0, vectors: Vec::new() };
        let neighbours = (0..size)
            .map(|f| {
                let lv = probe.levels(f);
                (0..modes)
                    .map(|k| {
                        let mut down = lv.clone();
                        let mut up = lv.clone();
                        let lower = (lv[k] > 0).then(|| {
                            down[k] -= 1;
                            probe.flat(&down)
                        });
                        let upper = (lv[k] < n_max).then(|| {
                            up[k] += 1;
                            probe.flat(&up)
                        });
                        (k, lower, upper, lv[k])
                    })
                    .collect()
            })
            .collect();
        let l = &system.coupling;
        Ok(Self {
            n_max,
            modes,
            sys_dim: system.dim(),
            h: system.hamiltonian.compile(),
            l: l.compile(),
            ld: l.adjoint().compile(),
            ldl: l.adjoint().mul(l)?.compile(),
            sqrt_d: expansion.modes.iter().map(|m| m.d.sqrt()).collect(),
            nu: expansion.modes.iter().map(|m| m.nu).collect(),
            closure,
            neighbours,
        })
    }

    pub fn hierarchy_size(&self) -> usize {
        self.neighbours.len()
    }

    pub fn initial(&self, psi0: &[Complex64]) -> HierarchyState {
        let mut vectors = vec![vec![Complex64::default(); self.sys_dim]; self.hierarchy_size()];
        vectors[0].copy_from_slice(psi0);
        HierarchyState { n_max: self.n_max, modes: self.modes, sys_dim: self.sys_dim, vectors }
    }

    /// Right-hand side on the concatenated vectors (hierarchy-major).
    pub fn rhs(&self, z_conj: Complex64, psi: &[Complex64], out: &mut [Complex64]) {
        let d = self.sys_dim;
        out.fill(Complex64::default());
        for (f, neigh) in self.neighbours.iter().enumerate() {
            let (src, dst) = (&psi[f * d..(f + 1) * d], f * d);
            let dst = &mut out[dst..dst + d];
            self.h.apply_add(-I, src, dst);
            self.l.apply_add(z_conj, src, dst);
            let damping: Complex64 = neigh.iter().map(|&(k, _, _, n)| self.nu[k] * n as f64).sum();
            for (o, s) in dst.iter_mut().zip(src) {
                *o -= damping * s;
            }
            for &(k, lower, upper, n) in neigh {
                if let Some(j) = lower {
                    self.l.apply_add(self.sqrt_d[k] * (n as f64).sqrt(), &psi[j * d..(j + 1) * d], dst);
                }
                match upper {
                    Some(j) => self.ld.apply_add(-self.sqrt_d[k] * ((n + 1) as f64).sqrt(), &psi[j * d..(j + 1) * d], dst),
                    None if self.closure == Closure::MarkovianTerminator => self.ldl.apply_add((-0.5).into(), src, dst),
                    None => {}
                }
            }
        }
    }

    /// Propagate and hand each observed state to `observe(step, state)`.
    pub fn run<F>(&self, noise: &NoiseTrajectory, psi0_sys: &[Complex64], dt: f64, steps: usize, stride: usize, mut observe: F) -> Result<()>
    where
        F: FnMut(usize, &HierarchyState),
    {
        if psi0_sys.len() != self.sys_dim {
            return Err(Error::BadLength { n_qubits: self.sys_dim.trailing_zeros() as usize, len: psi0_sys.len() });
        }
        check_noise(noise, dt, steps)?;
        let stride = stride.max(1);
        let mut state = self.initial(psi0_sys);
        let mut flat: Vec<Complex64> = state.vectors.concat();
        let mut rk = Rk4::new(flat.len());
        observe(0, &state);
        for step in 0..steps {
            let zc = held_noise(noise, dt, step).conj();
            rk.step(&mut flat, dt, |y, out| self.rhs(zc, y, out));
            check_norm(step + 1, &flat)?;
            if (step + 1) % stride == 0 || step + 1 == steps {
                for (v, chunk) in state.vectors.iter_mut().zip(flat.chunks(self.sys_dim)) {
                    v.copy_from_slice(chunk);
                }
                observe(step + 1, &state);
            }
        }
        Ok(())
    }
}

/// Integrate the hierarchy and return the state at every step.
#[allow(clippy::too_many_arguments)]
pub fn hops_propagate(
    system: &SystemSpec,
    expansion: &ModeExpansion,
    noise: &NoiseTrajectory,
    psi0_sys: &[Complex64],
    n_max: usize,
    dt: f64,
    steps: usize,
    closure: Closure,
) -> Result<Vec<HierarchyState>> {
    let solver = HierarchySolver::new(system, expansion, n_max, closure)?;
    let mut out = Vec::with_capacity(steps + 1);
    solver.run(noise, psi0_sys, dt, steps, 1, |_, s| out.push(s.clone()))?;
    Ok(out)
}

/// Reduced density matrix of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub entries: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn pure(psi: &[Complex64]) -> Self {
        let v = nalgebra::DVector::from_column_slice(psi);
        Self { entries: &v * v.adjoint() }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.entries.trace()
    }

    /// ⟨φ|ρ|φ⟩.
    pub fn expectation_in(&self, phi: &[Complex64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(phi);
        (v.adjoint() * &self.entries * &v)[(0, 0)].re
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.entries - self.entries.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.entries + self.entries.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn purity(&self) -> f64 {
        (&self.entries * &self.entries).trace().re
    }
}

/// ρ̇ = −i[H_S, ρ] + Γ(LρL† − ½{L†L, ρ}), all N + 1 steps.
pub fn lindblad_propagate(system: &SystemSpec, rate: f64, rho0: &DensityMatrix, dt: f64, steps: usize) -> Result<Vec<DensityMatrix>> {
    let mut out = Vec::with_capacity(steps + 1);
    lindblad_run(system, rate, rho0, dt, steps, 1, |_, r| out.push(r.clone()))?;
    Ok(out)
}

pub fn lindblad_run<F>(system: &SystemSpec, rate: f64, rho0: &DensityMatrix, dt: f64, steps: usize, stride: usize, mut observe: F) -> Result<()>
where
    F: FnMut(usize, &DensityMatrix),
{
    if !(rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("Lindblad rate must be non-negative, got {rate}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let h = to_dense(&system.hamiltonian)?;
    let l = to_dense(&system.coupling)?;
    if rho0.dim() != h.nrows() {
        return Err(Error::BadLength { n_qubits: system.n_qubits(), len: rho0.dim() });
    }
    let ld = l.adjoint();
    let ldl = &ld * &l;
    let g = Complex64::new(rate, 0.0);
    let f = |r: &DMatrix<Complex64>| -> DMatrix<Complex64> {
        let comm = (&h * r - r * &h) * (-I);
        let jump = (&l * r * &ld - (&ldl * r + r * &ldl) * Complex64::new(0.5, 0.0)) * g;
        comm + jump
    };
    let stride = stride.max(1);
    let mut rho = rho0.clone();
    observe(0, &rho);
    let c = Complex64::new(dt, 0.0);
    for step in 0..steps {
        let r = &rho.entries;
        let k1 = f(r);
        let k2 = f(&(r + &k1 * (c * 0.5)));
        let k3 = f(&(r + &k2 * (c * 0.5)));
        let k4 = f(&(r + &k3 * c));
        rho.entries = r + (k1 + (k2 + k3) * Complex64::new(2.0, 0.0) + k4) * (c / 6.0);
        let n = rho.entries.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !n.is_finite() || n > INSTABILITY_NORM {
            return Err(Error::Unstable { step: step + 1, norm: n });
        }
        if (step + 1) % stride == 0 || step + 1 == steps {
            observe(step + 1, &rho);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::Mode;
    use crate::model::build_effective_model;
    use crate::noise::{generate_ou, SpectralGenerator};
    use crate::pauli::OperatorSum;
    use crate::BathSpec;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sb_mode() -> ModeExpansion {
        ModeExpansion::single(c(1.06085253, -0.0328022), c(0.30333961, 0.00212558)).unwrap()
    }

    #[test]
    fn unitary_limit_conserves_norm() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &ModeExpansion::single(c(0.0, 0.0), c(0.5, 0.0)).unwrap(), 2).unwrap();
        let traj = propagate_exact(&model, &NoiseTrajectory::zero(0.002, 2500), &model.initial_state(), 0.002, 2500).unwrap();
        for s in &traj {
            assert!((s.norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pure_decay_of_level_one() {
        let zero1 = OperatorSum::zero(1);
        let sys = SystemSpec::custom(zero1.clone(), zero1, Statevector::basis(1, 0).unwrap()).unwrap();
        let nu = c(0.7, 0.3);
        let model = build_effective_model(&sys, &ModeExpansion::single(c(1.0, 0.0), nu).unwrap(), 2).unwrap();
        let psi0 = Statevector::basis(model.n_qubits, model.joint_index(0, &[1])).unwrap();
        let dt = 0.002;
        let traj = propagate_exact(&model, &NoiseTrajectory::zero(dt, 1000), &psi0, dt, 1000).unwrap();
        for (n, s) in traj.iter().enumerate().step_by(100) {
            let expect = (-nu * (n as f64 * dt)).exp();
            assert!((s.amplitudes()[model.joint_index(0, &[1])] - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn hierarchy_matches_pseudo_fock() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &sb_mode(), 2).unwrap();
        let bath = BathSpec::debye(0.5, 0.25, 2.0).unwrap();
        let noise = SpectralGenerator::new(&bath, 0.002, 500).unwrap().generate(3);
        let exact = propagate_exact(&model, &noise, &model.initial_state(), 0.002, 500).unwrap();
        let hops = hops_propagate(&sb, &sb_mode(), &noise, sb.initial.amplitudes(), 2, 0.002, 500, Closure::Truncate).unwrap();
        for (a, b) in exact.iter().zip(&hops) {
            assert!(a.max_abs_diff(&b.flatten(&model)) < 1e-8);
        }
    }

    #[test]
    fn hierarchy_matches_pseudo_fock_two_modes() {
        let tf = SystemSpec::tfim2(2.0, 1.0 / 0.42).unwrap();
        let e = ModeExpansion::new(vec![Mode { d: c(2.5, 0.0), nu: c(5.0, 0.0) }, Mode { d: c(0.3, 0.1), nu: c(1.0, -2.0) }]).unwrap();
        let model = build_effective_model(&tf, &e, 2).unwrap();
        let noise = generate_ou(&BathSpec::ornstein_uhlenbeck(1.0, 5.0).unwrap(), 0.002, 300, 11).unwrap();
        let exact = propagate_exact(&model, &noise, &model.initial_state(), 0.002, 300).unwrap();
        let hops = hops_propagate(&tf, &e, &noise, tf.initial.amplitudes(), 2, 0.002, 300, Closure::Truncate).unwrap();
        for (a, b) in exact.iter().zip(&hops) {
            assert!(a.max_abs_diff(&b.flatten(&model)) < 1e-8);
        }
    }

    #[test]
    fn decoupled_hierarchy_stays_on_top() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let e = ModeExpansion::single(c(0.0, 0.0), c(0.3, 0.0)).unwrap();
        let hops = hops_propagate(&sb, &e, &NoiseTrajectory::zero(0.01, 100), sb.initial.amplitudes(), 2, 0.01, 100, Closure::Truncate).unwrap();
        let last = hops.last().unwrap();
        for f in 1..3 {
            assert!(last.vectors[f].iter().all(|z| *z == Complex64::default()));
        }
        let hs = to_dense(&sb.hamiltonian).unwrap();
        let u = (hs * c(0.0, -1.0)).exp();
        assert!((u[(0, 0)] - last.top()[0]).norm() < 1e-7 && (u[(1, 0)] - last.top()[1]).norm() < 1e-7);
    }

    #[test]
    fn single_step_is_fifth_order() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &sb_mode(), 2).unwrap();
        let z = c(0.4, -0.8);
        let gen = to_dense(&model.eval_h_eff(z.conj())).unwrap() * c(0.0, -1.0);
        let noise = NoiseTrajectory { dt: 1.0, samples: vec![z; 2], seed: 0, source: crate::NoiseSource::Zero };
        let psi0 = model.initial_state();
        let err = |dt: f64| {
            let s = &propagate_exact(&model, &noise, &psi0, dt, 1).unwrap()[1];
            let v = nalgebra::DVector::from_column_slice(psi0.amplitudes());
            let exact = (&gen * c(dt, 0.0)).exp() * v;
            s.amplitudes().iter().zip(exact.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
        };
        let ratio = err(0.04) / err(0.02);
        assert!((26.0..38.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn terminator_requires_single_level() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        assert!(matches!(HierarchySolver::new(&sb, &sb_mode(), 2, Closure::MarkovianTerminator), Err(Error::Config(_))));
    }

    #[test]
    fn terminator_adds_closure_term() {
        let tf = SystemSpec::tfim2(2.0, 1.0 / 0.42).unwrap();
        let e = ModeExpansion::single(c(25.0, 0.0), c(50.0, 0.0)).unwrap();
        let plain = HierarchySolver::new(&tf, &e, 1, Closure::Truncate).unwrap();
        let term = HierarchySolver::new(&tf, &e, 1, Closure::MarkovianTerminator).unwrap();
        let psi: Vec<Complex64> = (0..8).map(|k| c(0.1 * k as f64, 0.3 - 0.05 * k as f64)).collect();
        let mut a = vec![Complex64::default(); 8];
        let mut b = a.clone();
        plain.rhs(Complex64::default(), &psi, &mut a);
        term.rhs(Complex64::default(), &psi, &mut b);
        let ldl = to_dense(&tf.coupling.adjoint().mul(&tf.coupling).unwrap()).unwrap();
        let top_level = nalgebra::DVector::from_column_slice(&psi[4..8]);
        let closure = &ldl * top_level * c(-0.5, 0.0);
        for k in 0..4 {
            assert!((b[k] - a[k]).norm() < 1e-15);
            assert!((b[4 + k] - a[4 + k] - closure[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn terminator_vanishes_without_coupling() {
        let zero = OperatorSum::zero(2);
        let tf = SystemSpec::tfim2(2.0, 1.0).unwrap();
        let closed = SystemSpec::custom(tf.hamiltonian.clone(), zero, tf.initial.clone()).unwrap();
        let e = ModeExpansion::single(c(25.0, 0.0), c(50.0, 0.0)).unwrap();
        let noise = NoiseTrajectory::zero(0.01, 50);
        let a = hops_propagate(&closed, &e, &noise, closed.initial.amplitudes(), 1, 0.01, 50, Closure::Truncate).unwrap();
        let b = hops_propagate(&closed, &e, &noise, closed.initial.amplitudes(), 1, 0.01, 50, Closure::MarkovianTerminator).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instability_reported() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &sb_mode(), 2).unwrap();
        let noise = NoiseTrajectory { dt: 0.01, samples: vec![c(40.0, 0.0); 2001], seed: 0, source: crate::NoiseSource::Zero };
        let r = propagate_exact(&model, &noise, &model.initial_state(), 0.01, 2000);
        assert!(matches!(r, Err(Error::Unstable { .. })));
    }

    #[test]
    fn short_noise_rejected() {
        let sb = SystemSpec::spin_boson(1.0, 1.0).unwrap();
        let model = build_effective_model(&sb, &sb_mode(), 2).unwrap();
        assert!(propagate_exact(&model, &NoiseTrajectory::zero(0.01, 10), &model.initial_state(), 0.01, 20).is_err());
    }

    #[test]
    fn lindblad_amplitude_damping() {
        // spin down = |1⟩ decays to |0⟩ under L = |0⟩⟨1|
        let zero = OperatorSum::zero(1);
        let lower = OperatorSum::from_pairs(&[(c(0.5, 0.0), "X"), (c(0.0, 0.5), "Y")]).unwrap();
        let sys = SystemSpec::custom(zero, lower, Statevector::basis(1, 1).unwrap()).unwrap();
        let rho0 = DensityMatrix::pure(sys.initial.amplitudes());
        let g = 0.8;
        let traj = lindblad_propagate(&sys, g, &rho0, 0.001, 3000).unwrap();
        for (n, r) in traj.iter().enumerate().step_by(250) {
            assert!((r.entries[(1, 1)].re - (-g * n as f64 * 0.001).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn lindblad_trace_hermiticity_positivity() {
        let tf = SystemSpec::tfim2(2.0, 1.0 / 0.42).unwrap();
        let rho0 = DensityMatrix::pure(tf.initial.amplitudes());
        let traj = lindblad_propagate(&tf, 1.0, &rho0, 0.002, 2000).unwrap();
        for r in &traj {
            assert!((r.trace() - c(1.0, 0.0)).norm() < 1e-10);
            assert!(r.hermiticity_error() < 1e-12);
            assert!(r.min_eigenvalue() > -1e-10);
        }
    }

    #[test]
    fn von_neumann_limit_keeps_purity() {
        let tf = SystemSpec::tfim2(2.0, 1.0 / 0.42).unwrap();
        let rho0 = DensityMatrix::pure(tf.initial.amplitudes());
        let traj = lindblad_propagate(&tf, 0.0, &rho0, 0.001, 4000).unwrap();
        let worst = traj.iter().map(|r| (r.purity() - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }
}
