//! System presets, the one-hot boson encoding and the effective stochastic
//! Hamiltonian on the joint system ⊗ pseudo-Fock register.
//!
//! ```text
//! H_eff(t) = H_S + i L Z_t* − i Σ_k ν_k b_k†b_k − i Σ_k √d_k (L† b_k − L b_k†)
//! ```
//!
//! Register layout: system qubits occupy the low bits, followed by one
//! register of n_max + 1 qubits per mode. Level n of a mode is the basis
//! state with only qubit n of its register set.
//!
//! Spin conventions: spin up is the qubit state |0⟩ (σ_z = +1). The TFIM
//! coupling L = Σ_i σ_i⁺ uses σ⁺ = (σ_x + iσ_y)/2 = |↑⟩⟨↓| = |0⟩⟨1|. Inside
//! mode registers the ladder uses the occupation convention
//! set = |1⟩⟨0| = (X − iY)/2 and clear = |0⟩⟨1| = (X + iY)/2.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bath::{BathSpec, ModeExpansion};
use crate::error::{Error, Result};
use crate::pauli::{OperatorSum, PauliTerm, PauliWord, Statevector, DEFAULT_DROP_TOL};

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    /// H_S = εσ_z + Δσ_x, L = σ_z, initial state spin up.
    SpinBoson { epsilon: f64, delta: f64 },
    /// H_S = −Jσ₁ˣσ₂ˣ − B(σ₁ᶻ + σ₂ᶻ), L = σ₁⁺ + σ₂⁺, initial state |ψ₀⟩.
    Tfim2 { j: f64, b: f64 },
    /// Hand-assembled system.
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub hamiltonian: OperatorSum,
    pub coupling: OperatorSum,
    pub initial: Statevector,
}

/// (X − iY)/2 on `qubit`.
fn set_op(n: usize, qubit: usize) -> Result<OperatorSum> {
    OperatorSum::from_terms(
        n,
        [
            PauliTerm::new(0.5 * ONE, PauliWord::single(n, qubit, 'X')?),
            PauliTerm::new(-0.5 * I, PauliWord::single(n, qubit, 'Y')?),
        ],
    )
}

/// (X + iY)/2 on `qubit`.
fn clear_op(n: usize, qubit: usize) -> Result<OperatorSum> {
    Ok(set_op(n, qubit)?.adjoint())
}

/// Uniform superposition ½(|↑↑⟩ + |↑↓⟩ + |↓↑⟩ + |↓↓⟩).
pub fn tfim_reference_0() -> Statevector {
    Statevector::from_amplitudes(2, vec![Complex64::new(0.5, 0.0); 4]).expect("four amplitudes")
}

/// ½(|↑↑⟩ − |↑↓⟩ − |↓↑⟩ + |↓↓⟩).
pub fn tfim_reference_1() -> Statevector {
    let a = [0.5, -0.5, -0.5, 0.5].map(|v| Complex64::new(v, 0.0));
    Statevector::from_amplitudes(2, a.to_vec()).expect("four amplitudes")
}

impl SystemSpec {
    pub fn spin_boson(epsilon: f64, delta: f64) -> Result<Self> {
        let hamiltonian = OperatorSum::from_pairs(&[(epsilon.into(), "Z"), (delta.into(), "X")])?;
        let coupling = OperatorSum::from_pairs(&[(ONE, "Z")])?;
        Ok(Self {
            kind: SystemKind::SpinBoson { epsilon, delta },
            hamiltonian,
            coupling,
            initial: Statevector::basis(1, 0)?,
        })
    }

    pub fn tfim2(j: f64, b: f64) -> Result<Self> {
        let hamiltonian = OperatorSum::from_pairs(&[((-j).into(), "XX"), ((-b).into(), "ZI"), ((-b).into(), "IZ")])?;
        let coupling = clear_op(2, 0)?.add(&clear_op(2, 1)?)?;
        Ok(Self { kind: SystemKind::Tfim2 { j, b }, hamiltonian, coupling, initial: tfim_reference_0() })
    }

    pub fn custom(hamiltonian: OperatorSum, coupling: OperatorSum, initial: Statevector) -> Result<Self> {
        let n = initial.n_qubits();
        for op in [&hamiltonian, &coupling] {
            if op.n_qubits() != n {
                return Err(Error::QubitMismatch { expected: n, found: op.n_qubits() });
            }
        }
        Ok(Self { kind: SystemKind::Custom, hamiltonian, coupling, initial })
    }

    pub fn n_qubits(&self) -> usize {
        self.initial.n_qubits()
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits()
    }

    /// Reference states of the Loschmidt rate function, if the system has them.
    pub fn references(&self) -> Option<[Statevector; 2]> {
        match self.kind {
            SystemKind::Tfim2 { .. } => Some([tfim_reference_0(), tfim_reference_1()]),
            _ => None,
        }
    }
}

/// Unary encoding of one truncated bosonic mode on n_max + 1 qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct BosonEncoding {
    pub n_max: usize,
    pub qubits_per_mode: usize,
    /// b on the mode register.
    pub lowering: OperatorSum,
    /// b† on the mode register.
    pub raising: OperatorSum,
}

/// b = Σ_{n=1}^{n_max} √n · set_{n−1} clear_n.
pub fn encode_ladder(n_max: usize) -> Result<BosonEncoding> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    let q = n_max + 1;
    let mut lowering = OperatorSum::zero(q);
    for n in 1..=n_max {
        let hop = set_op(q, n - 1)?.mul(&clear_op(q, n)?)?;
        lowering = lowering.add(&hop.scale(Complex64::new((n as f64).sqrt(), 0.0)))?;
    }
    let raising = lowering.adjoint();
    Ok(BosonEncoding { n_max, qubits_per_mode: q, lowering, raising })
}

impl BosonEncoding {
    pub fn number(&self) -> OperatorSum {
        self.raising.mul(&self.lowering).expect("same register")
    }

    /// Basis index of level `n` within the mode register.
    pub fn level_index(&self, n: usize) -> usize {
        1 << n
    }
}

/// The effective model on the joint register, shared read-only by
/// trajectory workers.
#[derive(Debug, Clone)]
pub struct EffectiveModel {
    pub system: SystemSpec,
    pub expansion: ModeExpansion,
    pub encoding: BosonEncoding,
    pub n_qubits: usize,
    /// Everything in H_eff except the noise term.
    pub h_static: OperatorSum,
    /// i L on the joint register; H_eff = H_static + Z*·G_noise.
    pub g_noise: OperatorSum,
    /// Distinct Pauli words of H_static and G_noise in canonical order.
    pub generators: Vec<PauliWord>,
}

pub fn build_effective_model(system: &SystemSpec, expansion: &ModeExpansion, n_max: usize) -> Result<EffectiveModel> {
    expansion.validate()?;
    let encoding = encode_ladder(n_max)?;
    let sq = system.n_qubits();
    let k_modes = expansion.len();
    let n = sq + k_modes * encoding.qubits_per_mode;
    if n > crate::pauli::MAX_QUBITS {
        return Err(Error::InvalidParameter(format!("{n} qubits exceed the register limit")));
    }
    let hs = system.hamiltonian.embed(n, 0)?;
    let l = system.coupling.embed(n, 0)?;
    let ld = l.adjoint();
    let mut h = hs;
    for (k, mode) in expansion.modes.iter().enumerate() {
        let offset = sq + k * encoding.qubits_per_mode;
        let b = encoding.lowering.embed(n, offset)?;
        let bd = encoding.raising.embed(n, offset)?;
        let damping = bd.mul(&b)?.scale(-I * mode.nu);
        let exchange = ld.mul(&b)?.sub(&l.mul(&bd)?)?.scale(-I * mode.d.sqrt());
        h = h.add(&damping)?.add(&exchange)?;
    }
    let g_noise = l.scale(I);
    let generators = h
        .terms()
        .iter()
        .chain(g_noise.terms())
        .map(|t| t.word)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(EffectiveModel { system: system.clone(), expansion: expansion.clone(), encoding, n_qubits: n, h_static: h, g_noise, generators })
}

impl EffectiveModel {
    pub fn modes(&self) -> usize {
        self.expansion.len()
    }

    pub fn mode_offset(&self, k: usize) -> usize {
        self.system.n_qubits() + k * self.encoding.qubits_per_mode
    }

    /// Joint basis index of system basis state `sys` with mode k at level `levels[k]`.
    pub fn joint_index(&self, sys: usize, levels: &[usize]) -> usize {
        levels.iter().enumerate().fold(sys, |acc, (k, &n)| acc | 1 << (self.mode_offset(k) + n))
    }

    /// H_static + z_conj·G_noise.
    pub fn eval_h_eff(&self, z_conj: Complex64) -> OperatorSum {
        self.h_static
            .add(&self.g_noise.scale(z_conj))
            .expect("same register")
            .canonicalize(DEFAULT_DROP_TOL)
    }

    /// The `{c_i, H^(i)}` decomposition of H_static.
    pub fn decomposition(&self) -> &[PauliTerm] {
        self.h_static.terms()
    }

    /// System initial state with every mode at level 0.
    pub fn initial_state(&self) -> Statevector {
        let mut amps = vec![Complex64::default(); 1 << self.n_qubits];
        let vac = vec![0; self.modes()];
        for (s, a) in self.system.initial.amplitudes().iter().enumerate() {
            amps[self.joint_index(s, &vac)] = *a;
        }
        Statevector::from_amplitudes(self.n_qubits, amps).expect("sized to register")
    }

    /// Projection of a joint state onto the system block with modes at `levels`.
    pub fn project(&self, joint: &[Complex64], levels: &[usize]) -> Vec<Complex64> {
        (0..self.system.dim()).map(|s| joint[self.joint_index(s, levels)]).collect()
    }

    /// ψ⁰: the system vector with every mode at level 0.
    pub fn system_component(&self, joint: &[Complex64]) -> Vec<Complex64> {
        self.project(joint, &vec![0; self.modes()])
    }

    /// Squared norm of the amplitude outside the system ⊗ one-hot subspace.
    pub fn leakage(&self, joint: &[Complex64]) -> f64 {
        let sq = self.system.n_qubits();
        let q = self.encoding.qubits_per_mode;
        let mask = (1usize << q) - 1;
        joint
            .iter()
            .enumerate()
            .filter(|(idx, _)| (0..self.modes()).any(|k| ((idx >> (sq + k * q)) & mask).count_ones() != 1))
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }
}

/// Optional replacements for preset parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Debye reorganization strength η.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// OU coupling Γ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    /// Debye cutoff or OU memory rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// Named physical settings addressable from a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// ε = Δ = 1, Debye bath η = 0.5, γ = 0.25, β = 0.5.
    SpinBosonFig2,
    /// J = 2, B = 1/0.42, OU bath Γ = 1 with configurable γ.
    TfimDqpt,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::SpinBosonFig2 => "spin-boson-fig2",
            Self::TfimDqpt => "tfim-dqpt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "spin-boson-fig2" => Some(Self::SpinBosonFig2),
            "tfim-dqpt" => Some(Self::TfimDqpt),
            _ => None,
        }
    }

    pub fn system(self) -> SystemSpec {
        match self {
            Self::SpinBosonFig2 => SystemSpec::spin_boson(1.0, 1.0),
            Self::TfimDqpt => SystemSpec::tfim2(2.0, 1.0 / 0.42),
        }
        .expect("preset parameters are valid")
    }

    /// Bath of the preset; `gamma` overrides the TFIM memory rate (default 50).
    pub fn bath(self, gamma: Option<f64>) -> Result<BathSpec> {
        self.bath_with(&PresetOverrides { gamma, ..Default::default() })
    }

    /// Names of overrides that do not apply to this preset.
    pub fn foreign_overrides(self, o: &PresetOverrides) -> Vec<&'static str> {
        let sb = [("j", o.j), ("b", o.b), ("coupling", o.coupling)];
        let tf = [("epsilon", o.epsilon), ("delta", o.delta), ("eta", o.eta), ("temperature", o.temperature)];
        let list: &[(&'static str, Option<f64>)] = match self {
            Self::SpinBosonFig2 => &sb,
            Self::TfimDqpt => &tf,
        };
        list.iter().filter(|(_, v)| v.is_some()).map(|(k, _)| *k).collect()
    }

    fn check_foreign(self, o: &PresetOverrides) -> Result<()> {
        let foreign = self.foreign_overrides(o);
        if foreign.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("preset {} has no parameter(s) {}", self.name(), foreign.join(", "))))
        }
    }

    pub fn system_with(self, o: &PresetOverrides) -> Result<SystemSpec> {
        self.check_foreign(o)?;
        match self {
            Self::SpinBosonFig2 => SystemSpec::spin_boson(o.epsilon.unwrap_or(1.0), o.delta.unwrap_or(1.0)),
            Self::TfimDqpt => SystemSpec::tfim2(o.j.unwrap_or(2.0), o.b.unwrap_or(1.0 / 0.42)),
        }
    }

    pub fn bath_with(self, o: &PresetOverrides) -> Result<BathSpec> {
        self.check_foreign(o)?;
        match self {
            Self::SpinBosonFig2 => BathSpec::debye(o.eta.unwrap_or(0.5), o.gamma.unwrap_or(0.25), o.temperature.unwrap_or(2.0)),
            Self::TfimDqpt => BathSpec::ornstein_uhlenbeck(o.coupling.unwrap_or(1.0), o.gamma.unwrap_or(50.0)),
        }
    }

    pub fn default_n_max(self) -> usize {
        match self {
            Self::SpinBosonFig2 => 2,
            Self::TfimDqpt => 2,
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            Self::SpinBosonFig2 => 3,
            Self::TfimDqpt => 4,
        }
    }

    pub fn default_window(self) -> f64 {
        match self {
            Self::SpinBosonFig2 => 10.0,
            Self::TfimDqpt => 10.0,
        }
    }

    /// Max-norm fit tolerance relative to |α(0)|. A single exponential cannot
    /// follow the sharp t = 0 peak of the Debye correlation below about 4.9%.
    pub fn fit_tolerance(self) -> f64 {
        match self {
            Self::SpinBosonFig2 => 0.05,
            Self::TfimDqpt => 1e-12,
        }
    }
}
