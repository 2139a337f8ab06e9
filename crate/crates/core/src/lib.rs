//! Stochastic pure-state simulation of non-Markovian open quantum dynamics.
//!
//! The reduced density matrix of a system coupled to a bosonic bath is
//! unravelled into trajectories of a linear non-Markovian stochastic
//! Schrödinger equation whose bath memory is carried by a few damped
//! pseudo-Fock modes. Each trajectory is propagated either exactly or by an
//! emulated variational quantum simulation, and ensembles are averaged into
//! populations, density matrices and Loschmidt rate functions.
//!
//! Layout:
//!
//! * [`pauli`]: Pauli algebra and the statevector engine.
//! * [`bath`]: spectral densities, correlation functions and mode fits.
//! * [`noise`]: coloured complex Gaussian noise.
//! * [`model`]: boson encodings and the effective stochastic Hamiltonian.
//! * [`reference`]: exact propagators, the hierarchy solver and Lindblad.
//! * [`vqs`]: the variational engine.
//! * [`ensemble`]: trajectory orchestration and observables.

pub mod bath;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod pauli;
pub mod noise;
pub mod quadrature;
pub mod reference;
pub mod rk4;
pub mod vqs;

pub use bath::{BathKind, BathSpec, Mode, ModeExpansion};
pub use error::{Error, Result};
pub use model::{BosonEncoding, EffectiveModel, Preset, PresetOverrides, SystemKind, SystemSpec};
pub use noise::{NoiseSource, NoiseTrajectory};
pub use num_complex::Complex64;
pub use pauli::{OperatorSum, PauliTerm, PauliWord, Statevector};
