//! Pauli-string algebra and a dense statevector engine.
//!
//! Every operator in the crate is an [`OperatorSum`] of complex-weighted
//! Pauli words and every state is a [`Statevector`].
//!
//! Conventions, fixed crate-wide:
//!
//! * Qubit 0 is the least significant bit of an amplitude index.
//! * Word strings are written with the highest qubit first, so `"XI"` on two
//!   qubits is `X ⊗ I` and acts as X on qubit 1.
//! * A word is stored as an X mask and a Z mask. The letter on a qubit with
//!   both bits set is Y, and the word's operator is `i^{|x & z|} X^x Z^z`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest register the bitmask representation supports.
pub const MAX_QUBITS: usize = 64;

/// Default cap on the register size accepted by [`to_dense`].
pub const DEFAULT_DENSE_CAP: usize = 14;

/// Coefficients with magnitude below this are dropped on canonicalization.
pub const DEFAULT_DROP_TOL: f64 = 1e-14;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// `i^k` for `k` taken mod 4.
#[inline]
fn i_pow(k: u32) -> Complex64 {
    match k & 3 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// A Pauli word over `n_qubits` qubits without a coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliWord {
    n_qubits: usize,
    x: u64,
    z: u64,
}

impl PauliWord {
    pub fn identity(n_qubits: usize) -> Self {
        assert!(n_qubits <= MAX_QUBITS, "at most {MAX_QUBITS} qubits");
        Self { n_qubits, x: 0, z: 0 }
    }

    pub fn from_masks(n_qubits: usize, x: u64, z: u64) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::InvalidParameter(format!(
                "qubit count {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let mask = if n_qubits == 64 { u64::MAX } else { (1u64 << n_qubits) - 1 };
        if (x | z) & !mask != 0 {
            return Err(Error::BadWord(format!("masks x={x:#b} z={z:#b} exceed {n_qubits} qubits")));
        }
        Ok(Self { n_qubits, x, z })
    }

    /// Parse a word such as `"XZI"`; the first letter is the highest qubit.
    pub fn parse(s: &str) -> Result<Self> {
        let n = s.chars().count();
        if n == 0 || n > MAX_QUBITS {
            return Err(Error::BadWord(s.to_string()));
        }
        let (mut x, mut z) = (0u64, 0u64);
        for (pos, c) in s.chars().enumerate() {
            let q = n - 1 - pos;
            match c.to_ascii_uppercase() {
                'I' => {}
                'X' => x |= 1 << q,
                'Y' => {
                    x |= 1 << q;
                    z |= 1 << q;
                }
                'Z' => z |= 1 << q,
                _ => return Err(Error::BadWord(s.to_string())),
            }
        }
        Ok(Self { n_qubits: n, x, z })
    }

    /// Single-qubit letter `letter` on `qubit`, identity elsewhere.
    pub fn single(n_qubits: usize, qubit: usize, letter: char) -> Result<Self> {
        if qubit >= n_qubits {
            return Err(Error::InvalidParameter(format!("qubit {qubit} out of range for {n_qubits}")));
        }
        let bit = 1u64 << qubit;
        let (x, z) = match letter.to_ascii_uppercase() {
            'I' => (0, 0),
            'X' => (bit, 0),
            'Y' => (bit, bit),
            'Z' => (0, bit),
            _ => return Err(Error::BadWord(letter.to_string())),
        };
        Self::from_masks(n_qubits, x, z)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn x_mask(&self) -> u64 {
        self.x
    }

    pub fn z_mask(&self) -> u64 {
        self.z
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0 && self.z == 0
    }

    /// Letter acting on `qubit`.
    pub fn letter(&self, qubit: usize) -> char {
        let xb = (self.x >> qubit) & 1;
        let zb = (self.z >> qubit) & 1;
        match (xb, zb) {
            (0, 0) => 'I',
            (1, 0) => 'X',
            (1, 1) => 'Y',
            _ => 'Z',
        }
    }

    /// Number of Y letters, which fixes the `i^{|x&z|}` prefactor.
    #[inline]
    fn y_count(&self) -> u32 {
        (self.x & self.z).count_ones()
    }

    /// Whether two words commute.
    pub fn commutes_with(&self, other: &PauliWord) -> bool {
        ((self.x & other.z).count_ones() + (self.z & other.x).count_ones()) % 2 == 0
    }

    /// `self · other = phase · word`.
    fn product(&self, other: &PauliWord) -> (Complex64, PauliWord) {
        let x = self.x ^ other.x;
        let z = self.z ^ other.z;
        let k = self.y_count() + other.y_count() + 2 * (self.z & other.x).count_ones()
            + 4
            - (x & z).count_ones() % 4;
        (i_pow(k), PauliWord { n_qubits: self.n_qubits, x, z })
    }

    /// Amplitude map of the word on a basis index: `P|b⟩ = phase · |b ^ x⟩`.
    #[inline]
    pub fn action(&self, basis: usize) -> (usize, Complex64) {
        let sign = (basis as u64 & self.z).count_ones();
        (basis ^ self.x as usize, i_pow(self.y_count() + 2 * sign))
    }
}

impl fmt::Display for PauliWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in (0..self.n_qubits).rev() {
            write!(f, "{}", self.letter(q))?;
        }
        Ok(())
    }
}

/// A complex-weighted Pauli word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PauliTerm {
    pub coefficient: Complex64,
    pub word: PauliWord,
}

impl PauliTerm {
    pub fn new(coefficient: Complex64, word: PauliWord) -> Self {
        Self { coefficient, word }
    }

    pub fn parse(coefficient: Complex64, word: &str) -> Result<Self> {
        Ok(Self::new(coefficient, PauliWord::parse(word)?))
    }
}

/// Operator product of two terms; the phase is folded into the coefficient.
pub fn pauli_multiply(a: &PauliTerm, b: &PauliTerm) -> Result<PauliTerm> {
    if a.word.n_qubits != b.word.n_qubits {
        return Err(Error::QubitMismatch { expected: a.word.n_qubits, found: b.word.n_qubits });
    }
    let (phase, word) = a.word.product(&b.word);
    Ok(PauliTerm::new(a.coefficient * b.coefficient * phase, word))
}

/// A canonical sum of Pauli terms: words are unique, ordered, and no
/// coefficient is smaller than the drop tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSum {
    n_qubits: usize,
    terms: Vec<PauliTerm>,
}

impl OperatorSum {
    pub fn zero(n_qubits: usize) -> Self {
        Self { n_qubits, terms: Vec::new() }
    }

    pub fn identity(n_qubits: usize) -> Self {
        Self::from_terms(n_qubits, [PauliTerm::new(1.0.into(), PauliWord::identity(n_qubits))])
            .expect("identity is well formed")
    }

    /// Build from terms with the default drop tolerance.
    pub fn from_terms(n_qubits: usize, terms: impl IntoIterator<Item = PauliTerm>) -> Result<Self> {
        Self::from_terms_with_tol(n_qubits, terms, DEFAULT_DROP_TOL)
    }

    pub fn from_terms_with_tol(
        n_qubits: usize,
        terms: impl IntoIterator<Item = PauliTerm>,
        drop_tol: f64,
    ) -> Result<Self> {
        let mut raw = Vec::new();
        for t in terms {
            if t.word.n_qubits != n_qubits {
                return Err(Error::QubitMismatch { expected: n_qubits, found: t.word.n_qubits });
            }
            raw.push(t);
        }
        Ok(Self { n_qubits, terms: raw }.canonicalize(drop_tol))
    }

    /// Parse `(coefficient, word)` pairs; convenient in tests and presets.
    pub fn from_pairs(pairs: &[(Complex64, &str)]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::InvalidParameter("empty operator".into()))?;
        let n = first.1.chars().count();
        let terms = pairs
            .iter()
            .map(|(c, w)| PauliTerm::parse(*c, w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(n, terms)
    }

    /// Merge duplicate words and drop negligible coefficients.
    pub fn canonicalize(self, drop_tol: f64) -> Self {
        let mut merged: BTreeMap<(u64, u64), Complex64> = BTreeMap::new();
        for t in self.terms {
            *merged.entry((t.word.x, t.word.z)).or_default() += t.coefficient;
        }
        let n = self.n_qubits;
        let terms = merged
            .into_iter()
            .filter(|(_, c)| c.norm() >= drop_tol)
            .map(|((x, z), c)| PauliTerm::new(c, PauliWord { n_qubits: n, x, z }))
            .collect();
        Self { n_qubits: n, terms }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> &[PauliTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Coefficient of `word`, zero if absent.
    pub fn coefficient(&self, word: &PauliWord) -> Complex64 {
        self.terms
            .iter()
            .find(|t| t.word == *word)
            .map(|t| t.coefficient)
            .unwrap_or_default()
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let terms = self.terms.iter().map(|t| PauliTerm::new(t.coefficient * c, t.word));
        Self::from_terms(self.n_qubits, terms).expect("same register")
    }

    pub fn add(&self, other: &OperatorSum) -> Result<Self> {
        if self.n_qubits != other.n_qubits {
            return Err(Error::QubitMismatch { expected: self.n_qubits, found: other.n_qubits });
        }
        Self::from_terms(self.n_qubits, self.terms.iter().chain(other.terms.iter()).copied())
    }

    pub fn sub(&self, other: &OperatorSum) -> Result<Self> {
        self.add(&other.scale((-1.0).into()))
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &OperatorSum) -> Result<Self> {
        if self.n_qubits != other.n_qubits {
            return Err(Error::QubitMismatch { expected: self.n_qubits, found: other.n_qubits });
        }
        let mut out = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                out.push(pauli_multiply(a, b)?);
            }
        }
        Self::from_terms(self.n_qubits, out)
    }

    /// Hermitian conjugate. Pauli words are Hermitian, so only coefficients change.
    pub fn adjoint(&self) -> Self {
        Self {
            n_qubits: self.n_qubits,
            terms: self.terms.iter().map(|t| PauliTerm::new(t.coefficient.conj(), t.word)).collect(),
        }
    }

    /// Embed into a larger register; qubit `q` maps to `q + offset`.
    pub fn embed(&self, n_qubits: usize, offset: usize) -> Result<Self> {
        if self.n_qubits + offset > n_qubits {
            return Err(Error::QubitMismatch { expected: n_qubits, found: self.n_qubits + offset });
        }
        let terms = self
            .terms
            .iter()
            .map(|t| {
                PauliWord::from_masks(n_qubits, t.word.x << offset, t.word.z << offset)
                    .map(|w| PauliTerm::new(t.coefficient, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_terms(n_qubits, terms)
    }

    /// Sparse form for repeated application.
    pub fn compile(&self) -> CompiledOperator {
        CompiledOperator::new(self)
    }
}

/// A state on `n_qubits` qubits. The norm is not required to be one.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl Statevector {
    pub fn zero(n_qubits: usize) -> Self {
        Self { n_qubits, amplitudes: vec![Complex64::default(); 1 << n_qubits] }
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        let mut s = Self::zero(n_qubits);
        if index >= s.amplitudes.len() {
            return Err(Error::InvalidParameter(format!("basis index {index} out of range")));
        }
        s.amplitudes[index] = 1.0.into();
        Ok(s)
    }

    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != 1usize << n_qubits {
            return Err(Error::BadLength { n_qubits, len: amplitudes.len() });
        }
        Ok(Self { n_qubits, amplitudes })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &Statevector) -> Complex64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self { n_qubits: self.n_qubits, amplitudes: self.amplitudes.iter().map(|a| a * c).collect() }
    }

    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scaled((1.0 / n).into()))
    }

    /// Largest amplitude-wise deviation from `other`.
    pub fn max_abs_diff(&self, other: &Statevector) -> f64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

fn check_qubits(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::QubitMismatch { expected, found });
    }
    Ok(())
}

/// `Σ_terms c · P |s⟩`.
pub fn apply_operator(op: &OperatorSum, s: &Statevector) -> Result<Statevector> {
    check_qubits(op.n_qubits, s.n_qubits)?;
    let mut out = Statevector::zero(s.n_qubits);
    for t in &op.terms {
        for (b, amp) in s.amplitudes.iter().enumerate() {
            let (target, phase) = t.word.action(b);
            out.amplitudes[target] += t.coefficient * phase * amp;
        }
    }
    Ok(out)
}

/// `P |s⟩` for a bare word.
pub fn apply_word(word: &PauliWord, s: &Statevector) -> Result<Statevector> {
    check_qubits(word.n_qubits, s.n_qubits)?;
    let mut out = Statevector::zero(s.n_qubits);
    apply_word_into(word, &s.amplitudes, &mut out.amplitudes);
    Ok(out)
}

#[inline]
fn apply_word_into(word: &PauliWord, src: &[Complex64], dst: &mut [Complex64]) {
    for (b, amp) in src.iter().enumerate() {
        let (target, phase) = word.action(b);
        dst[target] = phase * amp;
    }
}

/// `exp(-i·angle·P)|s⟩ = cos(angle)|s⟩ - i sin(angle) P|s⟩`.
pub fn apply_pauli_rotation(word: &PauliWord, angle: f64, s: &Statevector) -> Result<Statevector> {
    check_qubits(word.n_qubits, s.n_qubits)?;
    let mut out = s.clone();
    rotate(word, angle, &mut out.amplitudes);
    Ok(out)
}

/// In-place `exp(-i·angle·P)` on raw amplitudes.
pub(crate) fn rotate(word: &PauliWord, angle: f64, amps: &mut [Complex64]) {
    let (s, c) = angle.sin_cos();
    if word.x == 0 {
        let plus = Complex64::new(c, -s);
        if word.z == 0 {
            amps.iter_mut().for_each(|a| *a *= plus);
            return;
        }
        let minus = Complex64::new(c, s);
        for (b, a) in amps.iter_mut().enumerate() {
            *a *= if (b as u64 & word.z).count_ones() % 2 == 0 { plus } else { minus };
        }
        return;
    }
    let x = word.x as usize;
    let pivot = 1usize << (63 - word.x.leading_zeros());
    let base = i_pow(word.y_count());
    let minus_is = Complex64::new(0.0, -s);
    let phase = |b: usize| if (b as u64 & word.z).count_ones() % 2 == 1 { -base } else { base };
    for b in 0..amps.len() {
        if b & pivot != 0 {
            continue;
        }
        let p = b ^ x;
        // P|b⟩ = ph_b |p⟩ and P|p⟩ = ph_p |b⟩
        let (ph_b, ph_p) = (phase(b), phase(p));
        let (ab, ap) = (amps[b], amps[p]);
        amps[b] = c * ab + minus_is * ph_p * ap;
        amps[p] = c * ap + minus_is * ph_b * ab;
    }
}

/// Dense `2^n × 2^n` matrix of an operator, refusing registers above `cap` qubits.
pub fn to_dense_with_cap(op: &OperatorSum, cap: usize) -> Result<DMatrix<Complex64>> {
    if op.n_qubits > cap {
        return Err(Error::DenseCapExceeded { n_qubits: op.n_qubits, cap });
    }
    let dim = 1usize << op.n_qubits;
    let mut m = DMatrix::zeros(dim, dim);
    for t in &op.terms {
        for col in 0..dim {
            let (row, phase) = t.word.action(col);
            m[(row, col)] += t.coefficient * phase;
        }
    }
    Ok(m)
}

pub fn to_dense(op: &OperatorSum) -> Result<DMatrix<Complex64>> {
    to_dense_with_cap(op, DEFAULT_DENSE_CAP)
}

/// An operator regrouped by X mask: `O|b⟩ = Σ_x D_x[b] |b ^ x⟩`.
///
/// Application costs one multiply-add per (distinct X mask, amplitude).
#[derive(Debug, Clone)]
pub struct CompiledOperator {
    n_qubits: usize,
    blocks: Vec<(usize, Vec<Complex64>)>,
}

impl CompiledOperator {
    pub fn new(op: &OperatorSum) -> Self {
        let dim = 1usize << op.n_qubits;
        let mut by_x: BTreeMap<u64, Vec<Complex64>> = BTreeMap::new();
        for t in &op.terms {
            let diag = by_x.entry(t.word.x).or_insert_with(|| vec![Complex64::default(); dim]);
            for (b, d) in diag.iter_mut().enumerate() {
                let (_, phase) = t.word.action(b);
                *d += t.coefficient * phase;
            }
        }
        let blocks = by_x.into_iter().map(|(x, d)| (x as usize, d)).collect();
        Self { n_qubits: op.n_qubits, blocks }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// `dst += scale · O·src`.
    #[inline]
    pub fn apply_add(&self, scale: Complex64, src: &[Complex64], dst: &mut [Complex64]) {
        for (x, diag) in &self.blocks {
            for (b, (amp, d)) in src.iter().zip(diag).enumerate() {
                dst[b ^ x] += scale * d * amp;
            }
        }
    }

    pub fn apply(&self, s: &Statevector) -> Result<Statevector> {
        check_qubits(self.n_qubits, s.n_qubits)?;
        let mut out = Statevector::zero(s.n_qubits);
        self.apply_add(1.0.into(), &s.amplitudes, &mut out.amplitudes);
        Ok(out)
    }
}

/// `i` as a constant, used when assembling anti-Hermitian pieces.
pub const IMAG: Complex64 = I;
