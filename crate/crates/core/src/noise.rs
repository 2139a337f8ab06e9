//! Coloured complex Gaussian noise with E[Z_t] = 0, E[Z_t Z_s] = 0 and
//! E[Z_t Z_s*] = α(t − s).
//!
//! Samples live on the propagator grid t_n = n·dt and are held constant
//! across each step.

use std::io::{self, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::bath::{BathKind, BathSpec};
use crate::error::{Error, Result};

/// Relative tolerance below zero accepted for a spectral weight.
pub const NEGATIVE_WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    OuLangevin,
    SpectralFft,
    /// Identically zero, for deterministic checks.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory {
    pub dt: f64,
    pub samples: Vec<Complex64>,
    pub seed: u64,
    pub source: NoiseSource,
}

impl NoiseTrajectory {
    pub fn zero(dt: f64, steps: usize) -> Self {
        Self { dt, samples: vec![Complex64::default(); steps + 1], seed: 0, source: NoiseSource::Zero }
    }

    /// Number of steps N covered (samples hold N + 1 points).
    pub fn steps(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }

    /// Z at step n (zero-order hold).
    pub fn at(&self, step: usize) -> Complex64 {
        self.samples[step.min(self.samples.len() - 1)]
    }

    /// Columns `t,re_z,im_z` at the given step indices, plus `observable`
    /// (one value per row) when given.
    pub fn write_csv<W: Write>(&self, mut w: W, rows: &[usize], observable: Option<&[f64]>) -> io::Result<()> {
        match observable {
            Some(_) => writeln!(w, "t,re_z,im_z,observable")?,
            None => writeln!(w, "t,re_z,im_z")?,
        }
        for (r, &n) in rows.iter().enumerate() {
            let z = self.at(n);
            let t = n as f64 * self.dt;
            match observable.and_then(|o| o.get(r)) {
                Some(v) => writeln!(w, "{t},{},{},{v}", z.re, z.im)?,
                None if observable.is_some() => writeln!(w, "{t},{},{},", z.re, z.im)?,
                None => writeln!(w, "{t},{},{}", z.re, z.im)?,
            }
        }
        Ok(())
    }
}

/// Per-trajectory seed derived from the master seed and trajectory index
/// with two rounds of the SplitMix64 finalizer.
pub fn trajectory_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
}

fn check_grid(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")))
    }
}

/// Exact discretization of two independent stationary OU processes.
pub fn generate_ou(spec: &BathSpec, dt: f64, steps: usize, seed: u64) -> Result<NoiseTrajectory> {
    check_grid(dt)?;
    let BathKind::OrnsteinUhlenbeck { coupling, gamma } = spec.kind else {
        return Err(Error::InvalidParameter("OU noise requires an Ornstein-Uhlenbeck bath".into()));
    };
    let sigma = (0.25 * coupling * gamma).sqrt();
    let a = (-gamma * dt).exp();
    let kick = sigma * (-(-2.0 * gamma * dt).exp_m1()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut x = sigma * normal();
    let mut y = sigma * normal();
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(Complex64::new(x, y));
    for _ in 0..steps {
        x = a * x + kick * normal();
        y = a * y + kick * normal();
        samples.push(Complex64::new(x, y));
    }
    Ok(NoiseTrajectory { dt, samples, seed, source: NoiseSource::OuLangevin })
}

/// Reusable FFT plan and per-frequency amplitudes for spectral synthesis.
///
/// Z_n = Σ_k c_k e^{−2πikn/M} with circular Gaussian c_k of variance
/// P(ω_k)Δω/(2π), ω_k the FFT frequencies of an M-point grid of step dt.
/// M is a power of two of at least 4(N+1) points and at least four periods
/// of the slowest memory time, so the circular wrap stays outside the window.
#[derive(Clone)]
pub struct SpectralGenerator {
    dt: f64,
    steps: usize,
    scale: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGenerator").field("dt", &self.dt).field("steps", &self.steps).field("fft_len", &self.scale.len()).finish()
    }
}

impl SpectralGenerator {
    pub fn new(spec: &BathSpec, dt: f64, steps: usize) -> Result<Self> {
        spec.validate()?;
        let memory = 1.0 / spec.gamma();
        Self::from_weight(|w| spec.spectral_weight(w), dt, steps, memory)
    }

    /// Build from an arbitrary two-sided spectral weight `p(ω)`.
    pub fn from_weight<P: Fn(f64) -> f64>(p: P, dt: f64, steps: usize, memory_time: f64) -> Result<Self> {
        check_grid(dt)?;
        let min_len = (4 * (steps + 1)).max((8.0 * std::f64::consts::PI * memory_time / dt).ceil() as usize);
        let m = min_len.next_power_of_two();
        let d_omega = 2.0 * std::f64::consts::PI / (m as f64 * dt);
        let weights: Vec<(f64, f64)> = (0..m)
            .map(|k| {
                let signed = if k < m.div_ceil(2) { k as f64 } else { k as f64 - m as f64 };
                let omega = signed * d_omega;
                (omega, p(omega))
            })
            .collect();
        let peak = weights.iter().map(|w| w.1.abs()).fold(0.0, f64::max);
        if let Some(&(omega, weight)) = weights.iter().find(|w| w.1 < -NEGATIVE_WEIGHT_TOL * peak || !w.1.is_finite()) {
            return Err(Error::NegativeSpectralWeight { omega, weight });
        }
        // per-component standard deviation sqrt(P Δω / 4π)
        let scale = weights.iter().map(|&(_, w)| (w.max(0.0) * d_omega / (4.0 * std::f64::consts::PI)).sqrt()).collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        Ok(Self { dt, steps, scale, fft })
    }

    pub fn fft_len(&self) -> usize {
        self.scale.len()
    }

    pub fn generate(&self, seed: u64) -> NoiseTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf: Vec<Complex64> = self
            .scale
            .iter()
            .map(|&s| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(s * re, s * im)
            })
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.steps + 1);
        NoiseTrajectory { dt: self.dt, samples: buf, seed, source: NoiseSource::SpectralFft }
    }
}

pub fn generate_spectral(spec: &BathSpec, dt: f64, steps: usize, seed: u64) -> Result<NoiseTrajectory> {
    Ok(SpectralGenerator::new(spec, dt, steps)?.generate(seed))
}

/// The generator an ensemble uses for a given bath: exact Langevin updates
/// for OU, spectral synthesis otherwise.
#[derive(Debug, Clone)]
pub enum NoiseGenerator {
    Ou { spec: BathSpec, dt: f64, steps: usize },
    Spectral(SpectralGenerator),
    Zero { dt: f64, steps: usize },
}

impl NoiseGenerator {
    pub fn for_bath(spec: &BathSpec, dt: f64, steps: usize) -> Result<Self> {
        check_grid(dt)?;
        Ok(match spec.kind {
            BathKind::OrnsteinUhlenbeck { .. } => Self::Ou { spec: *spec, dt, steps },
            BathKind::Debye { .. } => Self::Spectral(SpectralGenerator::new(spec, dt, steps)?),
        })
    }

    pub fn generate(&self, seed: u64) -> Result<NoiseTrajectory> {
        match self {
            Self::Ou { spec, dt, steps } => generate_ou(spec, *dt, *steps, seed),
            Self::Spectral(g) => Ok(g.generate(seed)),
            Self::Zero { dt, steps } => Ok(NoiseTrajectory::zero(*dt, *steps)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(gamma: f64) -> BathSpec {
        BathSpec::ornstein_uhlenbeck(1.0, gamma).unwrap()
    }

    struct Moments {
        cross: Complex64,
        cross_sem: f64,
        pseudo: Complex64,
        pseudo_sem: f64,
        mean: Complex64,
        mean_sem: f64,
    }

    fn moments(trajs: &[NoiseTrajectory], t: usize, s: usize) -> Moments {
        let n = trajs.len() as f64;
        let stats = |f: &dyn Fn(&NoiseTrajectory) -> Complex64| {
            let vals: Vec<Complex64> = trajs.iter().map(f).collect();
            let mean = vals.iter().sum::<Complex64>() / n;
            let var = vals.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        };
        let (cross, cross_sem) = stats(&|z| z.samples[t] * z.samples[s].conj());
        let (pseudo, pseudo_sem) = stats(&|z| z.samples[t] * z.samples[s]);
        let (mean, mean_sem) = stats(&|z| z.samples[t]);
        Moments { cross, cross_sem, pseudo, pseudo_sem, mean, mean_sem }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..1000).map(|i| trajectory_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 1000);
        assert_eq!(trajectory_seed(7, 3), a[3]);
        assert_ne!(trajectory_seed(8, 3), a[3]);
    }

    #[test]
    fn ou_reproducible() {
        let a = generate_ou(&ou(5.0), 0.01, 100, 42).unwrap();
        let b = generate_ou(&ou(5.0), 0.01, 100, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 101);
        assert_ne!(a, generate_ou(&ou(5.0), 0.01, 100, 43).unwrap());
    }

    #[test]
    fn ou_small_step_continuity() {
        let z = generate_ou(&ou(1e-3), 1e-6, 10, 1).unwrap();
        for w in z.samples.windows(2) {
            assert!((w[1] - w[0]).norm() < 1e-3 * w[0].norm().max(1e-3));
        }
    }

    #[test]
    fn ou_rejects_debye() {
        let d = BathSpec::debye(0.5, 0.25, 2.0).unwrap();
        assert!(generate_ou(&d, 0.01, 10, 0).is_err());
    }

    #[test]
    fn ou_statistics() {
        let gamma = 5.0;
        let dt = 0.02;
        let trajs: Vec<_> = (0..4000).map(|i| generate_ou(&ou(gamma), dt, 30, trajectory_seed(1, i)).unwrap()).collect();
        for lag in [0usize, 10] {
            let m = moments(&trajs, 5 + lag, 5);
            let target = 0.5 * gamma * (-gamma * lag as f64 * dt).exp();
            assert!((m.cross.re - target).abs() < 4.0 * m.cross_sem, "lag {lag}: {} vs {target}", m.cross);
            assert!(m.pseudo.norm() < 4.0 * m.pseudo_sem);
            assert!(m.mean.norm() < 4.0 * m.mean_sem);
        }
    }

    #[test]
    fn spectral_matches_ou_target() {
        let gamma = 5.0;
        let dt = 0.01;
        let g = SpectralGenerator::new(&ou(gamma), dt, 60).unwrap();
        let trajs: Vec<_> = (0..4000).map(|i| g.generate(trajectory_seed(2, i))).collect();
        for lag in [0usize, 20] {
            let m = moments(&trajs, 30 + lag, 30);
            // the spectral grid stops at Nyquist, which removes ~γ dt·2/π of the variance
            let target = 0.5 * gamma * (-gamma * lag as f64 * dt).exp();
            assert!((m.cross.re - target).abs() < 4.0 * m.cross_sem + 0.04 * target, "lag {lag}: {} vs {target}", m.cross);
            assert!(m.pseudo.norm() < 4.0 * m.pseudo_sem);
        }
    }

    #[test]
    fn spectral_reproducible_and_sized() {
        let d = BathSpec::debye(0.5, 0.25, 2.0).unwrap();
        let g = SpectralGenerator::new(&d, 0.002, 5000).unwrap();
        assert_eq!(g.fft_len(), 65536);
        let a = g.generate(9);
        assert_eq!(a.samples.len(), 5001);
        assert_eq!(a, g.generate(9));
    }

    #[test]
    fn negative_weight_rejected() {
        let r = SpectralGenerator::from_weight(|w| 1.0 - w * w, 0.1, 10, 1.0);
        assert!(matches!(r, Err(Error::NegativeSpectralWeight { .. })));
    }

    #[test]
    fn csv_layout() {
        let z = NoiseTrajectory { dt: 0.5, samples: vec![Complex64::new(1.0, -2.0), Complex64::new(0.0, 3.0)], seed: 0, source: NoiseSource::Zero };
        let mut out = Vec::new();
        z.write_csv(&mut out, &[0, 1], Some(&[0.25, -1.0])).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,re_z,im_z,observable\n0,1,-2,0.25\n0.5,0,3,-1\n");
    }
}
