//! Shared fixtures for the benchmarks.

use nmsse_core::ensemble::{resolve, EnsembleConfig, ResolvedRun};
use nmsse_core::noise::NoiseGenerator;
use nmsse_core::{NoiseTrajectory, Preset};

/// A resolved preset with one noise trajectory over `steps` steps of `dt`.
pub struct Fixture {
    pub run: ResolvedRun,
    pub generator: NoiseGenerator,
    pub noise: NoiseTrajectory,
    pub dt: f64,
    pub steps: usize,
}

pub fn fixture(preset: Preset, n_max: usize, dt: f64, steps: usize) -> Fixture {
    let mut cfg = EnsembleConfig::preset(preset);
    cfg.n_max = n_max;
    cfg.dt = dt;
    cfg.steps = steps;
    let run = resolve(&cfg).expect("preset resolves");
    let generator = NoiseGenerator::for_bath(&run.bath, dt, steps).expect("noise generator");
    let noise = generator.generate(1).expect("noise");
    Fixture { run, generator, noise, dt, steps }
}
