//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `NMSSE_ACCEPTANCE=1,4` restricts the run to the listed criteria. Failed
//! criteria are listed at the end; the exit status reflects them only with
//! `NMSSE_ACCEPTANCE_STRICT=1`.

use std::time::Instant;

use nmsse_core::ensemble::{resolve, run_ensemble, EnsembleConfig, EnsembleResult, RateMode};
use nmsse_core::noise::{generate_ou, trajectory_seed, NoiseGenerator};
use nmsse_core::reference::{lindblad_propagate, Closure, DensityMatrix, ExactPropagator, HierarchySolver};
use nmsse_core::vqs::{AnsatzSpec, VqsEngine, VqsOptions};
use nmsse_core::{BathSpec, Complex64, NoiseTrajectory, Preset, PresetOverrides};

struct Line {
    id: &'static str,
    pass: bool,
    text: String,
}

fn line(id: &'static str, pass: bool, text: String) -> Line {
    Line { id, pass, text }
}

fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn series<'a>(r: &'a EnsembleResult, name: &str) -> &'a nmsse_core::ensemble::ObservableSeries {
    r.get(name).unwrap_or_else(|| panic!("missing series {name}"))
}

// ---- 1 ----

fn oracle_equivalence() -> Vec<Line> {
    let mut worst = Vec::new();
    for preset in [Preset::SpinBosonFig2, Preset::TfimDqpt] {
        let cfg = EnsembleConfig::preset(preset);
        let run = resolve(&cfg).unwrap();
        let gen = NoiseGenerator::for_bath(&run.bath, cfg.dt, cfg.steps).unwrap();
        let exact = ExactPropagator::new(&run.model);
        let hops = HierarchySolver::new(&run.system, &run.fit.expansion, cfg.n_max, Closure::Truncate).unwrap();
        let mut err = 0.0f64;
        for k in 0..20 {
            let noise = gen.generate(trajectory_seed(2024, k)).unwrap();
            let mut a = Vec::new();
            exact.run(&noise, &run.model.initial_state(), cfg.dt, cfg.steps, cfg.stride, |_, s| a.push(s.to_vec())).unwrap();
            let mut b = Vec::new();
            hops.run(&noise, run.system.initial.amplitudes(), cfg.dt, cfg.steps, cfg.stride, |_, h| b.push(h.flatten(&run.model))).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                err = err.max(max_abs_diff(x, y.amplitudes()));
            }
        }
        worst.push((preset.name(), err));
    }
    let pass = worst.iter().all(|w| w.1 <= 1e-8);
    let text = worst.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    vec![line("1", pass, format!("hops vs exact, 20 seeds, max amplitude error ≤ 1e-8: {text}"))]
}

// ---- 2 ----

fn spin_boson_ensemble() -> Vec<Line> {
    let mut cfg = EnsembleConfig::preset(Preset::SpinBosonFig2);
    cfg.n_traj = 5000;
    cfg.master_seed = 2;
    let a = run_ensemble(&cfg).unwrap();
    cfg.first_index = 5000;
    let b = run_ensemble(&cfg).unwrap();
    cfg.n_traj = 10_000;
    cfg.first_index = 0;
    let full = run_ensemble(&cfg).unwrap();

    let (sa, sb) = (series(&a, "sigma_z"), series(&b, "sigma_z"));
    let mut worst_z = (0.0f64, 0.0);
    for k in 0..sa.values.len() {
        let se = (sa.sem[k].powi(2) + sb.sem[k].powi(2)).sqrt();
        let z = if se > 0.0 { (sa.values[k] - sb.values[k]).abs() / se } else if sa.values[k] == sb.values[k] { 0.0 } else { f64::INFINITY };
        if z > worst_z.0 {
            worst_z = (z, sa.times[k]);
        }
    }
    let tr = series(&full, "trace");
    let mut worst_t = (0.0f64, 0.0);
    for k in 0..tr.values.len() {
        let z = if tr.sem[k] > 0.0 { (tr.values[k] - 1.0).abs() / tr.sem[k] } else { (tr.values[k] - 1.0).abs() * f64::INFINITY };
        if z.is_finite() && z > worst_t.0 || z.is_infinite() {
            worst_t = (z, tr.times[k]);
        }
    }
    vec![
        line(
            "2a",
            worst_z.0 <= 3.0,
            format!("spin-boson ⟨σz⟩, two 5000-trajectory halves agree within 3·SEM: worst {:.2}σ at t = {}", worst_z.0, worst_z.1),
        ),
        line(
            "2b",
            worst_t.0 <= 3.0,
            format!("spin-boson raw trace within 3·SEM of 1 over [0, 10], 10⁴ trajectories: worst {:.2}σ at t = {} (n_eff {})", worst_t.0, worst_t.1, full.n_effective),
        ),
    ]
}

// ---- 3 ----

fn vqs_fidelity() -> Vec<Line> {
    let cfg = EnsembleConfig::preset(Preset::SpinBosonFig2);
    let run = resolve(&cfg).unwrap();
    let gen = NoiseGenerator::for_bath(&run.bath, cfg.dt, cfg.steps).unwrap();
    let exact = ExactPropagator::new(&run.model);
    let engine = VqsEngine::new(&run.model, AnsatzSpec::from_model(&run.model, cfg.depth).unwrap(), VqsOptions::default()).unwrap();
    let (mut dz, mut dn) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for k in 0..5 {
        let noise = gen.generate(trajectory_seed(77, k)).unwrap();
        let mut ex = Vec::new();
        exact.run(&noise, &run.model.initial_state(), cfg.dt, cfg.steps, 1, |_, s| ex.push(s.to_vec())).unwrap();
        let mut vq = Vec::new();
        let r = engine.run(&noise, cfg.dt, cfg.steps, 1, |_, s| vq.push((s.alpha, s.state().amplitudes().to_vec())), |_| {});
        if let Err(e) = r {
            failures.push(format!("seed {k}: {e}"));
            continue;
        }
        for (x, (alpha, y)) in ex.iter().zip(&vq) {
            let sz = |v: &[Complex64]| {
                let s = run.model.system_component(v);
                (s[0].norm_sqr() - s[1].norm_sqr()) / (s[0].norm_sqr() + s[1].norm_sqr())
            };
            dz = dz.max((sz(x) - sz(y)).abs());
            let n2: f64 = x.iter().map(|a| a.norm_sqr()).sum();
            dn = dn.max((alpha * alpha - n2).abs() / n2);
        }
    }
    let extra = if failures.is_empty() { String::new() } else { format!(" failures: {}", failures.join("; ")) };
    vec![
        line("3a", failures.is_empty() && dz <= 0.05, format!("VQS vs exact, 5 seeds, max |Δ⟨σz⟩| ≤ 0.05: {dz:.2e}{extra}")),
        line("3b", failures.is_empty() && dn <= 0.05, format!("VQS α² relative norm-tracking error ≤ 5%: {:.2e}%", 100.0 * dn)),
    ]
}

// ---- 4 ----

fn lindblad_rate(cfg: &EnsembleConfig) -> Vec<f64> {
    let system = cfg.preset.system_with(&cfg.overrides).unwrap();
    let refs = system.references().unwrap();
    let rate = cfg.preset.bath_with(&cfg.overrides).unwrap().spectral_weight(0.0);
    let rhos = lindblad_propagate(&system, rate, &DensityMatrix::pure(system.initial.amplitudes()), cfg.dt, cfg.steps).unwrap();
    cfg.output_steps()
        .iter()
        .map(|&s| refs.iter().map(|r| -0.5 * rhos[s].expectation_in(r.amplitudes()).ln()).fold(f64::INFINITY, f64::min))
        .collect()
}

fn markovian_limit() -> Vec<Line> {
    let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt).with_window(3.0);
    cfg.overrides = PresetOverrides { gamma: Some(50.0), ..Default::default() };
    cfg.n_max = 1;
    cfg.n_traj = 10_000;
    cfg.master_seed = 4;
    let res = run_ensemble(&cfg).unwrap();
    let reference = lindblad_rate(&cfg);
    let dev = |name: &str| series(&res, name).values.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (traj, fid) = (dev("rate_function_trajectory"), dev("rate_function_fidelity"));
    vec![
        line("4", traj <= 0.05, format!("TFIM γ = 50, n_max = 1, 10⁴ trajectories: averaged Λ (per-trajectory rate, default) vs Lindblad on [0, 3], max dev ≤ 0.05: {traj:.4}")),
        line("4-fidelity", fid <= 0.05, format!("same ensemble, Λ of the averaged fidelity vs Lindblad, max dev ≤ 0.05: {fid:.4}")),
    ]
}

// ---- 5 ----

/// Local maxima whose topographic prominence is at least `prominence`.
fn count_maxima(v: &[f64], prominence: f64) -> usize {
    let n = v.len();
    let mut count = 0;
    let mut i = 1;
    while i + 1 < n {
        if v[i] > v[i - 1] {
            // extend over a plateau
            let mut j = i;
            while j + 1 < n && v[j + 1] == v[i] {
                j += 1;
            }
            if j + 1 < n && v[j + 1] < v[i] {
                let mut left = v[i];
                for k in (0..i).rev() {
                    if v[k] > v[i] {
                        break;
                    }
                    left = left.min(v[k]);
                }
                let mut right = v[i];
                for &x in &v[j + 1..] {
                    if x > v[i] {
                        break;
                    }
                    right = right.min(x);
                }
                if v[i] - left.max(right) >= prominence {
                    count += 1;
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    count
}

fn dqpt_trend() -> Vec<Line> {
    let mut counts = Vec::new();
    let mut fid_counts = Vec::new();
    for gamma in [50.0, 5.0, 0.5] {
        let mut cfg = EnsembleConfig::preset(Preset::TfimDqpt);
        cfg.overrides = PresetOverrides { gamma: Some(gamma), ..Default::default() };
        cfg.n_traj = 10_000;
        cfg.master_seed = 5;
        let res = run_ensemble(&cfg).unwrap();
        counts.push((gamma, count_maxima(&series(&res, "rate_function_trajectory").values, 0.02)));
        fid_counts.push((gamma, count_maxima(&series(&res, "rate_function_fidelity").values, 0.02)));
    }
    let fmt = |c: &[(f64, usize)]| c.iter().map(|(g, n)| format!("γ={g}: {n}")).collect::<Vec<_>>().join(", ");
    vec![
        line("5", counts[2].1 > counts[0].1, format!("local maxima of averaged Λ on [0, 10] (prominence 0.02), γ = 0.5 > γ = 50: {}", fmt(&counts))),
        line("5-fidelity", fid_counts[2].1 > fid_counts[0].1, format!("same with the averaged-fidelity Λ: {}", fmt(&fid_counts))),
    ]
}

// ---- 6 ----

fn noise_statistics() -> Vec<Line> {
    let mut out = Vec::new();
    for gamma in [50.0, 5.0, 0.5] {
        let spec = BathSpec::ornstein_uhlenbeck(1.0, gamma).unwrap();
        let dt = 0.1 / gamma;
        let steps = 400;
        let lags = [0usize, 10, 20];
        let n = 10_000;
        // per-trajectory time averages over the stationary process
        let mut cross = [(); 3].map(|_| Vec::with_capacity(n));
        let mut pseudo = [(); 3].map(|_| Vec::with_capacity(n));
        let mut mean = Vec::with_capacity(n);
        for k in 0..n {
            let z = generate_ou(&spec, dt, steps, trajectory_seed(600 + gamma.to_bits() % 97, k as u64)).unwrap();
            for (l, &lag) in lags.iter().enumerate() {
                let m = steps + 1 - lag;
                let (mut c, mut p) = (Complex64::default(), Complex64::default());
                for t in 0..m {
                    c += z.at(t + lag) * z.at(t).conj();
                    p += z.at(t + lag) * z.at(t);
                }
                cross[l].push(c / m as f64);
                pseudo[l].push(p / m as f64);
            }
            mean.push(z.samples.iter().sum::<Complex64>() / z.samples.len() as f64);
        }
        let stats = |v: &[Complex64]| {
            let m = v.iter().sum::<Complex64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).norm_sqr()).sum::<f64>() / (v.len() - 1) as f64;
            (m, (var / v.len() as f64).sqrt())
        };
        let mut rel = Vec::new();
        let mut pass = true;
        for (l, &lag) in lags.iter().enumerate() {
            let target = 0.5 * gamma * (-gamma * lag as f64 * dt).exp();
            let (c, _) = stats(&cross[l]);
            let e = (c - target).norm() / target;
            let (p, ps) = stats(&pseudo[l]);
            pass &= e <= 0.05 && p.norm() <= 3.0 * ps;
            rel.push(format!("lag {}/γ: {:.2}% (|E[ZZ]| {:.2} SEM)", lag / 10, 100.0 * e, p.norm() / ps));
        }
        let (m, ms) = stats(&mean);
        pass &= m.norm() <= 3.0 * ms;
        out.push(line(
            "6",
            pass,
            format!("OU γ = {gamma}, 10⁴ trajectories, E[Z_t Z_s*] within 5%: {}; |E[Z]| {:.2} SEM", rel.join(", "), m.norm() / ms),
        ));
    }
    out
}

// ---- 7 ----

fn vqs_numerics() -> Vec<Line> {
    let mut out = Vec::new();
    for preset in [Preset::SpinBosonFig2, Preset::TfimDqpt] {
        let cfg = EnsembleConfig::preset(preset);
        let run = resolve(&cfg).unwrap();
        let noise = NoiseGenerator::for_bath(&run.bath, cfg.dt, cfg.steps).unwrap().generate(trajectory_seed(7, 0)).unwrap();
        let options = VqsOptions { check_invariants: true, ..VqsOptions::default() };
        let engine = VqsEngine::new(&run.model, AnsatzSpec::from_model(&run.model, cfg.depth).unwrap(), options).unwrap();
        let (mut sym, mut eig, mut fd, mut row, mut steps) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0usize);
        let r = engine.run(&noise, cfg.dt, cfg.steps, cfg.steps, |_, _| {}, |d| {
            sym = sym.max(d.symmetry_error.unwrap());
            eig = eig.min(d.min_eigenvalue.unwrap());
            fd = fd.max(d.tangent_fd_error.unwrap());
            row = row.max(d.norm_row_error.unwrap());
            steps += 1;
        });
        let pass = r.is_ok() && steps == cfg.steps && sym <= 1e-12 && eig >= -1e-10 && fd <= 1e-8 && row <= 1e-10;
        out.push(line(
            "7",
            pass,
            format!(
                "{} VQS depth {}, {} steps: symmetry {sym:.1e} ≤ 1e-12, λ_min {eig:.1e} ≥ -1e-10, tangent FD {fd:.1e} ≤ 1e-8, α-row {row:.1e} ≤ 1e-10{}",
                preset.name(),
                cfg.depth,
                steps,
                r.err().map(|e| format!(" error: {e}")).unwrap_or_default()
            ),
        ));
    }
    out
}

// ---- 8 ----

fn final_state(run: &nmsse_core::ensemble::ResolvedRun, noise: &NoiseTrajectory, dt: f64, steps: usize) -> Vec<Complex64> {
    let mut last = Vec::new();
    ExactPropagator::new(&run.model).run(noise, &run.model.initial_state(), dt, steps, steps, |_, s| last = s.to_vec()).unwrap();
    last
}

fn convergence() -> Vec<Line> {
    let mut out = Vec::new();
    let mut ratios = Vec::new();
    for preset in [Preset::SpinBosonFig2, Preset::TfimDqpt] {
        let cfg = EnsembleConfig::preset(preset);
        let run = resolve(&cfg).unwrap();
        // noise on the default step grid, held, so the finer steps see the same Z(t)
        let (dt, steps) = (cfg.dt, cfg.steps);
        let noise = NoiseGenerator::for_bath(&run.bath, dt, steps).unwrap().generate(trajectory_seed(8, 0)).unwrap();
        let t_end = dt * steps as f64;
        let at = |h: f64| final_state(&run, &noise, h, (t_end / h).round() as usize);
        let reference = at(dt / 8.0);
        let e1 = max_abs_diff(&at(dt), &reference);
        let e2 = max_abs_diff(&at(dt / 2.0), &reference);
        ratios.push((preset.name(), e1 / e2));
    }
    out.push(line(
        "8a",
        ratios.iter().all(|r| (12.0..=20.0).contains(&r.1)),
        format!(
            "RK4 step-halving error ratio at the default dt, dt/8 reference, in [12, 20]: {}",
            ratios.iter().map(|(n, r)| format!("{n} {r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    ));

    for (preset, name) in [(Preset::SpinBosonFig2, "sigma_z_normalized"), (Preset::TfimDqpt, "rate_function")] {
        let mut cfg = EnsembleConfig::preset(preset);
        cfg.n_traj = 1000;
        cfg.master_seed = 9;
        cfg.rate_mode = RateMode::Trajectory;
        let base = run_ensemble(&cfg).unwrap();
        cfg.n_max += 1;
        let more = run_ensemble(&cfg).unwrap();
        let (a, b) = (&series(&base, name).values, &series(&more, name).values);
        let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale;
        out.push(line(
            "8b",
            d <= 0.01,
            format!("{} n_max {} → {}: max |Δ{name}| / max |{name}| ≤ 1%: {:.3}%", preset.name(), cfg.n_max - 1, cfg.n_max, 100.0 * d),
        ));
    }
    out
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("NMSSE_ACCEPTANCE").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let criteria: [(&str, fn() -> Vec<Line>); 8] = [
        ("1", oracle_equivalence),
        ("2", spin_boson_ensemble),
        ("3", vqs_fidelity),
        ("4", markovian_limit),
        ("5", dqpt_trend),
        ("6", noise_statistics),
        ("7", vqs_numerics),
        ("8", convergence),
    ];
    let mut failed = Vec::new();
    for (id, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        for l in f() {
            println!("{} [{}] {} ({:.1} s)", if l.pass { "PASS" } else { "FAIL" }, l.id, l.text, start.elapsed().as_secs_f64());
            if !l.pass {
                failed.push(l.id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        if std::env::var("NMSSE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
