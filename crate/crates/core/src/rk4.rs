//! Classical fourth-order Runge–Kutta on complex vectors.

use num_complex::Complex64;

/// Reusable stage buffers for [`Rk4::step`].
#[derive(Debug, Clone)]
pub struct Rk4 {
    k: [Vec<Complex64>; 4],
    stage: Vec<Complex64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        let z = vec![Complex64::default(); dim];
        Self { k: [z.clone(), z.clone(), z.clone(), z.clone()], stage: z }
    }

    pub fn dim(&self) -> usize {
        self.stage.len()
    }

    /// Advance `y` by `dt` under the autonomous right-hand side `f(y, out)`,
    /// which must overwrite `out` with dy/dt.
    pub fn step<F>(&mut self, y: &mut [Complex64], dt: f64, mut f: F)
    where
        F: FnMut(&[Complex64], &mut [Complex64]),
    {
        debug_assert_eq!(y.len(), self.dim());
        let [k1, k2, k3, k4] = &mut self.k;
        let s = &mut self.stage;
        f(y, k1);
        axpy_into(s, y, 0.5 * dt, k1);
        f(s, k2);
        axpy_into(s, y, 0.5 * dt, k2);
        f(s, k3);
        axpy_into(s, y, dt, k3);
        f(s, k4);
        let c = dt / 6.0;
        for i in 0..y.len() {
            y[i] += c * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
    }
}

fn axpy_into(out: &mut [Complex64], y: &[Complex64], a: f64, k: &[Complex64]) {
    for ((o, y), k) in out.iter_mut().zip(y).zip(k) {
        *o = y + a * k;
    }
}

/// One RK4 step for a real state vector; used by the variational engine.
pub fn step_real<F>(y: &[f64], dt: f64, mut f: F) -> Result<Vec<f64>, crate::Error>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, crate::Error>,
{
    let add = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a + s * b).collect() };
    let k1 = f(y)?;
    let k2 = f(&add(y, 0.5 * dt, &k1))?;
    let k3 = f(&add(y, 0.5 * dt, &k2))?;
    let k4 = f(&add(y, dt, &k3))?;
    Ok((0..y.len()).map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}
