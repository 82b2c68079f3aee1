//! Fixed-step classical Runge-Kutta integration over flat `f64` state slices.

use crate::error::{KklError, Result};

/// Scratch buffers for one RK4 step, reused across steps to avoid allocation.
#[derive(Debug, Clone)]
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(dim: usize) -> Self {
        Rk4Work {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Advances `y` in place by one classical RK4 step of size `h` (which may be negative).
pub fn rk4_step<F>(rhs: &mut F, t: f64, y: &mut [f64], h: f64, w: &mut Rk4Work) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    rhs(t, y, &mut w.k1)?;
    for i in 0..n {
        w.tmp[i] = y[i] + 0.5 * h * w.k1[i];
    }
    rhs(t + 0.5 * h, &w.tmp, &mut w.k2)?;
    for i in 0..n {
        w.tmp[i] = y[i] + 0.5 * h * w.k2[i];
    }
    rhs(t + 0.5 * h, &w.tmp, &mut w.k3)?;
    for i in 0..n {
        w.tmp[i] = y[i] + h * w.k3[i];
    }
    rhs(t + h, &w.tmp, &mut w.k4)?;
    for i in 0..n {
        y[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
    Ok(())
}

/// Number of steps and the nominal signed step for integrating from `t0` to `t1`.
///
/// The last step is shortened so that the final time is exactly `t1`.
pub fn step_plan(t0: f64, t1: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KklError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !t0.is_finite() || !t1.is_finite() {
        return Err(KklError::InvalidArgument("non-finite time bounds".into()));
    }
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return Ok((0, 0.0));
    }
    // Tolerate round-off so that e.g. 1.0 / 1e-3 gives 1000 steps, not 1001.
    let n = ((span / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((n, dt * (t1 - t0).signum()))
}

/// Integrates `rhs` from `t0` to `t1`, calling `visit(t, y)` at the initial time and after every step.
///
/// Fails with `NonFinite` at the first step whose result leaves the finite range.
pub fn integrate<F, V>(
    mut rhs: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    mut visit: V,
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    V: FnMut(f64, &[f64]),
{
    let (n, h) = step_plan(t0, t1, dt)?;
    let mut y = y0.to_vec();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(KklError::NonFinite { time: t0 });
    }
    let mut w = Rk4Work::new(y.len());
    visit(t0, &y);
    let mut t = t0;
    for i in 0..n {
        let t_next = if i + 1 == n { t1 } else { t0 + (i + 1) as f64 * h };
        rk4_step(&mut rhs, t, &mut y, t_next - t, &mut w)?;
        t = t_next;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KklError::NonFinite { time: t });
        }
        visit(t, &y);
    }
    Ok(y)
}
