//! Target dynamics driven by the measured output: a linear filter `z' = A z + B y` or a bank of
//! parallel scalar contracting filters `z_i' = k lambda_i sigma_i(z_i, y)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contraction::{solve_psi, ContractionMap, ContractionSpec, PSI_TOL};
use crate::dynsys::{DynamicalSystem, Trajectory};
use crate::error::{KklError, Result};
use crate::fit::linear_fit;
use crate::ode;

/// Filter banks as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BankSpec {
    Linear {
        a: f64,
        lambdas: Vec<f64>,
    },
    Nonlinear {
        sigma: ContractionSpec,
        lambdas: Vec<f64>,
        #[serde(default = "one")]
        k: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl BankSpec {
    pub fn build(&self) -> Result<FilterBank> {
        match self {
            BankSpec::Linear { a, lambdas } => FilterBank::linear_from(*a, lambdas),
            BankSpec::Nonlinear { sigma, lambdas, k } => {
                let cm = sigma.build()?;
                FilterBank::nonlinear(vec![cm; lambdas.len()], lambdas.clone(), *k)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum BankKind {
    Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
        /// Gains the matrices were built from, when known.
        lambdas: Option<Vec<f64>>,
    },
    Nonlinear {
        sigmas: Vec<ContractionMap>,
        lambdas: Vec<f64>,
        k: f64,
    },
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    kind: BankKind,
    spec: Option<BankSpec>,
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(KklError::InvalidArgument("at least one gain is required".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(KklError::SignError(format!("gains must be positive, got {l}")));
    }
    for (i, a) in lambdas.iter().enumerate() {
        if lambdas[..i].contains(a) {
            return Err(KklError::DuplicateLambda(*a));
        }
    }
    Ok(())
}

impl FilterBank {
    /// Diagonal linear bank `z_i' = a lambda_i (z_i - y)`, i.e. `A = a diag(lambda)`, `B = -a lambda`.
    pub fn linear_from(a: f64, lambdas: &[f64]) -> Result<Self> {
        if !(a < 0.0) {
            return Err(KklError::SignError(format!("linear slope must be negative, got {a}")));
        }
        check_lambdas(lambdas)?;
        let m = lambdas.len();
        let diag = DVector::from_iterator(m, lambdas.iter().map(|l| a * l));
        Ok(FilterBank {
            kind: BankKind::Linear {
                a: DMatrix::from_diagonal(&diag),
                b: -diag,
                lambdas: Some(lambdas.to_vec()),
            },
            spec: Some(BankSpec::Linear {
                a,
                lambdas: lambdas.to_vec(),
            }),
        })
    }

    /// Arbitrary linear filter `z' = A z + B y`. `A` must be Hurwitz.
    pub fn linear(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() || b.is_empty() {
            return Err(KklError::InvalidArgument("A must be square and match B".into()));
        }
        let eig = a.complex_eigenvalues();
        if eig.iter().any(|e| !(e.re < 0.0)) {
            return Err(KklError::SignError("A is not Hurwitz".into()));
        }
        Ok(FilterBank {
            kind: BankKind::Linear { a, b, lambdas: None },
            spec: None,
        })
    }

    pub fn nonlinear(sigmas: Vec<ContractionMap>, lambdas: Vec<f64>, k: f64) -> Result<Self> {
        check_lambdas(&lambdas)?;
        if sigmas.len() != lambdas.len() {
            return Err(KklError::InvalidArgument(format!(
                "{} contraction maps for {} gains",
                sigmas.len(),
                lambdas.len()
            )));
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(KklError::SignError(format!("global gain must be positive, got {k}")));
        }
        let spec = match sigmas.first().and_then(|s| s.spec()) {
            Some(s0) if sigmas.iter().all(|s| s.spec() == Some(s0)) => Some(BankSpec::Nonlinear {
                sigma: s0,
                lambdas: lambdas.clone(),
                k,
            }),
            _ => None,
        };
        Ok(FilterBank {
            kind: BankKind::Nonlinear { sigmas, lambdas, k },
            spec,
        })
    }

    pub fn kind(&self) -> &BankKind {
        &self.kind
    }

    pub fn spec(&self) -> Option<&BankSpec> {
        self.spec.as_ref()
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            BankKind::Linear { b, .. } => b.len(),
            BankKind::Nonlinear { lambdas, .. } => lambdas.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, BankKind::Linear { .. })
    }

    /// Right-hand side of the filter for measurement `y`.
    #[inline]
    pub fn rhs(&self, z: &[f64], y: f64, dz: &mut [f64]) {
        match &self.kind {
            BankKind::Linear { a, b, .. } => {
                let m = b.len();
                for i in 0..m {
                    let mut acc = b[i] * y;
                    for j in 0..m {
                        acc += a[(i, j)] * z[j];
                    }
                    dz[i] = acc;
                }
            }
            BankKind::Nonlinear { sigmas, lambdas, k } => {
                for i in 0..lambdas.len() {
                    dz[i] = k * lambdas[i] * sigmas[i].sigma(z[i], y);
                }
            }
        }
    }

    /// Slowest guaranteed contraction rate: `k min_i lambda_i alpha_i`, or the smallest decay rate
    /// of the symmetric part of `A`.
    pub fn slowest_rate(&self) -> f64 {
        match &self.kind {
            BankKind::Linear { a, .. } => -sym_eigen_extremes(a).1,
            BankKind::Nonlinear { sigmas, lambdas, k } => sigmas
                .iter()
                .zip(lambdas)
                .map(|(s, l)| k * l * s.bounds().alpha)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Fastest possible contraction rate: `k max_i lambda_i beta_i`, or the largest decay rate of
    /// the symmetric part of `A`.
    pub fn fastest_rate(&self) -> f64 {
        match &self.kind {
            BankKind::Linear { a, .. } => -sym_eigen_extremes(a).0,
            BankKind::Nonlinear { sigmas, lambdas, k } => sigmas
                .iter()
                .zip(lambdas)
                .map(|(s, l)| k * l * s.bounds().beta)
                .fold(0.0, f64::max),
        }
    }

    /// Smallest effective gain `min_i k lambda_i` (the slowest eigenvalue magnitude for a bare
    /// linear filter). Sets the dataset washout time.
    pub fn min_gain(&self) -> f64 {
        match &self.kind {
            BankKind::Linear {
                lambdas: Some(l), ..
            } => l.iter().copied().fold(f64::INFINITY, f64::min),
            BankKind::Linear { .. } => self.slowest_rate(),
            BankKind::Nonlinear { lambdas, k, .. } => {
                k * lambdas.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Fixed point of the filter for a constant measurement `y`.
    pub fn equilibrium(&self, y: f64) -> Result<Vec<f64>> {
        match &self.kind {
            BankKind::Linear { a, b, .. } => {
                let rhs = -b * y;
                a.clone()
                    .lu()
                    .solve(&rhs)
                    .map(|v| v.iter().copied().collect())
                    .ok_or_else(|| KklError::InvalidArgument("singular A".into()))
            }
            BankKind::Nonlinear { sigmas, .. } => {
                sigmas.iter().map(|s| solve_psi(s, y, PSI_TOL)).collect()
            }
        }
    }
}

fn sym_eigen_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let lo = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum SignalSource {
    Trajectory(Arc<Trajectory>),
    Function(TimeFn),
}

/// Measured output `y(t) + nu(t)` fed to a filter bank.
#[derive(Clone)]
pub struct OutputSignal {
    source: SignalSource,
    noise: Option<TimeFn>,
}

impl fmt::Debug for OutputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let src = match &self.source {
            SignalSource::Trajectory(t) => format!("trajectory({} samples)", t.len()),
            SignalSource::Function(_) => "function".to_string(),
        };
        f.debug_struct("OutputSignal")
            .field("source", &src)
            .field("noisy", &self.noise.is_some())
            .finish()
    }
}

impl OutputSignal {
    pub fn from_trajectory(traj: Trajectory) -> Self {
        OutputSignal {
            source: SignalSource::Trajectory(Arc::new(traj)),
            noise: None,
        }
    }

    pub fn from_fn<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        OutputSignal {
            source: SignalSource::Function(Arc::new(f)),
            noise: None,
        }
    }

    pub fn constant(c: f64) -> Self {
        OutputSignal::from_fn(move |_| c)
    }

    pub fn with_noise<F: Fn(f64) -> f64 + Send + Sync + 'static>(mut self, nu: F) -> Self {
        self.noise = Some(Arc::new(nu));
        self
    }

    /// Noise-free value `y(t)`.
    pub fn clean(&self, t: f64) -> Result<f64> {
        match &self.source {
            SignalSource::Trajectory(traj) => traj.sample_output(t),
            SignalSource::Function(f) => Ok(f(t)),
        }
    }

    /// Measured value `y(t) + nu(t)`.
    pub fn measure(&self, t: f64) -> Result<f64> {
        let y = self.clean(t)?;
        Ok(match &self.noise {
            Some(nu) => y + nu(t),
            None => y,
        })
    }
}

/// Sinusoidal measurement noise `amplitude * sin(frequency * t)`.
pub fn sine_noise(amplitude: f64, frequency: f64) -> impl Fn(f64) -> f64 + Send + Sync + Clone {
    move |t| amplitude * (frequency * t).sin()
}

/// One RK4 step of the filter driven by `signal`, sampled at the RK4 stage times.
pub fn step_filter(
    bank: &FilterBank,
    z: &[f64],
    signal: &OutputSignal,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    let mut w = ode::Rk4Work::new(z.len());
    ode::rk4_step(
        &mut |s, zz: &[f64], dz: &mut [f64]| {
            bank.rhs(zz, signal.measure(s)?, dz);
            Ok(())
        },
        t,
        &mut out,
        dt,
        &mut w,
    )?;
    Ok(out)
}

/// Filter solution from `z0` at `t0` to `t1`. `outputs` holds the measurement at each sample.
pub fn run_filter(
    bank: &FilterBank,
    signal: &OutputSignal,
    z0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    check_bank_dim(bank, z0)?;
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        outputs: Vec::new(),
    };
    let mut pending: Result<()> = Ok(());
    ode::integrate(
        |s, z, dz| {
            bank.rhs(z, signal.measure(s)?, dz);
            Ok(())
        },
        z0,
        t0,
        t1,
        dt,
        |t, z| {
            let y = signal.measure(t);
            match y {
                Ok(y) => {
                    traj.times.push(t);
                    traj.states.push(z.to_vec());
                    traj.outputs.push(y);
                }
                Err(e) => {
                    if pending.is_ok() {
                        pending = Err(e);
                    }
                }
            }
        },
    )?;
    pending?;
    if t1 < t0 {
        traj.times.reverse();
        traj.states.reverse();
        traj.outputs.reverse();
    }
    Ok(traj)
}

fn check_bank_dim(bank: &FilterBank, z: &[f64]) -> Result<()> {
    if z.len() != bank.dim() {
        return Err(KklError::InvalidArgument(format!(
            "filter state has dimension {}, bank expects {}",
            z.len(),
            bank.dim()
        )));
    }
    Ok(())
}

/// Plant and filter integrated as one coupled system with a shared step. The filter sees
/// `h(x) + noise(t)`; the plant is noise-free.
///
/// `visit(t, x, z)` is called at the initial time and after every step. Returns the final `(x, z)`.
#[allow(clippy::too_many_arguments)]
pub fn cosimulate<V>(
    system: &DynamicalSystem,
    bank: &FilterBank,
    x0: &[f64],
    z0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    noise: Option<&(dyn Fn(f64) -> f64 + Sync)>,
    mut visit: V,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    V: FnMut(f64, &[f64], &[f64]),
{
    let n = system.dim();
    if x0.len() != n {
        return Err(KklError::InvalidArgument("plant state dimension mismatch".into()));
    }
    check_bank_dim(bank, z0)?;
    let mut joint = Vec::with_capacity(n + z0.len());
    joint.extend_from_slice(x0);
    joint.extend_from_slice(z0);
    let end = ode::integrate(
        |t, s, d| {
            let (x, z) = s.split_at(n);
            let (dx, dz) = d.split_at_mut(n);
            system.field(x, dx);
            let mut y = system.output(x);
            if let Some(nu) = noise {
                y += nu(t);
            }
            bank.rhs(z, y, dz);
            Ok(())
        },
        &joint,
        t0,
        t1,
        dt,
        |t, s| {
            let (x, z) = s.split_at(n);
            visit(t, x, z)
        },
    )?;
    let (x, z) = end.split_at(n);
    Ok((x.to_vec(), z.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Least-squares slope of `log |z_a - z_b|` over the fitting window.
    pub fitted_rate: f64,
    /// Guaranteed decay rate (positive); the fitted slope must be at most its negative.
    pub bound_rate: f64,
    /// Largest possible decay rate (positive).
    pub fastest_rate: f64,
    pub window: (f64, f64),
    pub pass: bool,
}

impl RateReport {
    /// Fitted slope inside `[-fastest, -bound]` with relative slack `tol`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        self.fitted_rate <= -self.bound_rate * (1.0 - tol)
            && self.fitted_rate >= -self.fastest_rate * (1.0 + tol)
    }
}

const GAP_WINDOW: (f64, f64) = (1e-8, 1e-1);
const GAP_FLOOR: f64 = 1e-12;

/// Runs two filter solutions under the same signal and fits their exponential convergence rate.
pub fn contraction_rate_check(
    bank: &FilterBank,
    signal: &OutputSignal,
    z0_a: &[f64],
    z0_b: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<RateReport> {
    let gap0 = dist(z0_a, z0_b);
    if gap0 < GAP_FLOOR {
        return Err(KklError::GapUnderflow { gap: gap0 });
    }
    let m = bank.dim();
    check_bank_dim(bank, z0_a)?;
    check_bank_dim(bank, z0_b)?;
    let mut joint = z0_a.to_vec();
    joint.extend_from_slice(z0_b);
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    ode::integrate(
        |t, s, d| {
            let y = signal.measure(t)?;
            let (za, zb) = s.split_at(m);
            let (da, db) = d.split_at_mut(m);
            bank.rhs(za, y, da);
            bank.rhs(zb, y, db);
            Ok(())
        },
        &joint,
        0.0,
        horizon,
        dt,
        |t, s| {
            let gap = dist(&s[..m], &s[m..]);
            if gap >= GAP_WINDOW.0 && gap <= GAP_WINDOW.1 {
                ts.push(t);
                logs.push(gap.ln());
            }
        },
    )?;
    let (fitted_rate, _) = linear_fit(&ts, &logs).ok_or_else(|| {
        KklError::InvalidArgument("gap never traversed the fitting window; extend the horizon".into())
    })?;
    let bound_rate = bank.slowest_rate();
    Ok(RateReport {
        fitted_rate,
        bound_rate,
        fastest_rate: bank.fastest_rate(),
        window: (ts[0], *ts.last().unwrap_or(&ts[0])),
        pass: fitted_rate <= -bound_rate * (1.0 - 0.05),
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_bank_matrices() {
        let bank = FilterBank::linear_from(-5.0, &[2.0, 4.0, 6.0]).unwrap();
        let BankKind::Linear { a, b, .. } = bank.kind() else {
            panic!()
        };
        assert_eq!(a, &DMatrix::from_diagonal(&DVector::from_vec(vec![-10.0, -20.0, -30.0])));
        assert_eq!(b, &DVector::from_vec(vec![10.0, 20.0, 30.0]));
        assert!(matches!(
            FilterBank::linear_from(-5.0, &[2.0, 2.0]),
            Err(KklError::DuplicateLambda(_))
        ));
        assert!(matches!(FilterBank::linear_from(1.0, &[2.0]), Err(KklError::SignError(_))));
    }

    #[test]
    fn scalar_low_pass_slope() {
        let bank = FilterBank::linear_from(-1.0, &[1.0]).unwrap();
        let mut dz = [0.0];
        bank.rhs(&[1.0], 0.0, &mut dz);
        assert_eq!(dz[0], -1.0);
    }

    #[test]
    fn tanh_bank_derivative() {
        let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        let bank = FilterBank::nonlinear(vec![cm], vec![2.0], 1.0).unwrap();
        let mut dz = [0.0];
        bank.rhs(&[10.0], 0.0, &mut dz);
        let expected = 2.0 * (-5.0 * 10.0 + 4.5 * 10.0_f64.tanh());
        assert!((dz[0] - expected).abs() < 1e-12);
        assert!((dz[0] + 91.0).abs() < 1e-3);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        let bank = FilterBank::nonlinear(vec![cm; 3], vec![2.0, 4.0, 6.0], 1.0).unwrap();
        let z = bank.equilibrium(0.8).unwrap();
        let next = step_filter(&bank, &z, &OutputSignal::constant(0.8), 0.0, 0.1).unwrap();
        assert_eq!(next, z);
    }

    #[test]
    fn low_pass_closed_form() {
        let bank = FilterBank::linear_from(-1.0, &[1.0]).unwrap();
        let c = 2.0;
        let z0 = -3.0;
        let traj = run_filter(&bank, &OutputSignal::constant(c), &[z0], 0.0, 3.0, 1e-3).unwrap();
        let t = 3.0_f64;
        let exact = c * (1.0 - (-t).exp()) + z0 * (-t).exp();
        assert!((traj.states.last().unwrap()[0] - exact).abs() < 1e-8);
        assert!(traj.outputs.iter().all(|y| *y == c));
    }

    #[test]
    fn signal_out_of_range_propagates() {
        let traj = Trajectory {
            times: vec![0.0, 0.5, 1.0, 1.5],
            states: vec![vec![]; 4],
            outputs: vec![0.0; 4],
        };
        let bank = FilterBank::linear_from(-1.0, &[1.0]).unwrap();
        let sig = OutputSignal::from_trajectory(traj);
        assert!(matches!(
            run_filter(&bank, &sig, &[0.0], 0.0, 2.0, 0.1),
            Err(KklError::OutOfRange { .. })
        ));
    }

    #[test]
    fn noise_is_added_to_measurement() {
        let sig = OutputSignal::constant(1.0).with_noise(sine_noise(0.1, 10.0));
        let t = 0.3;
        assert_eq!(sig.clean(t).unwrap(), 1.0);
        assert!((sig.measure(t).unwrap() - (1.0 + 0.1 * 3.0_f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn linear_rate_fit() {
        let bank = FilterBank::linear_from(-1.0, &[1.0]).unwrap();
        let rep = contraction_rate_check(&bank, &OutputSignal::constant(0.0), &[1.0], &[0.0], 25.0, 1e-3).unwrap();
        assert!((rep.fitted_rate + 1.0).abs() < 0.02);
        assert!(rep.pass);
        assert!(matches!(
            contraction_rate_check(&bank, &OutputSignal::constant(0.0), &[1.0], &[1.0], 5.0, 1e-3),
            Err(KklError::GapUnderflow { .. })
        ));
    }

    #[test]
    fn tanh_rate_in_slope_band() {
        let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        let bank = FilterBank::nonlinear(vec![cm], vec![2.0], 1.0).unwrap();
        let rep = contraction_rate_check(&bank, &OutputSignal::constant(0.0), &[0.05], &[0.0], 25.0, 1e-3).unwrap();
        assert!(rep.fitted_rate <= -1.0 && rep.fitted_rate >= -10.0, "{rep:?}");
        assert!(rep.pass);
    }

    #[test]
    fn bank_spec_json() {
        let spec: BankSpec = serde_json::from_str(
            r#"{"kind":"nonlinear","sigma":{"kind":"tanh_blend","a_fast":-5,"a_slow":-0.5},"lambdas":[2,4,6],"k":1}"#,
        )
        .unwrap();
        let bank = spec.build().unwrap();
        assert_eq!(bank.dim(), 3);
        assert_eq!(bank.spec(), Some(&spec));
        let lin: BankSpec = serde_json::from_str(r#"{"kind":"linear","a":-5,"lambdas":[2,4,6]}"#).unwrap();
        assert_eq!(lin.build().unwrap().slowest_rate(), 10.0);
        assert_eq!(lin.build().unwrap().fastest_rate(), 30.0);
    }
}
