//! Plant dynamics `x' = f(x)`, `y = h(x)`: flows, output sampling, Lie derivatives,
//! forward-invariance and injectivity checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};
use crate::ode;
use crate::stencil::CentralStencil;

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type OutputMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Autonomous plant with a scalar output.
#[derive(Clone)]
pub struct DynamicalSystem {
    name: String,
    dim: usize,
    field: VectorField,
    output: OutputMap,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl DynamicalSystem {
    pub fn new<F, H>(name: impl Into<String>, dim: usize, field: F, output: H) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        assert!(dim > 0, "state dimension must be positive");
        DynamicalSystem {
            name: name.into(),
            dim,
            field: Arc::new(field),
            output: Arc::new(output),
        }
    }

    /// Undamped Duffing oscillator `x1' = x2, x2' = -0.2 x1 - x1^3`, measured through `y = x1`.
    pub fn duffing() -> Self {
        DynamicalSystem::new(
            "duffing",
            2,
            |x, dx| {
                dx[0] = x[1];
                dx[1] = -0.2 * x[0] - x[0] * x[0] * x[0];
            },
            |x| x[0],
        )
    }

    /// Plant with `f = 0` and `y = x1`.
    pub fn stationary(dim: usize) -> Self {
        DynamicalSystem::new("stationary", dim, |_, dx| dx.fill(0.0), |x| x[0])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn field(&self, x: &[f64], dx: &mut [f64]) {
        (self.field)(x, dx)
    }

    #[inline]
    pub fn output(&self, x: &[f64]) -> f64 {
        (self.output)(x)
    }
}

type PlantFactory = Arc<dyn Fn() -> DynamicalSystem + Send + Sync>;

/// Name-to-plant lookup used by configuration files. Additional plants can be registered
/// at run time.
#[derive(Clone)]
pub struct PlantRegistry {
    plants: BTreeMap<String, PlantFactory>,
}

impl Default for PlantRegistry {
    fn default() -> Self {
        let mut reg = PlantRegistry {
            plants: BTreeMap::new(),
        };
        reg.register("duffing", DynamicalSystem::duffing);
        reg.register("stationary", || DynamicalSystem::stationary(2));
        reg
    }
}

impl PlantRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> DynamicalSystem + Send + Sync + 'static,
    {
        self.plants.insert(name.to_string(), Arc::new(factory));
    }

    pub fn get(&self, name: &str) -> Result<DynamicalSystem> {
        self.plants
            .get(name)
            .map(|f| f())
            .ok_or_else(|| KklError::Config(format!("unknown plant '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plants.keys().map(String::as_str)
    }
}

/// Axis-aligned box `[lo, hi]` in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(KklError::InvalidArgument(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(KklError::InvalidArgument(format!(
                "box requires lo < hi componentwise, got {lo:?} / {hi:?}"
            )));
        }
        Ok(StateBox { lo, hi })
    }

    /// `[-r, r]^n`
    pub fn cube(dim: usize, r: f64) -> Result<Self> {
        StateBox::new(vec![-r; dim], vec![r; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn contains_box(&self, other: &StateBox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    /// Grows every side by `frac` of its width on both ends.
    pub fn inflate(&self, frac: f64) -> StateBox {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                let pad = frac * (h - l);
                (l - pad, h + pad)
            })
            .unzip();
        StateBox { lo, hi }
    }

    /// Grid step per axis for `grid` points per axis.
    pub fn spacing(&self, grid: usize) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l) / (grid.max(2) - 1) as f64)
            .collect()
    }

    /// Tensor grid with `grid` points per axis, endpoints included; the last axis varies fastest.
    pub fn grid_points(&self, grid: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let step = self.spacing(grid);
        let total = grid.pow(n as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; n];
                for d in (0..n).rev() {
                    let k = idx % grid;
                    idx /= grid;
                    p[d] = if k + 1 == grid {
                        self.hi[d]
                    } else {
                        self.lo[d] + k as f64 * step[d]
                    };
                }
                p
            })
            .collect()
    }
}

/// Sampled solution of a plant. Samples are stored in chronological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Output at each sample. For plant trajectories this is `h(state)`; for filter
    /// trajectories it is the driving measurement.
    pub outputs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (
            *self.times.first().unwrap_or(&f64::NAN),
            *self.times.last().unwrap_or(&f64::NAN),
        )
    }

    /// State stored at time `t`, if `t` is a sample time.
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        self.times
            .iter()
            .position(|&s| s == t)
            .map(|i| self.states[i].as_slice())
    }

    /// Output at time `t` by cubic Lagrange interpolation over the four nearest samples.
    /// Exact at sample times.
    pub fn sample_output(&self, t: f64) -> Result<f64> {
        let (start, end) = self.span();
        if self.is_empty() || !(t >= start && t <= end) {
            return Err(KklError::OutOfRange { t, start, end });
        }
        let n = self.len();
        // Index of the left node of the interval containing t.
        let right = self.times.partition_point(|&s| s <= t);
        if right > 0 && self.times[right - 1] == t {
            return Ok(self.outputs[right - 1]);
        }
        if n < 4 {
            // Linear fallback for very short trajectories.
            let i = right.clamp(1, n - 1);
            let (t0, t1) = (self.times[i - 1], self.times[i]);
            let s = (t - t0) / (t1 - t0);
            return Ok(self.outputs[i - 1] * (1.0 - s) + self.outputs[i] * s);
        }
        let left = right.saturating_sub(1);
        let first = left.saturating_sub(1).min(n - 4);
        let ts = &self.times[first..first + 4];
        let ys = &self.outputs[first..first + 4];
        let mut acc = 0.0;
        for i in 0..4 {
            let mut w = 1.0;
            for j in 0..4 {
                if i != j {
                    w *= (t - ts[j]) / (ts[i] - ts[j]);
                }
            }
            acc += w * ys[i];
        }
        Ok(acc)
    }
}

/// Flow of the plant from `x0` at `t0` to `t1` with fixed-step RK4 (backward when `t1 < t0`).
pub fn integrate_flow(
    system: &DynamicalSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory> {
    check_dim(system, x0)?;
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        outputs: Vec::new(),
    };
    ode::integrate(
        |_, x, dx| {
            system.field(x, dx);
            Ok(())
        },
        x0,
        t0,
        t1,
        dt,
        |t, x| {
            traj.times.push(t);
            traj.states.push(x.to_vec());
            traj.outputs.push(system.output(x));
        },
    )?;
    if t1 < t0 {
        traj.times.reverse();
        traj.states.reverse();
        traj.outputs.reverse();
    }
    Ok(traj)
}

/// End point `X(x0, t)` of the flow, without storing the path.
pub fn flow_endpoint(system: &DynamicalSystem, x0: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    check_dim(system, x0)?;
    ode::integrate(
        |_, x, dx| {
            system.field(x, dx);
            Ok(())
        },
        x0,
        0.0,
        t,
        dt,
        |_, _| {},
    )
}

fn check_dim(system: &DynamicalSystem, x: &[f64]) -> Result<()> {
    if x.len() != system.dim() {
        return Err(KklError::InvalidArgument(format!(
            "state has dimension {}, plant '{}' expects {}",
            x.len(),
            system.name(),
            system.dim()
        )));
    }
    Ok(())
}

/// Settings for derivatives along the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowStencil {
    /// Time spacing between stencil nodes.
    pub spacing: f64,
    /// Nodes on each side of the centre.
    pub half_width: usize,
    /// RK4 steps between consecutive nodes.
    pub substeps: usize,
}

impl Default for FlowStencil {
    fn default() -> Self {
        FlowStencil {
            spacing: 1e-2,
            half_width: 4,
            substeps: 10,
        }
    }
}

impl FlowStencil {
    pub fn with_spacing(spacing: f64) -> Self {
        FlowStencil {
            spacing,
            ..FlowStencil::default()
        }
    }
}

/// States `X(x, j * spacing)` for `j = -reach..=reach`.
pub(crate) fn flow_nodes(
    system: &DynamicalSystem,
    x: &[f64],
    reach: usize,
    cfg: &FlowStencil,
) -> Result<Vec<Vec<f64>>> {
    check_dim(system, x)?;
    let dt = cfg.spacing / cfg.substeps as f64;
    let mut nodes = vec![Vec::new(); 2 * reach + 1];
    nodes[reach] = x.to_vec();
    for dir in [1.0_f64, -1.0] {
        let mut state = x.to_vec();
        let mut w = ode::Rk4Work::new(x.len());
        let mut rhs = |_: f64, s: &[f64], d: &mut [f64]| {
            system.field(s, d);
            Ok(())
        };
        for j in 1..=reach {
            for _ in 0..cfg.substeps {
                ode::rk4_step(&mut rhs, 0.0, &mut state, dir * dt, &mut w)?;
            }
            if state.iter().any(|v| !v.is_finite()) {
                return Err(KklError::StencilOutOfDomain {
                    time: dir * j as f64 * cfg.spacing,
                });
            }
            let slot = if dir > 0.0 { reach + j } else { reach - j };
            nodes[slot] = state.clone();
        }
    }
    Ok(nodes)
}

/// `(h, L_f h, ..., L_f^{m-1} h)(x)`, taken as time derivatives of `t -> h(X(x, t))` at `t = 0`.
pub fn lie_derivatives(system: &DynamicalSystem, x: &[f64], order: usize, spacing: f64) -> Result<Vec<f64>> {
    lie_derivatives_with(system, x, order, &FlowStencil::with_spacing(spacing))
}

pub fn lie_derivatives_with(
    system: &DynamicalSystem,
    x: &[f64],
    order: usize,
    cfg: &FlowStencil,
) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(KklError::InvalidArgument("order must be positive".into()));
    }
    let mut out = vec![system.output(x)];
    if order == 1 {
        return Ok(out);
    }
    let hw = CentralStencil::half_width_for(order - 1, cfg.half_width);
    let stencil = CentralStencil::new(hw, cfg.spacing, order - 1);
    let nodes = flow_nodes(system, x, hw, cfg)?;
    let ys: Vec<f64> = nodes.iter().map(|s| system.output(s)).collect();
    for d in 1..order {
        out.push(stencil.apply(d, &ys));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// Tight bounding box of every visited state (including the initial grid).
    pub visited: StateBox,
    pub pass: bool,
    /// Grid points whose simulation became non-finite.
    pub diverged: usize,
    pub samples: usize,
}

/// Simulates every grid point of `initial` over `horizon` and checks that all visited states
/// stay in `domain`.
pub fn check_forward_invariance(
    system: &DynamicalSystem,
    initial: &StateBox,
    domain: &StateBox,
    horizon: f64,
    grid: usize,
    dt: f64,
) -> Result<InvarianceReport> {
    if !domain.contains_box(initial) {
        return Err(KklError::InvalidArgument(
            "initial box must lie inside the domain".into(),
        ));
    }
    let points = initial.grid_points(grid);
    let n = system.dim();
    let per_point: Vec<(Vec<f64>, Vec<f64>, bool)> = points
        .par_iter()
        .map(|x0| {
            let mut lo = x0.clone();
            let mut hi = x0.clone();
            let ok = ode::integrate(
                |_, x, dx| {
                    system.field(x, dx);
                    Ok(())
                },
                x0,
                0.0,
                horizon,
                dt,
                |_, x| {
                    for i in 0..n {
                        lo[i] = lo[i].min(x[i]);
                        hi[i] = hi[i].max(x[i]);
                    }
                },
            )
            .is_ok();
            (lo, hi, ok)
        })
        .collect();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut diverged = 0;
    for (l, h, ok) in &per_point {
        if !ok {
            diverged += 1;
        }
        for i in 0..n {
            lo[i] = lo[i].min(l[i]);
            hi[i] = hi[i].max(h[i]);
        }
    }
    let visited = StateBox { lo, hi };
    let pass = diverged == 0 && domain.contains_box(&visited);
    Ok(InvarianceReport {
        visited,
        pass,
        diverged,
        samples: points.len(),
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// Smallest ratio `|g(xa) - g(xb)| / |xa - xb|` over all pairs with `|xa - xb| >= min_sep`.
///
/// `points` holds `(x, g(x))` pairs. A positive result is an empirical Lipschitz-injectivity
/// constant at the sampled resolution.
pub fn injectivity_margin<A, B>(points: &[(A, B)], min_sep: f64) -> Result<f64>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    if !(min_sep > 0.0) {
        return Err(KklError::InvalidArgument("min_sep must be positive".into()));
    }
    if points.len() < 2 {
        return Err(KklError::Degenerate { min_sep });
    }
    let best = (0..points.len())
        .into_par_iter()
        .map(|a| {
            let (xa, ga) = (points[a].0.as_ref(), points[a].1.as_ref());
            let mut m = f64::INFINITY;
            for (xb, gb) in &points[a + 1..] {
                let dx = dist(xa, xb.as_ref());
                if dx >= min_sep {
                    m = m.min(dist(ga, gb.as_ref()) / dx);
                }
            }
            m
        })
        .reduce(|| f64::INFINITY, f64::min);
    if best.is_infinite() {
        return Err(KklError::Degenerate { min_sep });
    }
    Ok(best)
}
