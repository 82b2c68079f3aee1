//! Asymptotic expansion of the immersion in powers of `1/lambda`: the `phi_l` recursion, the
//! truncated map `T_a`, its Vandermonde assembly for a whole bank, and empirical checks of the
//! `lambda^-m` residual laws.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction::{solve_psi, solve_psi_from, ContractionMap, PSI_TOL};
use crate::dynsys::{flow_endpoint, flow_nodes, integrate_flow, DynamicalSystem, FlowStencil, StateBox};
use crate::error::{KklError, Result};
use crate::filterbank::{cosimulate, FilterBank};
use crate::fit::log_log_slope;
use crate::stencil::CentralStencil;

/// Slope gate half-width for scaling studies.
pub const SLOPE_BAND: f64 = 0.3;
/// Washout used by [`numeric_t`] is `NUMERIC_T_WASHOUT / (alpha lambda)`.
pub const NUMERIC_T_WASHOUT: f64 = 30.0;

/// Ordered tuples `(l_1, ..., l_j)` with every part in `[1, l - 1]` summing to `l`, in
/// lexicographic order.
pub fn compositions(l: usize, j: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if l < 2 || j == 0 || j > l {
        return out;
    }
    let mut cur = Vec::with_capacity(j);
    compose(l, j, l - 1, &mut cur, &mut out);
    out
}

fn compose(rest: usize, parts: usize, max_part: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 0 {
        if rest == 0 {
            out.push(cur.clone());
        }
        return;
    }
    // Remaining parts need at least one unit each.
    let hi = max_part.min(rest.saturating_sub(parts - 1));
    for p in 1..=hi {
        cur.push(p);
        compose(rest - p, parts - 1, max_part, cur, out);
        cur.pop();
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// The coefficients `phi_0, ..., phi_{m-1}` of the expansion for one plant and one contraction.
#[derive(Clone)]
pub struct PhiFamily {
    system: DynamicalSystem,
    cm: ContractionMap,
    m: usize,
    stencil: FlowStencil,
    /// `compositions(l, j)` for `1 <= j <= l <= m`.
    comps: Vec<Vec<Vec<Vec<usize>>>>,
}

impl std::fmt::Debug for PhiFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhiFamily")
            .field("system", &self.system.name())
            .field("cm", &self.cm.name())
            .field("m", &self.m)
            .field("stencil", &self.stencil)
            .finish()
    }
}

/// Values of `phi_0..phi_top` along a sampled flow line through `x`.
struct NodeLevels {
    reach: usize,
    /// `levels[l][reach + j]` is `phi_l(X(x, j h))`; NaN outside that level's reach.
    levels: Vec<Vec<f64>>,
}

impl NodeLevels {
    fn at(&self, l: usize, j: isize) -> f64 {
        self.levels[l][(self.reach as isize + j) as usize]
    }

    fn window(&self, l: usize, p: usize) -> &[f64] {
        &self.levels[l][self.reach - p..=self.reach + p]
    }
}

impl PhiFamily {
    pub fn new(system: DynamicalSystem, cm: ContractionMap, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(KklError::InvalidArgument("expansion order must be at least 1".into()));
        }
        let comps = (0..=m)
            .map(|l| (0..=l).map(|j| compositions(l, j)).collect())
            .collect();
        Ok(PhiFamily {
            system,
            cm,
            m,
            stencil: FlowStencil::default(),
            comps,
        })
    }

    pub fn with_stencil(mut self, stencil: FlowStencil) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn system(&self) -> &DynamicalSystem {
        &self.system
    }

    pub fn contraction(&self) -> &ContractionMap {
        &self.cm
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn stencil(&self) -> &FlowStencil {
        &self.stencil
    }

    fn central(&self) -> CentralStencil {
        CentralStencil::new(self.stencil.half_width, self.stencil.spacing, 1)
    }

    /// Computes `phi_0..=phi_top` on the flow line through `x`, with `phi_l` known on
    /// `p * (top - l + extra)` nodes either side of `x`.
    fn levels(&self, x: &[f64], top: usize, extra: usize) -> Result<NodeLevels> {
        let p = self.stencil.half_width;
        let reach = p * (top + extra);
        let nodes = flow_nodes(&self.system, x, reach, &self.stencil)?;
        let width = 2 * reach + 1;
        let mut levels = vec![vec![f64::NAN; width]; top + 1];
        let ys: Vec<f64> = nodes.iter().map(|s| self.system.output(s)).collect();

        // phi_0 = psi(h), warm-started along the line (h varies slowly between nodes).
        let mid = solve_psi(&self.cm, ys[reach], PSI_TOL)?;
        levels[0][reach] = mid;
        for dir in [1isize, -1] {
            let mut prev = mid;
            for j in 1..=reach as isize {
                let i = (reach as isize + dir * j) as usize;
                prev = solve_psi_from(&self.cm, ys[i], prev, PSI_TOL)?;
                levels[0][i] = prev;
            }
        }

        let stencil = self.central();
        for l in 1..=top {
            let r = p * (top - l + extra);
            for i in reach - r..=reach + r {
                let lf = stencil.apply(1, &levels[l - 1][i - p..=i + p]);
                let (psi, y) = (levels[0][i], ys[i]);
                let mut acc = lf;
                for j in 1..=l {
                    let mut s = 0.0;
                    for c in &self.comps[l][j] {
                        s += c.iter().map(|&li| levels[li][i]).product::<f64>();
                    }
                    if s != 0.0 {
                        acc -= self.cm.z_partial(j, psi, y) / factorial(j) * s;
                    }
                }
                levels[l][i] = acc / self.cm.dsigma_dz(psi, y);
            }
        }
        Ok(NodeLevels { reach, levels })
    }

    /// `phi_l(x)` for `0 <= l < m`.
    pub fn eval_phi(&self, x: &[f64], l: usize) -> Result<f64> {
        if l >= self.m {
            return Err(KklError::InvalidArgument(format!("phi index {l} needs order > {l}, have {}", self.m)));
        }
        Ok(self.levels(x, l, 0)?.at(l, 0))
    }

    /// `(phi_0(x), ..., phi_{m-1}(x))`.
    pub fn eval_phis(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lv = self.levels(x, self.m - 1, 0)?;
        Ok((0..self.m).map(|l| lv.at(l, 0)).collect())
    }

    /// `L_f phi_l(x)` for `0 <= l < m`.
    pub fn lie_phi(&self, x: &[f64], l: usize) -> Result<f64> {
        if l >= self.m {
            return Err(KklError::InvalidArgument(format!("phi index {l} out of range")));
        }
        let lv = self.levels(x, l, 1)?;
        Ok(self.central().apply(1, lv.window(l, self.stencil.half_width)))
    }

    /// `T_a(x, lambda) = sum_l phi_l(x) / lambda^l`.
    pub fn eval_ta(&self, x: &[f64], lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        Ok(series(&self.eval_phis(x)?, lambda))
    }

    /// `L_f T_a(x, lambda)` as the time derivative of `t -> T_a(X(x, t), lambda)` at 0, each
    /// node evaluated independently.
    pub fn lie_ta(&self, x: &[f64], lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let p = self.stencil.half_width;
        let nodes = flow_nodes(&self.system, x, p, &self.stencil)?;
        let vals = nodes
            .iter()
            .map(|s| self.eval_ta(s, lambda))
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.central().apply(1, &vals))
    }
}

fn series(phis: &[f64], lambda: f64) -> f64 {
    // Horner in 1/lambda.
    phis.iter().rev().fold(0.0, |acc, p| acc / lambda + p)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(KklError::SignError(format!("lambda must be positive, got {lambda}")))
    }
}

/// Vandermonde assembly of `T_a` for a bank of gains `k lambda_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionEval {
    pub lambdas: Vec<f64>,
    pub k: f64,
    /// `v[(i, j)] = lambda_i^-j`.
    pub v: DMatrix<f64>,
    /// Diagonal of `K = diag(1, k, ..., k^{m-1})`.
    pub k_diag: DVector<f64>,
    pub cond_v: f64,
}

impl ExpansionEval {
    pub fn m(&self) -> usize {
        self.lambdas.len()
    }

    pub fn v_inverse(&self) -> Result<DMatrix<f64>> {
        self.v
            .clone()
            .try_inverse()
            .ok_or_else(|| KklError::InvalidArgument("Vandermonde matrix is singular".into()))
    }
}

pub fn vandermonde(lambdas: &[f64], k: f64) -> Result<ExpansionEval> {
    if lambdas.is_empty() {
        return Err(KklError::InvalidArgument("no gains given".into()));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(KklError::SignError(format!("global gain must be positive, got {k}")));
    }
    for (i, a) in lambdas.iter().enumerate() {
        if lambdas[..i].contains(a) {
            return Err(KklError::DuplicateLambda(*a));
        }
    }
    let m = lambdas.len();
    let v = DMatrix::from_fn(m, m, |i, j| lambdas[i].powi(-(j as i32)));
    let k_diag = DVector::from_fn(m, |j, _| k.powi(j as i32));
    let sv = v.clone().svd(false, false).singular_values;
    let cond_v = sv.max() / sv.min();
    Ok(ExpansionEval {
        lambdas: lambdas.to_vec(),
        k,
        v,
        k_diag,
        cond_v,
    })
}

/// `V K^-1 (phi_0, ..., phi_{m-1})(x)`; component `i` equals `T_a(x, k lambda_i)`.
pub fn eval_bold_ta(fam: &PhiFamily, ev: &ExpansionEval, x: &[f64]) -> Result<Vec<f64>> {
    if ev.m() != fam.m() {
        return Err(KklError::InvalidArgument(format!(
            "bank of {} filters against expansion order {}",
            ev.m(),
            fam.m()
        )));
    }
    let phi = DVector::from_vec(fam.eval_phis(x)?);
    let scaled = phi.component_div(&ev.k_diag);
    Ok((&ev.v * scaled).iter().copied().collect())
}

/// `omega(x, lambda) = (L_f T_a - lambda sigma(T_a, h)) / lambda`.
pub fn residual_omega(fam: &PhiFamily, x: &[f64], lambda: f64) -> Result<f64> {
    let lf = fam.lie_ta(x, lambda)?;
    let ta = fam.eval_ta(x, lambda)?;
    let y = fam.system().output(x);
    Ok((lf - lambda * fam.contraction().sigma(ta, y)) / lambda)
}

/// Polynomial in `u` with coefficients lowest degree first; products drop degrees above `deg`.
fn poly_mul_trunc(a: &[f64], b: &[f64], deg: usize) -> Vec<f64> {
    let mut out = vec![0.0; deg + 1];
    for (i, ai) in a.iter().enumerate().take(deg + 1) {
        if *ai == 0.0 {
            continue;
        }
        for (j, bj) in b.iter().enumerate().take(deg + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// `[p^j]` truncated to degrees `<= deg`.
pub fn truncated_power(p: &[f64], j: usize, deg: usize) -> Vec<f64> {
    let mut out = vec![0.0; deg + 1];
    out[0] = 1.0;
    for _ in 0..j {
        out = poly_mul_trunc(&out, p, deg);
    }
    out
}

/// Right-hand side of the identity
/// `L_f T_a = lambda sum_{j=1}^{m-1} sigma^(j)/j! [(sum_{l>=1} phi_l u^l)^j]_{<= m-1} + L_f phi_{m-1} u^{m-1}`
/// with `u = 1/lambda`, the truncation done on exact coefficient vectors.
pub fn lemma_rhs(fam: &PhiFamily, x: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let m = fam.m();
    let phis = fam.eval_phis(x)?;
    let y = fam.system().output(x);
    let deg = m - 1;
    let mut tail = phis.clone();
    tail[0] = 0.0;
    let mut poly = vec![0.0; deg + 1];
    for j in 1..m {
        let c = fam.contraction().z_partial(j, phis[0], y) / factorial(j);
        for (acc, v) in poly.iter_mut().zip(truncated_power(&tail, j, deg)) {
            *acc += c * v;
        }
    }
    let u = 1.0 / lambda;
    let main = lambda * poly.iter().rev().fold(0.0, |acc, c| acc * u + c);
    Ok(main + fam.lie_phi(x, m - 1)? * u.powi(deg as i32))
}

/// `|L_f T_a - RHS|`, with the left side from the flow stencil over independent `T_a` evaluations.
pub fn verify_lemma_lfta(fam: &PhiFamily, x: &[f64], lambda: f64) -> Result<f64> {
    Ok((fam.lie_ta(x, lambda)? - lemma_rhs(fam, x, lambda)?).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericTOptions {
    /// Defaults to `30 / (alpha lambda)`.
    pub washout: Option<f64>,
    pub dt: f64,
    /// Backward leg must stay inside this box inflated by 10%.
    pub domain: Option<StateBox>,
}

impl Default for NumericTOptions {
    fn default() -> Self {
        NumericTOptions {
            washout: None,
            dt: 1e-3,
            domain: None,
        }
    }
}

/// Bounded solution of `L_f T = lambda sigma(T, h)` at `x`: the plant is run backward for the
/// washout, then the scalar filter is run forward from `psi(h)` at that point.
pub fn numeric_t(fam: &PhiFamily, x: &[f64], lambda: f64, opts: &NumericTOptions) -> Result<f64> {
    check_lambda(lambda)?;
    let alpha = fam.contraction().bounds().alpha;
    let tw = opts.washout.unwrap_or(NUMERIC_T_WASHOUT / (alpha * lambda));
    let system = fam.system();
    let start = match &opts.domain {
        Some(domain) => {
            let limit = domain.inflate(0.1);
            let traj = integrate_flow(system, x, 0.0, -tw, opts.dt)
                .map_err(|_| KklError::BackwardEscape { time: -tw })?;
            if let Some(i) = traj.states.iter().rposition(|s| !limit.contains(s)) {
                return Err(KklError::BackwardEscape { time: traj.times[i] });
            }
            traj.states[0].clone()
        }
        None => flow_endpoint(system, x, -tw, opts.dt).map_err(|e| match e {
            KklError::NonFinite { time } => KklError::BackwardEscape { time },
            e => e,
        })?,
    };
    let bank = FilterBank::nonlinear(vec![fam.contraction().clone()], vec![lambda], 1.0)?;
    let z0 = solve_psi(fam.contraction(), system.output(&start), PSI_TOL)?;
    let (_, z) = cosimulate(system, &bank, &start, &[z0], -tw, 0.0, opts.dt, None, |_, _, _| {})?;
    Ok(z[0])
}

/// `R(x, lambda) = T(x, lambda) - T_a(x, lambda)`.
pub fn residual_r(fam: &PhiFamily, x: &[f64], lambda: f64, opts: &NumericTOptions) -> Result<f64> {
    Ok(numeric_t(fam, x, lambda, opts)? - fam.eval_ta(x, lambda)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingQuantity {
    #[serde(rename = "omega")]
    Omega,
    R,
}

impl FromStr for ScalingQuantity {
    type Err = KklError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(ScalingQuantity::Omega),
            "R" | "r" => Ok(ScalingQuantity::R),
            _ => Err(KklError::InvalidArgument(format!("unknown quantity {s:?}, expected omega or R"))),
        }
    }
}

impl std::fmt::Display for ScalingQuantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalingQuantity::Omega => "omega",
            ScalingQuantity::R => "R",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub quantity: ScalingQuantity,
    pub lambdas_tested: Vec<f64>,
    pub norms: Vec<f64>,
    pub fitted_slope: f64,
    pub target_slope: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub report: ScalingReport,
    /// Smallest tested lambda from which the slope gate passes on the remaining gains.
    pub lambda_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOptions {
    pub numeric_t: NumericTOptions,
    /// Norms below ten times this value are treated as numerical noise.
    pub error_floor: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            numeric_t: NumericTOptions::default(),
            error_floor: 1e-10,
        }
    }
}

fn check_lambdas_for_fit(lambdas: &[f64]) -> Result<()> {
    if lambdas.len() < 4 {
        return Err(KklError::InvalidArgument("scaling fit needs at least 4 gains".into()));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    Ok(())
}

fn slope_report(
    quantity: ScalingQuantity,
    m: usize,
    lambdas: &[f64],
    norms: Vec<f64>,
    floor: f64,
) -> Result<ScalingReport> {
    for (&l, &n) in lambdas.iter().zip(&norms) {
        if !(n >= 10.0 * floor) {
            return Err(KklError::NormUnderflow { lambda: l, norm: n });
        }
    }
    let slope = log_log_slope(lambdas, &norms)
        .ok_or_else(|| KklError::InvalidArgument("degenerate gain set for slope fit".into()))?;
    let target = -(m as f64);
    Ok(ScalingReport {
        quantity,
        lambdas_tested: lambdas.to_vec(),
        norms,
        fitted_slope: slope,
        target_slope: target,
        pass: (slope - target).abs() <= SLOPE_BAND,
    })
}

fn quantity_at(fam: &PhiFamily, q: ScalingQuantity, x: &[f64], lambda: f64, opts: &ScalingOptions) -> Result<f64> {
    match q {
        ScalingQuantity::Omega => residual_omega(fam, x, lambda),
        ScalingQuantity::R => residual_r(fam, x, lambda, &opts.numeric_t),
    }
}

/// Max over `xs` of `|omega|` or `|R|` per gain, with the log-log slope checked against `-m`.
pub fn scaling_study(
    fam: &PhiFamily,
    quantity: ScalingQuantity,
    xs: &[Vec<f64>],
    lambdas: &[f64],
    opts: &ScalingOptions,
) -> Result<ScalingReport> {
    check_lambdas_for_fit(lambdas)?;
    if xs.is_empty() {
        return Err(KklError::InvalidArgument("no sample points".into()));
    }
    let norms = lambdas
        .iter()
        .map(|&l| {
            let vals = xs
                .par_iter()
                .map(|x| quantity_at(fam, quantity, x, l, opts).map(f64::abs))
                .collect::<Result<Vec<f64>>>()?;
            Ok(vals.into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    slope_report(quantity, fam.m(), lambdas, norms, opts.error_floor)
}

/// Slope of the largest Lipschitz quotient `|R(a) - R(b)| / |a - b|` over `pairs`.
pub fn lipschitz_study(
    fam: &PhiFamily,
    pairs: &[(Vec<f64>, Vec<f64>)],
    lambdas: &[f64],
    opts: &ScalingOptions,
) -> Result<LipschitzReport> {
    check_lambdas_for_fit(lambdas)?;
    if pairs.is_empty() {
        return Err(KklError::InvalidArgument("no sample pairs".into()));
    }
    let norms = lambdas
        .iter()
        .map(|&l| {
            let q = pairs
                .par_iter()
                .map(|(a, b)| {
                    let sep = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                    if sep == 0.0 {
                        return Err(KklError::Degenerate { min_sep: 0.0 });
                    }
                    let ra = residual_r(fam, a, l, &opts.numeric_t)?;
                    let rb = residual_r(fam, b, l, &opts.numeric_t)?;
                    Ok((ra - rb).abs() / sep)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(q.into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let report = slope_report(ScalingQuantity::R, fam.m(), lambdas, norms, opts.error_floor)?;
    let target = report.target_slope;
    let lambda_floor = (0..lambdas.len().saturating_sub(2)).find_map(|i| {
        log_log_slope(&lambdas[i..], &report.norms[i..])
            .filter(|s| (s - target).abs() <= SLOPE_BAND)
            .map(|_| lambdas[i])
    });
    Ok(LipschitzReport { report, lambda_floor })
}
