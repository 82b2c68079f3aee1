//! Scalar contraction maps `sigma(z, y)` with `-beta <= d sigma/dz <= -alpha < 0` and
//! `|d sigma/dy| >= gamma > 0`, their implicit zero `psi(y)` and the factor `kappa(y)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KklError, Result};

/// Default absolute tolerance on `|sigma(psi, y)|`.
pub const PSI_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
const TANH_MAX_ORDER: usize = 24;

type Scalar2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Partial = Arc<dyn Fn(usize, f64, f64) -> f64 + Send + Sync>;

/// Built-in contraction maps as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContractionSpec {
    Linear { a: f64 },
    TanhBlend { a_fast: f64, a_slow: f64 },
}

impl ContractionSpec {
    pub fn build(&self) -> Result<ContractionMap> {
        match *self {
            ContractionSpec::Linear { a } => ContractionMap::linear(a),
            ContractionSpec::TanhBlend { a_fast, a_slow } => ContractionMap::tanh_blend(a_fast, a_slow),
        }
    }
}

/// Bounds a contraction map claims to satisfy everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredBounds {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone)]
pub struct ContractionMap {
    name: String,
    sigma: Scalar2,
    dsigma_dz: Scalar2,
    dsigma_dy: Scalar2,
    z_partial: Partial,
    bounds: DeclaredBounds,
    spec: Option<ContractionSpec>,
}

impl fmt::Debug for ContractionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContractionMap")
            .field("name", &self.name)
            .field("bounds", &self.bounds)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl ContractionMap {
    /// User-supplied map. `z_partial(j, z, y)` must return the `j`-th partial derivative in `z`
    /// (`j = 0` is `sigma` itself).
    pub fn custom<S, Dz, Dy, P>(
        name: impl Into<String>,
        sigma: S,
        dsigma_dz: Dz,
        dsigma_dy: Dy,
        z_partial: P,
        bounds: DeclaredBounds,
    ) -> Result<Self>
    where
        S: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Dz: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        Dy: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        P: Fn(usize, f64, f64) -> f64 + Send + Sync + 'static,
    {
        if !(bounds.alpha > 0.0 && bounds.alpha <= bounds.beta && bounds.gamma > 0.0) {
            return Err(KklError::InvalidArgument(format!(
                "declared bounds must satisfy 0 < alpha <= beta and gamma > 0, got {bounds:?}"
            )));
        }
        Ok(ContractionMap {
            name: name.into(),
            sigma: Arc::new(sigma),
            dsigma_dz: Arc::new(dsigma_dz),
            dsigma_dy: Arc::new(dsigma_dy),
            z_partial: Arc::new(z_partial),
            bounds,
            spec: None,
        })
    }

    /// `sigma(z, y) = a (z - y)` with `a < 0`.
    pub fn linear(a: f64) -> Result<Self> {
        if !(a < 0.0) {
            return Err(KklError::SignError(format!("linear slope must be negative, got {a}")));
        }
        let mut cm = ContractionMap::custom(
            format!("linear({a})"),
            move |z, y| a * (z - y),
            move |_, _| a,
            move |_, _| -a,
            move |j, z, y| match j {
                0 => a * (z - y),
                1 => a,
                _ => 0.0,
            },
            DeclaredBounds {
                alpha: -a,
                beta: -a,
                gamma: -a,
            },
        )?;
        cm.spec = Some(ContractionSpec::Linear { a });
        Ok(cm)
    }

    /// `sigma(z, y) = a_fast (z - y) + (a_slow - a_fast) tanh(z - y)` with `a_fast < a_slow < 0`.
    ///
    /// Behaves like the slow slope near `z = y` and like the fast slope far from it.
    pub fn tanh_blend(a_fast: f64, a_slow: f64) -> Result<Self> {
        if !(a_fast < a_slow && a_slow < 0.0) {
            return Err(KklError::SignError(format!(
                "tanh blend needs a_fast < a_slow < 0, got a_fast = {a_fast}, a_slow = {a_slow}"
            )));
        }
        let gap = a_slow - a_fast;
        let polys = Arc::new(tanh_derivative_polys(TANH_MAX_ORDER));
        let mut cm = ContractionMap::custom(
            format!("tanh_blend({a_fast}, {a_slow})"),
            move |z, y| {
                let d = z - y;
                a_fast * d + gap * d.tanh()
            },
            move |z, y| {
                let t = (z - y).tanh();
                a_fast + gap * (1.0 - t * t)
            },
            move |z, y| {
                let t = (z - y).tanh();
                -a_fast - gap * (1.0 - t * t)
            },
            move |j, z, y| {
                let d = z - y;
                match j {
                    0 => a_fast * d + gap * d.tanh(),
                    1 => {
                        let t = d.tanh();
                        a_fast + gap * (1.0 - t * t)
                    }
                    _ => {
                        let t = d.tanh();
                        let p = if j < polys.len() {
                            eval_poly(&polys[j], t)
                        } else {
                            eval_poly(&tanh_derivative_polys(j)[j], t)
                        };
                        gap * p
                    }
                }
            },
            DeclaredBounds {
                alpha: -a_slow,
                beta: -a_fast,
                gamma: -a_slow,
            },
        )?;
        cm.spec = Some(ContractionSpec::TanhBlend { a_fast, a_slow });
        Ok(cm)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bounds(&self) -> DeclaredBounds {
        self.bounds
    }

    pub fn spec(&self) -> Option<ContractionSpec> {
        self.spec
    }

    #[inline]
    pub fn sigma(&self, z: f64, y: f64) -> f64 {
        (self.sigma)(z, y)
    }

    #[inline]
    pub fn dsigma_dz(&self, z: f64, y: f64) -> f64 {
        (self.dsigma_dz)(z, y)
    }

    #[inline]
    pub fn dsigma_dy(&self, z: f64, y: f64) -> f64 {
        (self.dsigma_dy)(z, y)
    }

    /// `j`-th partial derivative of sigma with respect to `z`.
    #[inline]
    pub fn z_partial(&self, j: usize, z: f64, y: f64) -> f64 {
        (self.z_partial)(j, z, y)
    }
}

/// Coefficients (lowest degree first) of the polynomials `P_n` with `d^n/dx^n tanh x = P_n(tanh x)`.
fn tanh_derivative_polys(max_order: usize) -> Vec<Vec<f64>> {
    let mut polys = vec![vec![0.0, 1.0]];
    for n in 0..max_order {
        let p = &polys[n];
        // derivative of p in t, times (1 - t^2)
        let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect();
        let mut next = vec![0.0; dp.len() + 2];
        for (k, c) in dp.iter().enumerate() {
            next[k] += c;
            next[k + 2] -= c;
        }
        polys.push(next);
    }
    polys
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub gamma_hat: f64,
    pub pass: bool,
    pub sample_count: usize,
    pub z_range: (f64, f64),
    pub y_range: (f64, f64),
}

/// Samples the partial derivatives of `cm` on a grid and compares them with its declared bounds.
pub fn estimate_bounds(
    cm: &ContractionMap,
    z_range: (f64, f64),
    y_range: (f64, f64),
    grid: (usize, usize),
) -> BoundsReport {
    let (gz, gy) = (grid.0.max(2), grid.1.max(2));
    let mut max_dz = f64::NEG_INFINITY;
    let mut min_dz = f64::INFINITY;
    let mut min_dy = f64::INFINITY;
    for i in 0..gz {
        let z = z_range.0 + (z_range.1 - z_range.0) * i as f64 / (gz - 1) as f64;
        for j in 0..gy {
            let y = y_range.0 + (y_range.1 - y_range.0) * j as f64 / (gy - 1) as f64;
            let dz = cm.dsigma_dz(z, y);
            max_dz = max_dz.max(dz);
            min_dz = min_dz.min(dz);
            min_dy = min_dy.min(cm.dsigma_dy(z, y).abs());
        }
    }
    let b = cm.bounds();
    let alpha_hat = -max_dz;
    let beta_hat = -min_dz;
    let pass = max_dz < 0.0
        && alpha_hat >= b.alpha * (1.0 - 1e-6)
        && beta_hat <= b.beta * (1.0 + 1e-6)
        && min_dy >= b.gamma * (1.0 - 1e-6);
    BoundsReport {
        alpha_hat,
        beta_hat,
        gamma_hat: min_dy,
        pass,
        sample_count: gz * gy,
        z_range,
        y_range,
    }
}

/// Unique zero `psi(y)` of `z -> sigma(z, y)`, searched from `z = y`.
pub fn solve_psi(cm: &ContractionMap, y: f64, tol: f64) -> Result<f64> {
    solve_psi_from(cm, y, y, tol)
}

/// As [`solve_psi`], but the bracket search starts at `start`.
pub fn solve_psi_from(cm: &ContractionMap, y: f64, start: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(KklError::InvalidArgument("tolerance must be positive".into()));
    }
    let s0 = cm.sigma(start, y);
    if s0.abs() <= tol {
        return Ok(start);
    }
    // sigma decreases in z: positive value means the root lies above.
    let dir = s0.signum();
    let reach = 1e6 / cm.bounds().alpha;
    let mut near = start;
    let mut step = 1.0;
    let far = loop {
        let cand = start + dir * step;
        let s = cm.sigma(cand, y);
        if s.abs() <= tol {
            return Ok(cand);
        }
        if s.signum() != dir {
            break cand;
        }
        near = cand;
        if step > reach {
            return Err(KklError::BracketFailure { y, reach });
        }
        step *= 2.0;
    };
    let (mut lo, mut hi) = if near < far { (near, far) } else { (far, near) };

    let mut z = 0.5 * (lo + hi);
    for _ in 0..NEWTON_MAX_ITER {
        let s = cm.sigma(z, y);
        if s.abs() <= tol {
            return Ok(z);
        }
        if s > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let slope = cm.dsigma_dz(z, y);
        let newton = z - s / slope;
        z = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    // Bisection fallback.
    loop {
        let s = cm.sigma(z, y);
        if s.abs() <= tol {
            return Ok(z);
        }
        if s > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return Ok(z);
        }
        z = mid;
    }
}

/// `kappa(y) = 1 / (d sigma/dz)(psi(y), y)`.
pub fn kappa(cm: &ContractionMap, y: f64) -> Result<f64> {
    let psi = solve_psi(cm, y, PSI_TOL)?;
    Ok(1.0 / cm.dsigma_dz(psi, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic_target() -> ContractionMap {
        // sigma(z, y) = -z + y^3, root z = y^3.
        ContractionMap::custom(
            "cubic",
            |z, y| -z + y * y * y,
            |_, _| -1.0,
            |_, y| 3.0 * y * y,
            |j, z, y| match j {
                0 => -z + y * y * y,
                1 => -1.0,
                _ => 0.0,
            },
            DeclaredBounds {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1e-3,
            },
        )
        .unwrap()
    }

    #[test]
    fn linear_basics() {
        let cm = ContractionMap::linear(-1.0).unwrap();
        assert_eq!(cm.sigma(3.0, 1.0), -2.0);
        assert_eq!(ContractionMap::linear(-5.0).unwrap().dsigma_dz(0.3, 9.0), -5.0);
        assert_eq!(ContractionMap::linear(-0.5).unwrap().z_partial(2, 1.0, 2.0), 0.0);
        assert!(matches!(ContractionMap::linear(0.0), Err(KklError::SignError(_))));
    }

    #[test]
    fn tanh_blend_slopes() {
        let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        for y in [-3.0, 0.0, 1.7] {
            assert_eq!(cm.sigma(y, y), 0.0);
            assert!((cm.dsigma_dz(y, y) + 0.5).abs() < 1e-15);
        }
        assert!((cm.dsigma_dz(40.0, 0.0) + 5.0).abs() < 1e-12);
        assert!(ContractionMap::tanh_blend(-0.5, -5.0).is_err());
        assert!(ContractionMap::tanh_blend(-5.0, 0.5).is_err());
    }

    #[test]
    fn tanh_polys_known_values() {
        let p = tanh_derivative_polys(3);
        // tanh'' = -2t + 2t^3, tanh''' = -2 + 8t^2 - 6t^4
        assert_eq!(p[2], vec![0.0, -2.0, 0.0, 2.0]);
        assert_eq!(p[3], vec![-2.0, 0.0, 8.0, 0.0, -6.0]);
    }

    #[test]
    fn bounds_of_builtins() {
        let rep = estimate_bounds(&ContractionMap::linear(-1.0).unwrap(), (-3.0, 3.0), (-3.0, 3.0), (11, 11));
        assert!(rep.pass);
        assert_eq!((rep.alpha_hat, rep.beta_hat, rep.gamma_hat), (1.0, 1.0, 1.0));

        let cm = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        let rep = estimate_bounds(&cm, (-10.0, 10.0), (0.0, 0.0), (2001, 2));
        assert!(rep.pass);
        assert!((rep.alpha_hat - 0.5).abs() < 1e-3);
        assert!((rep.beta_hat - 5.0).abs() < 1e-3);
    }

    #[test]
    fn anti_contraction_fails_bounds() {
        let cm = ContractionMap::custom(
            "anti",
            |z, y| z - y,
            |_, _| 1.0,
            |_, _| -1.0,
            |j, z, y| if j == 0 { z - y } else if j == 1 { 1.0 } else { 0.0 },
            DeclaredBounds {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
            },
        )
        .unwrap();
        assert!(!estimate_bounds(&cm, (-1.0, 1.0), (-1.0, 1.0), (5, 5)).pass);
    }

    #[test]
    fn psi_examples() {
        let tb = ContractionMap::tanh_blend(-5.0, -0.5).unwrap();
        assert_eq!(solve_psi(&tb, 1.3, PSI_TOL).unwrap(), 1.3);
        assert_eq!(solve_psi(&ContractionMap::linear(-2.0).unwrap(), 7.0, PSI_TOL).unwrap(), 7.0);
        let psi = solve_psi(&cubic_target(), 2.0, PSI_TOL).unwrap();
        assert!((psi - 8.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(&ContractionMap::linear(-1.0).unwrap(), 0.3).unwrap(), -1.0);
        assert_eq!(kappa(&ContractionMap::linear(-4.0).unwrap(), 0.3).unwrap(), -0.25);
        let k = kappa(&ContractionMap::tanh_blend(-5.0, -0.5).unwrap(), -1.0).unwrap();
        assert!((k + 2.0).abs() < 1e-14);
    }

    #[test]
    fn bracket_failure_on_rootless_map() {
        let cm = ContractionMap::custom(
            "offset",
            |_, _| 1.0,
            |_, _| -1.0,
            |_, _| 1.0,
            |j, _, _| if j == 0 { 1.0 } else { 0.0 },
            DeclaredBounds {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
            },
        )
        .unwrap();
        assert!(matches!(solve_psi(&cm, 0.0, 1e-12), Err(KklError::BracketFailure { .. })));
    }

    #[test]
    fn spec_round_trip_through_json() {
        let spec: ContractionSpec = serde_json::from_str(r#"{"kind":"tanh_blend","a_fast":-5,"a_slow":-0.5}"#).unwrap();
        assert_eq!(spec, ContractionSpec::TanhBlend { a_fast: -5.0, a_slow: -0.5 });
        assert_eq!(spec.build().unwrap().spec(), Some(spec));
        let lin: ContractionSpec = serde_json::from_str(r#"{"kind":"linear","a":-5}"#).unwrap();
        assert_eq!(lin, ContractionSpec::Linear { a: -5.0 });
    }
}
