//! Central finite-difference stencils on a uniform grid.

/// Finite-difference weights for derivatives at `x0` from values at `nodes` (Fornberg's algorithm).
///
/// Returns `w` with `w[d][j]` the weight of node `j` for the derivative of order `d`,
/// for every `d <= max_order`.
pub fn fornberg_weights(x0: f64, nodes: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    if n == 0 {
        return c;
    }
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Symmetric stencil with `half_width` points on each side of the centre and spacing `h`.
#[derive(Debug, Clone)]
pub struct CentralStencil {
    pub half_width: usize,
    pub h: f64,
    /// `weights[d]` has `2 * half_width + 1` entries, ordered from `-half_width` to `+half_width`.
    weights: Vec<Vec<f64>>,
}

impl CentralStencil {
    pub fn new(half_width: usize, h: f64, max_order: usize) -> Self {
        let offsets: Vec<f64> = (-(half_width as i64)..=half_width as i64)
            .map(|j| j as f64)
            .collect();
        // Unit spacing weights, rescaled by h^-d on use.
        let weights = fornberg_weights(0.0, &offsets, max_order);
        CentralStencil {
            half_width,
            h,
            weights,
        }
    }

    /// Smallest half-width that keeps a central stencil for derivative `order` at least 4th-order accurate.
    pub fn half_width_for(order: usize, minimum: usize) -> usize {
        minimum.max((order + 4).div_ceil(2))
    }

    pub fn max_order(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Derivative of order `d` at the centre from `values` sampled at the stencil nodes.
    pub fn apply(&self, d: usize, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let s: f64 = self.weights[d]
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .sum();
        s / self.h.powi(d as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_three_point_weights() {
        let w = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(w[1], vec![-0.5, 0.0, 0.5]);
        assert_eq!(w[2], vec![1.0, -2.0, 1.0]);
    }

    #[test]
    fn nine_point_first_derivative() {
        // Standard 8th-order central weights.
        let w = fornberg_weights(0.0, &[-4., -3., -2., -1., 0., 1., 2., 3., 4.], 1);
        let expected = [
            1.0 / 280.0,
            -4.0 / 105.0,
            1.0 / 5.0,
            -4.0 / 5.0,
            0.0,
            4.0 / 5.0,
            -1.0 / 5.0,
            4.0 / 105.0,
            -1.0 / 280.0,
        ];
        for (a, b) in w[1].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exp_derivatives() {
        let st = CentralStencil::new(4, 1e-2, 3);
        let vals: Vec<f64> = (-4..=4).map(|j| (0.3 + j as f64 * 1e-2_f64).exp()).collect();
        for d in 0..=3 {
            assert!((st.apply(d, &vals) - 0.3_f64.exp()).abs() < 1e-8, "order {d}");
        }
    }

    #[test]
    fn half_width_grows_with_order() {
        assert_eq!(CentralStencil::half_width_for(1, 4), 4);
        assert_eq!(CentralStencil::half_width_for(6, 4), 5);
    }
}
