//! Gauss-Legendre tensor quadrature on boxes, polar/spherical product rules
//! on balls, and dyadic refinement toward flagged singular points.

use crate::error::{Error, Result};
use crate::geometry::{Cell, CellShape, Hyperbox};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Quadrature configuration. `order` is the Gauss point count per axis on
/// box cells (exact for axis polynomials of degree `2*order - 1`);
/// `ball_samples` the radial point count of the polar/spherical product rule
/// on balls; `adaptive_depth` the number of dyadic refinement levels applied
/// toward flagged singular points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub order: usize,
    pub ball_samples: usize,
    pub adaptive_depth: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self { order: 5, ball_samples: 16, adaptive_depth: 0 }
    }
}

impl QuadratureRule {
    pub fn with_order(order: usize) -> Self {
        Self { order, ..Self::default() }
    }

    pub fn with_adaptive_depth(mut self, depth: usize) -> Self {
        self.adaptive_depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::Parameter("quadrature order must be at least 1".into()));
        }
        if self.ball_samples < 1 {
            return Err(Error::Parameter("ball_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// A flat list of quadrature nodes; weights sum to the measure of the set.
#[derive(Debug, Clone)]
pub struct QuadNodes {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadNodes {
    pub fn new(dim: usize) -> Self {
        Self { dim, points: Vec::new(), weights: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }

    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        kahan_sum(self.weights.iter().copied())
    }

    pub fn push(&mut self, point: &[f64], weight: f64) {
        debug_assert_eq!(point.len(), self.dim);
        self.points.extend_from_slice(point);
        self.weights.push(weight);
    }
}

/// Compensated (Kahan) summation in the iteration order.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Gauss-Legendre nodes and weights on `(-1, 1)`, cached per order.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&order) {
        return hit.clone();
    }
    let computed = compute_gauss_legendre(order);
    cache.lock().unwrap().insert(order, computed.clone());
    computed
}

/// Newton iteration on Legendre polynomials with the Chebyshev initial guess.
fn compute_gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product Gauss nodes on an axis-aligned box.
pub fn nodes_on_box(bx: &Hyperbox, order: usize) -> QuadNodes {
    let n = bx.dim();
    let (gl_x, gl_w) = gauss_legendre(order);
    let mut nodes = QuadNodes::new(n);
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0; n];
    loop {
        let mut w = 1.0;
        for i in 0..n {
            let half = 0.5 * bx.side(i);
            point[i] = bx.lo()[i] + half * (gl_x[idx[i]] + 1.0);
            w *= half * gl_w[idx[i]];
        }
        nodes.push(&point, w);
        let mut carry = true;
        for slot in idx.iter_mut() {
            if carry {
                *slot += 1;
                if *slot == order {
                    *slot = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    nodes
}

/// Tensor Gauss nodes with dyadic refinement toward flagged points. A box
/// whose closure contains a flag is split at its midpoint and the children
/// are re-examined with one level less; unflagged boxes receive the base
/// rule. Total node count stays below `order^n * 2^(n*depth)`.
pub fn nodes_on_box_adaptive(
    bx: &Hyperbox,
    order: usize,
    depth: usize,
    flags: &[&[f64]],
) -> QuadNodes {
    let mut nodes = QuadNodes::new(bx.dim());
    refine_box(bx, order, depth, flags, &mut nodes);
    nodes
}

fn box_touches_flag(bx: &Hyperbox, flags: &[&[f64]]) -> bool {
    flags.iter().any(|f| bx.contains_closed(f))
}

fn refine_box(bx: &Hyperbox, order: usize, depth: usize, flags: &[&[f64]], out: &mut QuadNodes) {
    if depth == 0 || !box_touches_flag(bx, flags) {
        let base = nodes_on_box(bx, order);
        for q in 0..base.len() {
            out.push(base.point(q), base.weight(q));
        }
        return;
    }
    let n = bx.dim();
    let mid = bx.center();
    for mask in 0..(1usize << n) {
        let mut lo = bx.lo().to_vec();
        let mut hi = bx.hi().to_vec();
        for i in 0..n {
            if mask >> i & 1 == 1 {
                lo[i] = mid[i];
            } else {
                hi[i] = mid[i];
            }
        }
        let child = Hyperbox::new(lo, hi).expect("splitting preserves validity");
        refine_box(&child, order, depth - 1, flags, out);
    }
}

/// Polar (n = 2) or spherical (n = 3) product rule on the centered ball of
/// radius `r`; n = 1 falls back to Gauss on the interval. The radial factor
/// absorbs the Jacobian so weights sum to the ball volume; the angular grid
/// is symmetric under point reflection, which kills odd moments exactly.
pub fn nodes_on_ball(n: usize, radius: f64, radial: usize) -> Result<QuadNodes> {
    let mut nodes = QuadNodes::new(n);
    let (gl_x, gl_w) = gauss_legendre(radial.max(2));
    match n {
        1 => {
            for (x, w) in gl_x.iter().zip(&gl_w) {
                nodes.push(&[radius * x], radius * w);
            }
        }
        2 => {
            let k_theta = (4 * radial.max(2)).max(8);
            let dtheta = std::f64::consts::TAU / k_theta as f64;
            for (s, ws) in gl_x.iter().zip(&gl_w) {
                // r = R sqrt(t), t in (0,1): dx = (R^2/2) dt dtheta.
                let t = 0.5 * (s + 1.0);
                let r = radius * t.sqrt();
                let wr = 0.5 * ws * radius * radius / 2.0;
                for k in 0..k_theta {
                    let theta = dtheta * (k as f64 + 0.5);
                    nodes.push(&[r * theta.cos(), r * theta.sin()], wr * dtheta);
                }
            }
        }
        3 => {
            let k_phi = (2 * radial.max(2)).max(4);
            let k_theta = 2 * k_phi;
            let (mu_x, mu_w) = gauss_legendre(k_phi);
            let dtheta = std::f64::consts::TAU / k_theta as f64;
            for (s, ws) in gl_x.iter().zip(&gl_w) {
                // r = R t^(1/3), t in (0,1): r^2 dr = (R^3/3) dt.
                let t = 0.5 * (s + 1.0);
                let r = radius * t.cbrt();
                let wr = 0.5 * ws * radius.powi(3) / 3.0;
                for (mu, wmu) in mu_x.iter().zip(&mu_w) {
                    let sin_phi = (1.0 - mu * mu).sqrt();
                    for k in 0..k_theta {
                        let theta = dtheta * (k as f64 + 0.5);
                        nodes.push(
                            &[r * sin_phi * theta.cos(), r * sin_phi * theta.sin(), r * mu],
                            wr * wmu * dtheta,
                        );
                    }
                }
            }
        }
        _ => {
            return Err(Error::Parameter(format!(
                "ball quadrature supports n <= 3, got n = {n}"
            )))
        }
    }
    Ok(nodes)
}

/// Quadrature nodes on a transformed cell. Reference-space nodes are mapped
/// through `x = eps R xi + h` with weights scaled by `eps^n` (rotations have
/// unit Jacobian). Flags are pulled back to reference coordinates, so
/// refinement follows the singular point through the transform.
pub fn nodes_on_cell(cell: &Cell, rule: &QuadratureRule, flags: &[Vec<f64>]) -> Result<QuadNodes> {
    rule.validate()?;
    let n = cell.dim();
    let ref_flags: Vec<Vec<f64>> = flags
        .iter()
        .map(|f| cell.to_reference(f).as_slice().to_vec())
        .collect();
    let flag_refs: Vec<&[f64]> = ref_flags.iter().map(|v| v.as_slice()).collect();

    let reference_nodes = match cell.reference().shape() {
        CellShape::UnitCube => {
            let bx = Hyperbox::centered_cube(n, 1.0);
            nodes_on_box_adaptive(&bx, rule.order, rule.adaptive_depth, &flag_refs)
        }
        CellShape::Box(sides) => {
            let lo: Vec<f64> = sides.iter().map(|s| -s / 2.0).collect();
            let hi: Vec<f64> = sides.iter().map(|s| s / 2.0).collect();
            let bx = Hyperbox::new(lo, hi)?;
            nodes_on_box_adaptive(&bx, rule.order, rule.adaptive_depth, &flag_refs)
        }
        CellShape::Ball(r) => nodes_on_ball(n, *r, rule.ball_samples)?,
    };

    let scale = cell.epsilon().powi(n as i32);
    let mut out = QuadNodes::new(n);
    for q in 0..reference_nodes.len() {
        let x = cell.from_reference(reference_nodes.point(q));
        out.push(x.as_slice(), reference_nodes.weight(q) * scale);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_cell, rotation_2d, ReferenceCell};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // Order k is exact through degree 2k - 1.
        for order in 1..=10 {
            let (x, w) = gauss_legendre(order);
            let degree = 2 * order - 1;
            let value: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(degree as i32)).sum();
            let exact = if degree % 2 == 0 { 2.0 / (degree as f64 + 1.0) } else { 0.0 };
            assert_relative_eq!(value, exact, epsilon = 1e-13);
            let total: f64 = w.iter().sum();
            assert_relative_eq!(total, 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn box_rule_weights_sum_to_measure() {
        let bx = Hyperbox::new(vec![0.0, -1.0], vec![2.0, 3.0]).unwrap();
        let nodes = nodes_on_box(&bx, 5);
        assert_relative_eq!(nodes.total_weight(), 8.0, epsilon = 1e-12);
    }

    #[test]
    fn box_rule_exact_for_low_degree() {
        // integral of x^2 over Q = (-1/2,1/2)^2 is 1/12.
        let bx = Hyperbox::centered_cube(2, 1.0);
        let nodes = nodes_on_box(&bx, 5);
        let value: f64 =
            (0..nodes.len()).map(|q| nodes.weight(q) * nodes.point(q)[0].powi(2)).sum();
        assert_relative_eq!(value, 1.0 / 12.0, epsilon = 1e-14);
    }

    #[test]
    fn adaptive_refinement_keeps_total_weight() {
        let bx = Hyperbox::centered_cube(2, 1.0);
        let origin = [0.0, 0.0];
        let nodes = nodes_on_box_adaptive(&bx, 5, 4, &[&origin]);
        assert_relative_eq!(nodes.total_weight(), 1.0, epsilon = 1e-12);
        assert!(nodes.len() <= 5usize.pow(2) * 2usize.pow(2 * 4));
    }

    #[test]
    fn adaptive_refinement_improves_singular_integral() {
        // integral over (0,1)^2 of |x|^(-1) (integrable, corner singularity).
        let bx = Hyperbox::unit(2);
        let origin = [0.0, 0.0];
        let f = |p: &[f64]| (p[0] * p[0] + p[1] * p[1]).sqrt().recip();
        let coarse = nodes_on_box(&bx, 8);
        let fine = nodes_on_box_adaptive(&bx, 8, 10, &[&origin]);
        let approx_with = |nodes: &QuadNodes| -> f64 {
            (0..nodes.len()).map(|q| nodes.weight(q) * f(nodes.point(q))).sum()
        };
        // Exact value 2 ln(1 + sqrt 2) ~ 1.76275.
        let exact = 2.0 * (1.0 + 2.0_f64.sqrt()).ln();
        assert!((approx_with(&fine) - exact).abs() < (approx_with(&coarse) - exact).abs());
        assert!((approx_with(&fine) - exact).abs() < 2e-4);
    }

    #[test]
    fn ball_rule_weights_sum_to_volume() {
        let nodes2 = nodes_on_ball(2, 1.5, 8).unwrap();
        assert_relative_eq!(
            nodes2.total_weight(),
            std::f64::consts::PI * 1.5 * 1.5,
            epsilon = 1e-10
        );
        let nodes3 = nodes_on_ball(3, 0.7, 8).unwrap();
        assert_relative_eq!(
            nodes3.total_weight(),
            4.0 / 3.0 * std::f64::consts::PI * 0.7_f64.powi(3),
            epsilon = 1e-10
        );
    }

    #[test]
    fn ball_rule_kills_odd_moments() {
        let nodes = nodes_on_ball(2, 1.0, 8).unwrap();
        let mx: f64 = (0..nodes.len()).map(|q| nodes.weight(q) * nodes.point(q)[0]).sum();
        let my: f64 = (0..nodes.len()).map(|q| nodes.weight(q) * nodes.point(q)[1]).sum();
        assert!(mx.abs() < 1e-12 && my.abs() < 1e-12);
    }

    #[test]
    fn cell_nodes_follow_the_transform() {
        let q = ReferenceCell::unit_cube(2);
        let rot = rotation_2d(0.3);
        let cell = make_cell(q, 0.5, rot, DVector::from_row_slice(&[1.0, 2.0])).unwrap();
        let rule = QuadratureRule::default();
        let nodes = nodes_on_cell(&cell, &rule, &[]).unwrap();
        assert_relative_eq!(nodes.total_weight(), 0.25, epsilon = 1e-12);
        for qi in 0..nodes.len() {
            assert!(cell.contains(nodes.point(qi)));
        }
    }

    #[test]
    fn cell_mean_of_coordinates_is_barycenter() {
        let q = ReferenceCell::unit_cube(2);
        let cell = make_cell(
            q,
            0.25,
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[0.375, 0.625]),
        )
        .unwrap();
        let nodes = nodes_on_cell(&cell, &QuadratureRule::default(), &[]).unwrap();
        let total = nodes.total_weight();
        for i in 0..2 {
            let m: f64 = (0..nodes.len()).map(|qq| nodes.weight(qq) * nodes.point(qq)[i]).sum();
            assert_relative_eq!(m / total, cell.barycenter()[i], epsilon = 1e-13);
        }
    }
}
