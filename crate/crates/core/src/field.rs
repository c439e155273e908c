//! Vector-valued fields `u : R^n -> R^m`: analytic callbacks, grid samples
//! with multilinear interpolation, and the catalog of named test fields.
//! Fields are immutable after construction and evaluation is pure, so they
//! are safe to share across workers.

use crate::error::{Error, Result};
use crate::geometry::{Cell, Hyperbox};
use crate::quad::{kahan_sum, nodes_on_ball, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

pub type AnalyticFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type AnalyticGrad = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Default finite-difference step for [`Field::gradient_at`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;
/// Steps below this underflow the central difference.
pub const MIN_FD_STEP: f64 = 1e-12;

/// Extent of the default domain box for catalog fields.
const CATALOG_DOMAIN_HALF_WIDTH: f64 = 64.0;

enum FieldKind {
    Analytic(AnalyticFn),
    Grid(GridField),
}

/// Grid samples on a uniform lattice over a bounding box, evaluated by
/// multilinear interpolation; interpolation is exact at lattice nodes.
pub struct GridField {
    bounds: Hyperbox,
    shape: Vec<usize>,
    /// Node-major, components contiguous: `values[node * m + c]`.
    values: Vec<f64>,
    dim_out: usize,
}

impl GridField {
    fn node_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for (i, &v) in idx.iter().enumerate() {
            flat = flat * self.shape[i] + v;
        }
        flat * self.dim_out
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.bounds.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for i in 0..n {
            let cells = (self.shape[i] - 1) as f64;
            let t = ((x[i] - self.bounds.lo()[i]) / self.bounds.side(i) * cells)
                .clamp(0.0, cells);
            let b = (t.floor() as usize).min(self.shape[i] - 2);
            base[i] = b;
            frac[i] = t - b as f64;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut idx = vec![0usize; n];
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            for i in 0..n {
                if mask >> i & 1 == 1 {
                    idx[i] = base[i] + 1;
                    w *= frac[i];
                } else {
                    idx[i] = base[i];
                    w *= 1.0 - frac[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let start = self.node_index(&idx);
            for c in 0..self.dim_out {
                out[c] += w * self.values[start + c];
            }
        }
    }
}

/// An evaluable map `u : R^n -> R^m` with a domain box, optional analytic
/// Jacobian, and optional flagged singular points that quadrature refines
/// toward.
pub struct Field {
    dim_in: usize,
    dim_out: usize,
    kind: FieldKind,
    domain: Hyperbox,
    flagged: Vec<Vec<f64>>,
    grad: Option<AnalyticGrad>,
    name: String,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("name", &self.name)
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .finish()
    }
}

impl Field {
    /// Wraps an analytic callback.
    pub fn analytic(
        dim_in: usize,
        dim_out: usize,
        domain: Hyperbox,
        name: impl Into<String>,
        f: AnalyticFn,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 || domain.dim() != dim_in {
            return Err(Error::Shape("field dimensions must be positive and match the domain".into()));
        }
        Ok(Self {
            dim_in,
            dim_out,
            kind: FieldKind::Analytic(f),
            domain,
            flagged: Vec::new(),
            grad: None,
            name: name.into(),
        })
    }

    /// Grid field from node samples on a uniform lattice; `shape[i] >= 2`
    /// nodes per axis and `values.len() == prod(shape) * dim_out`.
    pub fn from_grid(
        bounds: Hyperbox,
        shape: Vec<usize>,
        values: Vec<f64>,
        dim_out: usize,
    ) -> Result<Self> {
        let n = bounds.dim();
        if shape.len() != n || shape.iter().any(|&s| s < 2) {
            return Err(Error::Parameter("grid shape needs at least 2 nodes per axis".into()));
        }
        let nodes: usize = shape.iter().product();
        if values.len() != nodes * dim_out {
            return Err(Error::Parameter(format!(
                "expected {} grid values, got {}",
                nodes * dim_out,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("grid values must be finite".into()));
        }
        Ok(Self {
            dim_in: n,
            dim_out,
            kind: FieldKind::Grid(GridField { bounds: bounds.clone(), shape, values, dim_out }),
            domain: bounds,
            flagged: Vec::new(),
            grad: None,
            name: "grid".into(),
        })
    }

    pub fn with_analytic_gradient(mut self, grad: AnalyticGrad) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn with_flagged_points(mut self, flags: Vec<Vec<f64>>) -> Self {
        self.flagged = flags;
        self
    }

    fn catalog_domain(n: usize) -> Hyperbox {
        Hyperbox::centered_cube(n, 2.0 * CATALOG_DOMAIN_HALF_WIDTH)
    }

    /// `l^A(x) = A x`.
    pub fn linear(a: DMatrix<f64>) -> Self {
        let (m, n) = (a.nrows(), a.ncols());
        let a_eval = a.clone();
        let a_grad = a.clone();
        Self {
            dim_in: n,
            dim_out: m,
            kind: FieldKind::Analytic(Arc::new(move |x, out| {
                for i in 0..m {
                    out[i] = (0..n).map(|j| a_eval[(i, j)] * x[j]).sum();
                }
            })),
            domain: Self::catalog_domain(n),
            flagged: Vec::new(),
            grad: Some(Arc::new(move |_| a_grad.clone())),
            name: format!("linear({m}x{n})"),
        }
    }

    pub fn constant(h: DVector<f64>, dim_in: usize) -> Self {
        let m = h.len();
        let h_eval = h.clone();
        Self {
            dim_in,
            dim_out: m,
            kind: FieldKind::Analytic(Arc::new(move |_, out| {
                out.copy_from_slice(h_eval.as_slice());
            })),
            domain: Self::catalog_domain(dim_in),
            flagged: Vec::new(),
            grad: Some(Arc::new(move |_| DMatrix::zeros(m, dim_in))),
            name: "constant".into(),
        }
    }

    /// `u(x) = (sin(pi x1) sin(pi x2), 0)` on the plane.
    pub fn sine2d() -> Self {
        use std::f64::consts::PI;
        Self {
            dim_in: 2,
            dim_out: 2,
            kind: FieldKind::Analytic(Arc::new(|x, out| {
                out[0] = (PI * x[0]).sin() * (PI * x[1]).sin();
                out[1] = 0.0;
            })),
            domain: Self::catalog_domain(2),
            flagged: Vec::new(),
            grad: Some(Arc::new(|x| {
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                        PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
                        0.0,
                        0.0,
                    ],
                )
            })),
            name: "sine2d".into(),
        }
    }

    /// Rigid motion `u(x) = A x + h` with `A` skew-symmetric.
    pub fn rigid(a_skew: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = a_skew.nrows();
        if a_skew.ncols() != n || h.len() != n {
            return Err(Error::Shape("rigid motion needs a square matrix and matching shift".into()));
        }
        let skew_dev = (&a_skew + a_skew.transpose()).norm();
        if skew_dev > 1e-12 * (1.0 + a_skew.norm()) {
            return Err(Error::Parameter("rigid motion matrix must be skew-symmetric".into()));
        }
        let a_eval = a_skew.clone();
        let h_eval = h.clone();
        let a_grad = a_skew.clone();
        Ok(Self {
            dim_in: n,
            dim_out: n,
            kind: FieldKind::Analytic(Arc::new(move |x, out| {
                for i in 0..n {
                    out[i] = h_eval[i] + (0..n).map(|j| a_eval[(i, j)] * x[j]).sum::<f64>();
                }
            })),
            domain: Self::catalog_domain(n),
            flagged: Vec::new(),
            grad: Some(Arc::new(move |_| a_grad.clone())),
            name: "rigid".into(),
        })
    }

    /// `u(x) = |x|^(-delta/p) e1` with `u(0) = 0`; the origin is flagged for
    /// adaptive quadrature since the field is defined only a.e.
    pub fn singular(delta: f64, p: f64, n: usize) -> Result<Self> {
        if !(delta > 0.0) || !(p >= 1.0) {
            return Err(Error::Parameter("singular field needs delta > 0 and p >= 1".into()));
        }
        let a = delta / p;
        let m = n;
        Ok(Self {
            dim_in: n,
            dim_out: m,
            kind: FieldKind::Analytic(Arc::new(move |x, out| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                out.iter_mut().for_each(|v| *v = 0.0);
                if r2 > 0.0 {
                    out[0] = r2.powf(-a / 2.0);
                }
            })),
            domain: Self::catalog_domain(n),
            flagged: vec![vec![0.0; n]],
            grad: Some(Arc::new(move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let mut g = DMatrix::zeros(m, n);
                if r2 > 0.0 {
                    let factor = -a * r2.powf(-a / 2.0 - 1.0);
                    for j in 0..n {
                        g[(0, j)] = factor * x[j];
                    }
                }
                g
            })),
            name: format!("singular(delta={delta},p={p})"),
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn domain(&self) -> &Hyperbox {
        &self.domain
    }

    pub fn flagged_points(&self) -> &[Vec<f64>] {
        &self.flagged
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Evaluation without the domain check, for quadrature nodes that are
    /// already known to lie inside a verified cell.
    pub fn eval_into_unchecked(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FieldKind::Analytic(f) => f(x, out),
            FieldKind::Grid(g) => g.eval_into(x, out),
        }
    }

    /// Evaluates the field at `x`, checking the domain box and finiteness.
    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim_in {
            return Err(Error::Shape(format!(
                "point dimension {} does not match field dimension {}",
                x.len(),
                self.dim_in
            )));
        }
        if !self.domain.contains_closed(x) {
            return Err(Error::Domain(format!("point {x:?} lies outside the field domain")));
        }
        let mut out = vec![0.0; self.dim_out];
        self.eval_into_unchecked(x, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("field value at {x:?} is not finite")));
        }
        Ok(DVector::from_vec(out))
    }

    /// Cell average `(1/|D'|) \int_{D'} u` by quadrature; exact for
    /// polynomial fields up to the rule degree.
    pub fn cell_mean(&self, cell: &Cell, rule: &QuadratureRule) -> Result<DVector<f64>> {
        if cell.dim() != self.dim_in {
            return Err(Error::Shape("cell dimension does not match the field".into()));
        }
        if !(cell.measure() > 0.0) {
            return Err(Error::Parameter("cell must have positive measure".into()));
        }
        let nodes = crate::quad::nodes_on_cell(cell, rule, &self.flagged)?;
        let mut sums = vec![0.0; self.dim_out];
        let mut carries = vec![0.0; self.dim_out];
        let mut buf = vec![0.0; self.dim_out];
        for q in 0..nodes.len() {
            self.eval_into_unchecked(nodes.point(q), &mut buf);
            let w = nodes.weight(q);
            for c in 0..self.dim_out {
                let y = w * buf[c] - carries[c];
                let t = sums[c] + y;
                carries[c] = (t - sums[c]) - y;
                sums[c] = t;
            }
        }
        let total = nodes.total_weight();
        let mean = DVector::from_iterator(self.dim_out, sums.iter().map(|s| s / total));
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cell mean overflowed or produced NaN".into()));
        }
        Ok(mean)
    }

    /// Central-difference Jacobian, `O(h^2)` for C^3 fields.
    pub fn gradient_fd(&self, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
        if h < MIN_FD_STEP {
            return Err(Error::Parameter(format!("step {h} underflows the central difference")));
        }
        let n = self.dim_in;
        let m = self.dim_out;
        let mut jac = DMatrix::zeros(m, n);
        let mut plus = vec![0.0; m];
        let mut minus = vec![0.0; m];
        let mut xp = x.to_vec();
        for j in 0..n {
            xp[j] = x[j] + h;
            if !self.domain.contains_closed(&xp) {
                return Err(Error::Domain("stencil point left the field domain".into()));
            }
            self.eval_into_unchecked(&xp, &mut plus);
            xp[j] = x[j] - h;
            if !self.domain.contains_closed(&xp) {
                return Err(Error::Domain("stencil point left the field domain".into()));
            }
            self.eval_into_unchecked(&xp, &mut minus);
            xp[j] = x[j];
            for i in 0..m {
                jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("finite-difference Jacobian is not finite".into()));
        }
        Ok(jac)
    }

    /// Analytic Jacobian when available, otherwise central differences.
    pub fn gradient_at(&self, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
        match &self.grad {
            Some(g) => Ok(g(x)),
            None => self.gradient_fd(x, h),
        }
    }

    /// Symmetric part `(J + J^T)/2` of the Jacobian; requires `m = n`.
    pub fn symmetric_gradient(&self, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
        if self.dim_in != self.dim_out {
            return Err(Error::Shape(format!(
                "symmetric gradient needs m = n, got m = {}, n = {}",
                self.dim_out, self.dim_in
            )));
        }
        let j = self.gradient_fd(x, h)?;
        Ok((&j + j.transpose()) * 0.5)
    }

    /// Convolution with the standard radial bump supported on the unit ball,
    /// evaluated by a cached quadrature over the kernel support. The discrete
    /// kernel weights are normalized to sum to exactly 1, so constants are
    /// preserved pointwise.
    pub fn mollify(&self, sigma: f64) -> Result<Field> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
        }
        let shrunk = self.domain.shrink(sigma).map_err(|_| {
            Error::Domain(format!("sigma {sigma} exceeds the distance to the domain boundary"))
        })?;
        let n = self.dim_in;
        let m = self.dim_out;
        let kernel = mollifier_kernel(n)?;
        let inner: AnalyticFn = match &self.kind {
            FieldKind::Analytic(f) => f.clone(),
            FieldKind::Grid(_) => {
                // Grid fields are cheap to re-wrap; the closure below borrows
                // nothing mutable so evaluation stays pure.
                let grid = match &self.kind {
                    FieldKind::Grid(g) => GridField {
                        bounds: g.bounds.clone(),
                        shape: g.shape.clone(),
                        values: g.values.clone(),
                        dim_out: g.dim_out,
                    },
                    _ => unreachable!(),
                };
                Arc::new(move |x, out| grid.eval_into(x, out))
            }
        };
        let eval: AnalyticFn = Arc::new(move |x, out| {
            let mut shifted = vec![0.0; x.len()];
            let mut buf = vec![0.0; out.len()];
            out.iter_mut().for_each(|v| *v = 0.0);
            for (point, w) in kernel.iter() {
                for i in 0..x.len() {
                    shifted[i] = x[i] - sigma * point[i];
                }
                inner(&shifted, &mut buf);
                for c in 0..out.len() {
                    out[c] += w * buf[c];
                }
            }
        });
        Ok(Field {
            dim_in: n,
            dim_out: m,
            kind: FieldKind::Analytic(eval),
            domain: shrunk,
            flagged: self.flagged.clone(),
            grad: None,
            name: format!("mollified({}, sigma={sigma})", self.name),
        })
    }
}

/// Quadrature nodes and normalized weights for the bump kernel
/// `c exp(-1/(1-|y|^2))` on the unit ball. Shared by all mollified fields of
/// the same dimension.
struct MollifierKernel {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl MollifierKernel {
    fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.iter().map(|p| p.as_slice()).zip(self.weights.iter().copied())
    }
}

fn mollifier_kernel(n: usize) -> Result<Arc<MollifierKernel>> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<MollifierKernel>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&n) {
        return Ok(hit.clone());
    }
    // Radial order 24 resolves the flat bump tails to ~1e-12; the final
    // normalization makes the discrete kernel an exact partition of unity.
    let nodes = nodes_on_ball(n, 1.0, 24)?;
    let mut points = Vec::with_capacity(nodes.len());
    let mut weights = Vec::with_capacity(nodes.len());
    for q in 0..nodes.len() {
        let p = nodes.point(q);
        let r2: f64 = p.iter().map(|v| v * v).sum();
        if r2 >= 1.0 {
            continue;
        }
        let w = nodes.weight(q) * (-1.0 / (1.0 - r2)).exp();
        points.push(p.to_vec());
        weights.push(w);
    }
    let total = kahan_sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    let kernel = Arc::new(MollifierKernel { points, weights });
    cache.lock().unwrap().insert(n, kernel.clone());
    Ok(kernel)
}
