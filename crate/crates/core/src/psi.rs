//! The limit integrand `psi(A)`: generic evaluation through the functional
//! on the reference cell, closed forms for the documented p = 2 cases, the
//! isotropic eigenvalue reduction, null-space detection with the associated
//! projection, and the direction-maximized moment constants `gamma(n, p)`.

use crate::error::{Error, Result};
use crate::field::{Field, DEFAULT_FD_STEP};
use crate::functionals::{operator_norm, CoreFunctional, Variant};
use crate::geometry::{make_cell, Hyperbox, ReferenceCell, RotationGroup};
use crate::quad::{gauss_legendre, kahan_sum, nodes_on_box_adaptive, nodes_on_cell, QuadratureRule};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Preferred evaluation route for `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiMode {
    /// Closed form where documented, generic otherwise.
    ClosedForm,
    /// Always the max over group elements of the functional on the
    /// reference cell.
    Generic,
    /// Reduce to singular values and evaluate the scalar integrand.
    IsoEigen,
}

/// Whether generic evaluation is exact or only an upper bound of the true
/// integrand (non-tessellating reference cells).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiExactness {
    Exact,
    UpperBoundOnly,
}

/// Cached geometric moments of the reference cell about its barycenter.
#[derive(Debug, Clone)]
pub struct CellMoments {
    pub measure: f64,
    /// Normalized second moments `(1/|D|) \int_D y y^T dy`.
    pub second: DMatrix<f64>,
}

/// Evaluates `psi(A)` for one functional, reference cell and rotation
/// group. Immutable after construction; evaluations are pure.
#[derive(Debug, Clone)]
pub struct PsiEvaluator {
    functional: CoreFunctional,
    reference: ReferenceCell,
    group: RotationGroup,
    mode: PsiMode,
    rule: QuadratureRule,
    moments: CellMoments,
}

impl PsiEvaluator {
    pub fn new(
        functional: CoreFunctional,
        reference: ReferenceCell,
        group: RotationGroup,
        mode: PsiMode,
    ) -> Result<Self> {
        if group.dim() != reference.dim() {
            return Err(Error::Shape("group and reference cell dimensions differ".into()));
        }
        if functional.variant.requires_square() && functional.m != reference.dim() {
            return Err(Error::Shape("skew variants need m = n".into()));
        }
        let rule = QuadratureRule::default();
        let moments = compute_moments(&reference, &rule)?;
        Ok(Self { functional, reference, group, mode, rule, moments })
    }

    pub fn functional(&self) -> &CoreFunctional {
        &self.functional
    }

    pub fn reference(&self) -> &ReferenceCell {
        &self.reference
    }

    pub fn group(&self) -> &RotationGroup {
        &self.group
    }

    pub fn moments(&self) -> &CellMoments {
        &self.moments
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.functional.m, self.reference.dim())
    }

    pub fn exactness(&self) -> PsiExactness {
        if self.reference.tessellates() {
            PsiExactness::Exact
        } else {
            PsiExactness::UpperBoundOnly
        }
    }

    /// `(1/|D|) max_{R in G} alpha_p(l^{A R}, D)`: the integrand evaluated
    /// through the functional itself. Exact under the no-gaps tessellation
    /// property; an upper bound for ball references.
    pub fn psi_generic(&self, a: &DMatrix<f64>) -> Result<f64> {
        let (m, n) = self.expect_dims(a)?;
        let cell = make_cell(
            self.reference.clone(),
            1.0,
            DMatrix::identity(n, n),
            DVector::zeros(n),
        )?;
        let mut best = 0.0_f64;
        for rot in self.group.elements() {
            let composed = a * rot;
            let field = Field::linear(composed);
            let value = self.functional.alpha_eval(&field, &cell, &self.rule)?;
            best = best.max(value);
        }
        debug_assert_eq!(m, self.functional.m);
        Ok(best / self.moments.measure)
    }

    /// Closed forms from the cached second moments; `None` for undocumented
    /// (variant, shape, p) triples. Documented: mean oscillation and the
    /// infimum-over-constants twin at p = 2 on boxes, the double integral at
    /// p = 2 on boxes, the skew infimum at p = 2 on cubes (where the
    /// minimizer is the skew part), and the identically-zero variants.
    pub fn psi_closed_form(&self, a: &DMatrix<f64>) -> Option<f64> {
        self.expect_dims(a).ok()?;
        closed_form_value(
            &self.functional.variant,
            self.functional.p,
            &self.reference,
            &self.group,
            &self.moments,
            a,
        )
    }

    /// The evaluator's preferred route.
    pub fn psi_value(&self, a: &DMatrix<f64>) -> Result<f64> {
        match self.mode {
            PsiMode::ClosedForm => match self.psi_closed_form(a) {
                Some(v) => Ok(v),
                None => self.psi_generic(a),
            },
            PsiMode::Generic => self.psi_generic(a),
            PsiMode::IsoEigen => {
                let scalar = self.scalar_counterpart()?;
                psi_iso_eigen(|lambda| scalar.psi_generic(lambda), a)
            }
        }
    }

    /// The m = 1 evaluator of the same variant, used by the eigenvalue
    /// reduction. Only target-space-isotropic variants reduce this way.
    pub fn scalar_counterpart(&self) -> Result<PsiEvaluator> {
        match self.functional.variant {
            Variant::MeanOscillation | Variant::InfConstant | Variant::DoubleIntegral => {
                let functional =
                    CoreFunctional::new(self.functional.variant.clone(), self.functional.p, 1)?
                        .with_solver(self.functional.solver.clone());
                PsiEvaluator::new(
                    functional,
                    self.reference.clone(),
                    self.group.clone(),
                    PsiMode::Generic,
                )
            }
            _ => Err(Error::Parameter(
                "eigenvalue reduction applies to target-isotropic variants only".into(),
            )),
        }
    }

    fn expect_dims(&self, a: &DMatrix<f64>) -> Result<(usize, usize)> {
        let (m, n) = (self.functional.m, self.reference.dim());
        if a.nrows() != m || a.ncols() != n {
            return Err(Error::Shape(format!(
                "matrix must be {m} x {n}, got {} x {}",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok((m, n))
    }

    /// `\int_Omega psi(X(x)) dx` where `X` is the gradient, its projection,
    /// or the symmetric part. Serves as the oracle side of the convergence
    /// checks. Panels refine dyadically toward the field's flagged points.
    pub fn limit_integral(
        &self,
        u: &Field,
        ambient: &Hyperbox,
        source: GradientSource<'_>,
        panels_per_axis: usize,
    ) -> Result<f64> {
        let n = self.reference.dim();
        if ambient.dim() != n || u.dim_in() != n {
            return Err(Error::Shape("ambient and field dimensions must match".into()));
        }
        if matches!(source, GradientSource::Symmetric) && u.dim_out() != n {
            return Err(Error::Shape("the symmetric source needs m = n".into()));
        }
        let panels = panels_per_axis.max(1);
        let flags: Vec<Vec<f64>> = u.flagged_points().to_vec();
        let panel_boxes = split_box(ambient, panels);
        let partials: Result<Vec<f64>> = panel_boxes
            .par_iter()
            .map(|panel| -> Result<f64> {
                let flag_refs: Vec<&[f64]> = flags.iter().map(|f| f.as_slice()).collect();
                let nodes = nodes_on_box_adaptive(
                    panel,
                    self.rule.order,
                    self.rule.adaptive_depth,
                    &flag_refs,
                );
                let mut acc = 0.0;
                for q in 0..nodes.len() {
                    let x = nodes.point(q);
                    let jac = u.gradient_at(x, DEFAULT_FD_STEP)?;
                    let target = match source {
                        GradientSource::Full => jac,
                        GradientSource::Symmetric => (&jac + jac.transpose()) * 0.5,
                        GradientSource::Projected(report) => report.project(&jac),
                    };
                    acc += nodes.weight(q) * self.psi_value(&target)?;
                }
                Ok(acc)
            })
            .collect();
        let partials = partials?;
        let total = kahan_sum(partials.into_iter());
        if !total.is_finite() {
            return Err(Error::Numeric("limit integral overflowed".into()));
        }
        Ok(total)
    }

    /// Detects the null space of `psi` among the splits the catalog
    /// produces (zero, skew, row annihilator of the direction set, full),
    /// builds the complementary projection, and samples the positivity
    /// constant on the complement's unit sphere.
    pub fn estimate_null_space(&self, tol: f64) -> Result<SubspaceReport> {
        if !(tol > 0.0) {
            return Err(Error::Parameter("tolerance must be positive".into()));
        }
        let (m, n) = self.dims();
        let psi = |mat: &DMatrix<f64>| self.psi_generic(mat);

        let mut candidates: Vec<(NullSpaceKind, Vec<DMatrix<f64>>)> = Vec::new();
        candidates.push((NullSpaceKind::Full, canonical_basis(m, n)));
        if let Variant::DirectionalSup(dirs) = &self.functional.variant {
            if let Some(basis) = row_annihilator_basis(m, n, dirs) {
                candidates.push((NullSpaceKind::RowAnnihilator(orthonormal_span(dirs, m)), basis));
            }
        }
        if m == n {
            candidates.push((NullSpaceKind::Skew, skew_basis(n)));
        }
        candidates.push((NullSpaceKind::Zero, Vec::new()));
        candidates.sort_by(|a, b| b.1.len().cmp(&a.1.len()));

        let mut detected: Option<(NullSpaceKind, Vec<DMatrix<f64>>)> = None;
        for (kind, basis) in candidates {
            let all_null = basis
                .iter()
                .map(|e| psi(e))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .all(|v| v <= tol);
            if all_null {
                detected = Some((kind, basis));
                break;
            }
        }
        let (kind, null_basis) = detected.expect("the zero candidate always passes");

        // Random combinations of the basis must stay null, otherwise the
        // split-aligned detection was fooled.
        if !null_basis.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
            for _ in 0..20 {
                let mut combo = DMatrix::zeros(m, n);
                for e in &null_basis {
                    combo += e * rng.gen_range(-1.0..1.0_f64);
                }
                let norm = operator_norm(&combo);
                if norm < 1e-12 {
                    continue;
                }
                combo /= norm;
                let v = psi(&combo)?;
                if v > 10.0 * tol {
                    return Err(Error::Structure(format!(
                        "basis elements are null but a combination reaches psi = {v:.3e} \
                         (combination {combo:?})"
                    )));
                }
            }
        }

        let p_basis = complement_basis(&kind, m, n);
        let report = SubspaceReport {
            kind,
            m,
            n,
            null_basis,
            p_basis,
            min_on_unit_sphere: 0.0,
        };

        // Positivity constant: minimum of psi over unit-operator-norm
        // samples of the complement, including its basis directions and
        // rank-one extremes where the minimum of convex p-homogeneous
        // integrands is attained.
        let mut c_min = f64::INFINITY;
        if report.p_basis.is_empty() {
            return Ok(SubspaceReport { min_on_unit_sphere: 0.0, ..report });
        }
        let mut samples: Vec<DMatrix<f64>> = Vec::new();
        samples.extend(report.p_basis.iter().cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        while samples.len() < 200 + report.p_basis.len() {
            let mut combo = DMatrix::zeros(m, n);
            for e in &report.p_basis {
                combo += e * rng.gen_range(-1.0..1.0_f64);
            }
            samples.push(combo);
        }
        // Rank-one candidates projected into the complement.
        for _ in 0..40 {
            let u = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-1.0..1.0_f64)));
            let v = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.0..1.0_f64)));
            samples.push(report.project(&(u * v.transpose())));
        }
        for sample in samples {
            let norm = operator_norm(&sample);
            if norm < 1e-10 {
                continue;
            }
            let scaled = sample / norm;
            let v = psi(&report.project(&scaled))?;
            c_min = c_min.min(v);
        }
        if !c_min.is_finite() {
            return Err(Error::Structure("no usable samples on the complement sphere".into()));
        }
        Ok(SubspaceReport { min_on_unit_sphere: c_min, ..report })
    }

    /// Max violations of homogeneity, midpoint convexity, null-translation
    /// invariance and the triangle inequality of `psi^(1/p)`, plus the
    /// observed Lipschitz ratio on the unit ball.
    pub fn psi_property_check(
        &self,
        trials: usize,
        seed: u64,
        null_space: Option<&SubspaceReport>,
    ) -> Result<PsiPropertyReport> {
        if trials < 1 {
            return Err(Error::Parameter("trials must be at least 1".into()));
        }
        let (m, n) = self.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor = 1e-12;
        let p = self.functional.p;
        let mut report = PsiPropertyReport {
            p_homogeneity: 0.0,
            convexity: 0.0,
            translation_null: 0.0,
            triangle_root: 0.0,
            lipschitz_ratio: 0.0,
            trials,
        };
        let owned;
        let null_report = match null_space {
            Some(r) => r,
            None => {
                owned = self.estimate_null_space(default_null_tolerance(self)?)?;
                &owned
            }
        };
        for _ in 0..trials {
            let a = random_matrix(m, n, &mut rng);
            let b = random_matrix(m, n, &mut rng);
            let psi_a = self.psi_value(&a)?;
            let psi_b = self.psi_value(&b)?;

            for t in [-2.0, -1.0, 0.5] {
                let lhs = self.psi_value(&(&a * t))?;
                let rhs = f64::abs(t).powf(p) * psi_a;
                report.p_homogeneity =
                    report.p_homogeneity.max((lhs - rhs).abs() / (1.0 + rhs.abs()));
            }

            let mid = self.psi_value(&((&a + &b) * 0.5))?;
            let bound = 0.5 * (psi_a + psi_b);
            report.convexity =
                report.convexity.max((mid - bound).max(0.0) / (1.0 + bound.abs()));

            if !null_report.null_basis.is_empty() {
                let mut shift = DMatrix::zeros(m, n);
                for e in &null_report.null_basis {
                    shift += e * rng.gen_range(-1.0..1.0_f64);
                }
                let lhs = self.psi_value(&(&a + shift))?;
                report.translation_null =
                    report.translation_null.max((lhs - psi_a).abs() / (1.0 + psi_a.abs()));
            }

            let root_sum = self.psi_value(&(&a + &b))?.powf(1.0 / p);
            let rhs = psi_a.powf(1.0 / p) + psi_b.powf(1.0 / p);
            report.triangle_root =
                report.triangle_root.max((root_sum - rhs).max(0.0) / (1.0 + rhs.abs()));

            // Lipschitz ratio on the unit operator-norm ball (reported, not
            // thresholded; finiteness is the property).
            let na = operator_norm(&a).max(1e-9);
            let nb = operator_norm(&b).max(1e-9);
            let au = &a / na;
            let bu = &b / nb;
            let d = operator_norm(&(&au - &bu));
            if d > 1e-9 {
                let ratio = (self.psi_value(&au)? - self.psi_value(&bu)?).abs() / d;
                report.lipschitz_ratio = report.lipschitz_ratio.max(ratio);
            }
        }
        Ok(report)
    }
}

/// What the limit integrand is applied to inside [`PsiEvaluator::limit_integral`].
#[derive(Clone, Copy)]
pub enum GradientSource<'a> {
    Full,
    Projected(&'a SubspaceReport),
    Symmetric,
}

/// Detected split of the matrix space.
#[derive(Debug, Clone)]
pub enum NullSpaceKind {
    /// `N = {0}`.
    Zero,
    /// Skew-symmetric matrices (complement: symmetric).
    Skew,
    /// Matrices killing the span of the direction set from the left.
    RowAnnihilator(Vec<DVector<f64>>),
    /// The whole space (the integrand vanishes identically).
    Full,
}

/// Estimated null space of `psi`, a complement basis, the projection onto
/// the complement and the sampled positivity constant on its unit sphere.
#[derive(Debug, Clone)]
pub struct SubspaceReport {
    pub kind: NullSpaceKind,
    pub m: usize,
    pub n: usize,
    pub null_basis: Vec<DMatrix<f64>>,
    pub p_basis: Vec<DMatrix<f64>>,
    pub min_on_unit_sphere: f64,
}

impl SubspaceReport {
    pub fn null_dim(&self) -> usize {
        self.null_basis.len()
    }

    pub fn complement_dim(&self) -> usize {
        self.p_basis.len()
    }

    /// The projection onto the complement along the null space. The
    /// catalog's splits are Frobenius-orthogonal, so this is the orthogonal
    /// projector.
    pub fn project(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            NullSpaceKind::Zero => a.clone(),
            NullSpaceKind::Full => DMatrix::zeros(self.m, self.n),
            NullSpaceKind::Skew => (a + a.transpose()) * 0.5,
            NullSpaceKind::RowAnnihilator(span) => {
                let mut proj = DMatrix::zeros(self.m, self.n);
                for s in span {
                    proj += s * (s.transpose() * a);
                }
                proj
            }
        }
    }
}

/// Default detection tolerance scaled by the magnitude of `psi` on the
/// canonical basis.
pub fn default_null_tolerance(ev: &PsiEvaluator) -> Result<f64> {
    let (m, n) = ev.dims();
    let basis = canonical_basis(m, n);
    let mut mean = 0.0;
    for e in &basis {
        mean += ev.psi_generic(e)?;
    }
    mean /= basis.len() as f64;
    Ok(1e-9 * mean.max(1.0))
}

#[derive(Debug, Clone)]
pub struct PsiPropertyReport {
    pub p_homogeneity: f64,
    pub convexity: f64,
    pub translation_null: f64,
    pub triangle_root: f64,
    pub lipschitz_ratio: f64,
    pub trials: usize,
}

impl PsiPropertyReport {
    pub fn max_violation(&self) -> f64 {
        [self.p_homogeneity, self.convexity, self.translation_null, self.triangle_root]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation() <= tol && self.lipschitz_ratio.is_finite()
    }
}

/// Evaluates the scalar integrand at the singular values of `A` (the
/// eigenvalues of `sqrt(A A^T)`); the isotropic integrand is constant on
/// rotation orbits, which this reduction exploits.
pub fn psi_iso_eigen(
    scalar_psi: impl Fn(&DMatrix<f64>) -> Result<f64>,
    a: &DMatrix<f64>,
) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape("eigenvalue reduction needs a square matrix".into()));
    }
    let n = a.ncols();
    let svd = a.clone().svd(false, false);
    let lambda = DMatrix::from_iterator(1, n, svd.singular_values.iter().copied());
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("singular value decomposition failed".into()));
    }
    scalar_psi(&lambda)
}

/// Free-function form of the documented closed forms.
pub fn psi_closed_form(
    variant: &Variant,
    a: &DMatrix<f64>,
    reference: &ReferenceCell,
    p: f64,
) -> Option<f64> {
    let rule = QuadratureRule::default();
    let moments = compute_moments(reference, &rule).ok()?;
    let group = RotationGroup::trivial(reference.dim());
    closed_form_value(variant, p, reference, &group, &moments, a)
}

fn closed_form_value(
    variant: &Variant,
    p: f64,
    reference: &ReferenceCell,
    group: &RotationGroup,
    moments: &CellMoments,
    a: &DMatrix<f64>,
) -> Option<f64> {
    let is_p2 = (p - 2.0).abs() < 1e-14;
    let is_box = reference.tessellates();
    let is_cube = matches!(reference.shape(), crate::geometry::CellShape::UnitCube)
        || reference
            .sides()
            .map(|s| s.iter().all(|v| (v - s[0]).abs() < 1e-14))
            .unwrap_or(false);
    // On cubes the second moment matrix is isotropic, so the quadratic forms
    // below are rotation invariant and the group maximum is immaterial.
    let group_ok = group.is_trivial() || is_cube;
    let quad_form = |mat: &DMatrix<f64>| (mat * &moments.second * mat.transpose()).trace();
    match variant {
        Variant::Trivial => Some(0.0),
        Variant::AffineInf => Some(0.0),
        Variant::MeanOscillation | Variant::InfConstant if is_p2 && is_box && group_ok => {
            Some(quad_form(a) / moments.measure)
        }
        Variant::DoubleIntegral if is_p2 && is_box && group_ok => {
            Some(2.0 * quad_form(a) / moments.measure)
        }
        Variant::SkewInf | Variant::SkewInfConstant if is_p2 && is_cube && a.nrows() == a.ncols() => {
            let sym = (a + a.transpose()) * 0.5;
            Some(quad_form(&sym) / moments.measure)
        }
        _ => None,
    }
}

fn compute_moments(reference: &ReferenceCell, rule: &QuadratureRule) -> Result<CellMoments> {
    let n = reference.dim();
    match reference.sides() {
        Some(sides) => {
            // Exact: (1/|D|) int y_i y_j = delta_ij s_i^2 / 12 on centered boxes.
            let mut second = DMatrix::zeros(n, n);
            for i in 0..n {
                second[(i, i)] = sides[i] * sides[i] / 12.0;
            }
            Ok(CellMoments { measure: reference.measure(), second })
        }
        None => {
            let cell = make_cell(
                reference.clone(),
                1.0,
                DMatrix::identity(n, n),
                DVector::zeros(n),
            )?;
            let hi_rule = QuadratureRule { order: 8, ..rule.clone() };
            let nodes = nodes_on_cell(&cell, &hi_rule, &[])?;
            let total = nodes.total_weight();
            let mut second = DMatrix::zeros(n, n);
            for q in 0..nodes.len() {
                let y = nodes.point(q);
                for i in 0..n {
                    for j in 0..n {
                        second[(i, j)] += nodes.weight(q) * y[i] * y[j];
                    }
                }
            }
            second /= total;
            Ok(CellMoments { measure: reference.measure(), second })
        }
    }
}

fn canonical_basis(m: usize, n: usize) -> Vec<DMatrix<f64>> {
    let mut basis = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut e = DMatrix::zeros(m, n);
            e[(i, j)] = 1.0;
            basis.push(e);
        }
    }
    basis
}

fn skew_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut basis = Vec::new();
    for k in 0..n {
        for l in (k + 1)..n {
            let mut e = DMatrix::zeros(n, n);
            e[(k, l)] = 1.0;
            e[(l, k)] = -1.0;
            basis.push(e);
        }
    }
    basis
}

/// Orthonormal basis of the span of the direction set inside `R^m`.
fn orthonormal_span(dirs: &[DVector<f64>], m: usize) -> Vec<DVector<f64>> {
    let mut span: Vec<DVector<f64>> = Vec::new();
    for d in dirs {
        let mut v = d.clone();
        for s in &span {
            let coeff = s.dot(&v);
            v -= s * coeff;
        }
        if v.norm() > 1e-10 {
            span.push(v.normalize());
        }
        if span.len() == m {
            break;
        }
    }
    span
}

/// Basis of `{A : nu^T A = 0 for all nu in the direction set}`: rows
/// confined to the orthogonal complement of the span.
fn row_annihilator_basis(m: usize, n: usize, dirs: &[DVector<f64>]) -> Option<Vec<DMatrix<f64>>> {
    let span = orthonormal_span(dirs, m);
    if span.is_empty() || span.len() == m {
        return None;
    }
    // Complete the span to an orthonormal basis of R^m.
    let mut full = span.clone();
    for i in 0..m {
        let mut v = DVector::zeros(m);
        v[i] = 1.0;
        for s in &full {
            let c = s.dot(&v);
            v -= s * c;
        }
        if v.norm() > 1e-10 {
            full.push(v.normalize());
        }
    }
    let mut basis = Vec::new();
    for w in full.iter().skip(span.len()) {
        for j in 0..n {
            let mut ej = DVector::zeros(n);
            ej[j] = 1.0;
            basis.push(w * ej.transpose());
        }
    }
    Some(basis)
}

fn complement_basis(kind: &NullSpaceKind, m: usize, n: usize) -> Vec<DMatrix<f64>> {
    match kind {
        NullSpaceKind::Zero => canonical_basis(m, n),
        NullSpaceKind::Full => Vec::new(),
        NullSpaceKind::Skew => {
            let mut basis = Vec::new();
            for k in 0..n {
                let mut e = DMatrix::zeros(n, n);
                e[(k, k)] = 1.0;
                basis.push(e);
            }
            for k in 0..n {
                for l in (k + 1)..n {
                    let mut e = DMatrix::zeros(n, n);
                    let inv = 1.0 / std::f64::consts::SQRT_2;
                    e[(k, l)] = inv;
                    e[(l, k)] = inv;
                    basis.push(e);
                }
            }
            basis
        }
        NullSpaceKind::RowAnnihilator(span) => {
            let mut basis = Vec::new();
            for s in span {
                for j in 0..n {
                    let mut ej = DVector::zeros(n);
                    ej[j] = 1.0;
                    basis.push(s * ej.transpose());
                }
            }
            basis
        }
    }
}

fn random_matrix(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_iterator(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)))
}

fn split_box(ambient: &Hyperbox, panels: usize) -> Vec<Hyperbox> {
    let n = ambient.dim();
    let mut boxes = Vec::with_capacity(panels.pow(n as u32));
    let mut idx = vec![0usize; n];
    loop {
        let lo: Vec<f64> = (0..n)
            .map(|i| ambient.lo()[i] + ambient.side(i) * idx[i] as f64 / panels as f64)
            .collect();
        let hi: Vec<f64> = (0..n)
            .map(|i| ambient.lo()[i] + ambient.side(i) * (idx[i] + 1) as f64 / panels as f64)
            .collect();
        boxes.push(Hyperbox::new(lo, hi).expect("valid panel"));
        let mut carry = true;
        for slot in idx.iter_mut() {
            if carry {
                *slot += 1;
                if *slot == panels {
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
    boxes
}

/// `gamma(n, p) = max_{|nu| = 1} \int_Q |x . nu|^p dx`: sampled directions
/// (axes and diagonals always included) refined by a local golden-section
/// search around the best sample.
pub fn gamma_np(n: usize, p: f64, direction_samples: usize) -> Result<f64> {
    if direction_samples < 8 {
        return Err(Error::Parameter("need at least 8 direction samples".into()));
    }
    if n == 0 || !(p >= 1.0) {
        return Err(Error::Parameter("gamma needs n >= 1 and p >= 1".into()));
    }
    if n == 1 {
        return Ok(moment_integral_direction(&[1.0], p));
    }

    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        directions.push(e);
    }
    // All diagonal sign patterns up to antipodality.
    for mask in 0..(1usize << (n - 1)) {
        let mut d = vec![1.0 / (n as f64).sqrt(); n];
        for (i, di) in d.iter_mut().enumerate().take(n - 1) {
            if mask >> i & 1 == 1 {
                *di = -*di;
            }
        }
        directions.push(d);
    }
    match n {
        2 => {
            for k in 0..direction_samples {
                let theta = std::f64::consts::PI * k as f64 / direction_samples as f64;
                directions.push(vec![theta.cos(), theta.sin()]);
            }
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0xd1cec7);
            for _ in 0..direction_samples {
                let v: Vec<f64> = (0..n)
                    .map(|_| {
                        // Box-Muller normal deviate.
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                directions.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
    }

    let mut best_dir = directions[0].clone();
    let mut best = f64::NEG_INFINITY;
    for d in &directions {
        let v = moment_integral_direction(d, p);
        if v > best {
            best = v;
            best_dir = d.clone();
        }
    }

    // Local refinement on the sphere around the best sample.
    if n == 2 {
        let theta0 = best_dir[1].atan2(best_dir[0]);
        let width = std::f64::consts::PI / direction_samples as f64;
        let f = |theta: f64| moment_integral_direction(&[theta.cos(), theta.sin()], p);
        let (theta_best, v) = golden_max(f, theta0 - width, theta0 + width, 1e-10);
        if v > best {
            best = v;
            best_dir = vec![theta_best.cos(), theta_best.sin()];
        }
        let _ = best_dir;
    } else {
        // Coordinate-wise golden passes in a tangent frame.
        let mut current = best_dir;
        for _ in 0..3 {
            let frame = tangent_frame(&current);
            for t in &frame {
                let base = current.clone();
                let f = |s: f64| {
                    let cand: Vec<f64> =
                        (0..n).map(|i| base[i] + s * t[i]).collect();
                    let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                    moment_integral_direction(
                        &cand.iter().map(|x| x / norm).collect::<Vec<_>>(),
                        p,
                    )
                };
                let (s_best, v) = golden_max(f, -0.2, 0.2, 1e-10);
                if v > best {
                    best = v;
                    let cand: Vec<f64> = (0..n).map(|i| base[i] + s_best * t[i]).collect();
                    let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                    current = cand.into_iter().map(|x| x / norm).collect();
                }
            }
        }
    }
    Ok(best)
}

/// `\int_Q |x . nu|^p dx` for a unit direction: the axis with the largest
/// component is integrated in closed form, the remaining coordinates by
/// panelled Gauss quadrature (the inner antiderivative removes the kink).
fn moment_integral_direction(nu: &[f64], p: f64) -> f64 {
    let n = nu.len();
    let (j_star, &c) = nu
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite direction"))
        .expect("nonempty direction");
    debug_assert!(c != 0.0);
    let rest: Vec<f64> = nu
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != j_star)
        .map(|(_, &v)| v)
        .collect();
    let inner = |b: f64| -> f64 {
        // int_{-1/2}^{1/2} |c t + b|^p dt.
        let psi = |s: f64| s.signum() * s.abs().powf(p + 1.0) / (p + 1.0);
        (psi(b + c / 2.0) - psi(b - c / 2.0)) / c
    };
    if n == 1 {
        return inner(0.0);
    }
    let panels = 24;
    let order = 10;
    let (gx, gw) = gauss_legendre(order);
    let outer_dim = n - 1;
    // Tensor quadrature over the outer coordinates.
    let mut total = 0.0;
    let mut idx = vec![0usize; outer_dim];
    let panel_w = 1.0 / panels as f64;
    let mut panel_idx = vec![0usize; outer_dim];
    loop {
        // Iterate Gauss nodes inside this panel block.
        loop {
            let mut w = 1.0;
            let mut b = 0.0;
            for i in 0..outer_dim {
                let lo = -0.5 + panel_idx[i] as f64 * panel_w;
                let x = lo + 0.5 * panel_w * (gx[idx[i]] + 1.0);
                w *= 0.5 * panel_w * gw[idx[i]];
                b += rest[i] * x;
            }
            total += w * inner(b);
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
        let mut carry = true;
        for slot in panel_idx.iter_mut() {
            if carry {
                *slot += 1;
                if *slot == panels {
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
    total
}

fn tangent_frame(dir: &[f64]) -> Vec<Vec<f64>> {
    let n = dir.len();
    let mut frame = Vec::new();
    for i in 0..n {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        let dot: f64 = dir.iter().zip(&v).map(|(a, b)| a * b).sum();
        for (j, vj) in v.iter_mut().enumerate() {
            *vj -= dot * dir[j];
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            frame.push(v.into_iter().map(|x| x / norm).collect());
        }
        if frame.len() == n - 1 {
            break;
        }
    }
    frame
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn evaluator(variant: Variant, p: f64, m: usize, n: usize) -> PsiEvaluator {
        PsiEvaluator::new(
            CoreFunctional::new(variant, p, m).unwrap(),
            ReferenceCell::unit_cube(n),
            RotationGroup::trivial(n),
            PsiMode::Generic,
        )
        .unwrap()
    }

    #[test]
    fn psi_generic_mean_oscillation_identity() {
        let ev = evaluator(Variant::MeanOscillation, 2.0, 2, 2);
        let v = ev.psi_generic(&DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(v, 1.0 / 6.0, epsilon = 1e-13);
    }

    #[test]
    fn psi_vanishes_at_zero_and_for_affine_inf() {
        let ev = evaluator(Variant::MeanOscillation, 2.0, 2, 2);
        assert!(ev.psi_generic(&DMatrix::zeros(2, 2)).unwrap().abs() <= 1e-14);
        let affine = evaluator(Variant::AffineInf, 2.0, 2, 2);
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 2.0]);
        assert!(affine.psi_generic(&a).unwrap().abs() <= 1e-12);
        assert_eq!(affine.psi_closed_form(&a), Some(0.0));
    }

    #[test]
    fn closed_forms_match_generic_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cases = vec![
            (Variant::MeanOscillation, 1.0 / 12.0_f64),
            (Variant::DoubleIntegral, 1.0 / 6.0),
            (Variant::SkewInf, 1.0 / 12.0),
        ];
        for (variant, factor) in cases {
            let ev = evaluator(variant.clone(), 2.0, 2, 2);
            for _ in 0..20 {
                let a = random_matrix(2, 2, &mut rng);
                let generic = ev.psi_generic(&a).unwrap();
                let closed = ev.psi_closed_form(&a).unwrap();
                let expected = match variant {
                    Variant::SkewInf => {
                        let sym = (&a + a.transpose()) * 0.5;
                        factor * sym.norm_squared()
                    }
                    _ => factor * a.norm_squared(),
                };
                assert_relative_eq!(closed, expected, max_relative = 1e-12);
                let denom = generic.abs().max(1e-12);
                assert!(
                    (closed - generic).abs() / denom <= 1e-6,
                    "{}: closed {closed}, generic {generic}",
                    variant.name()
                );
            }
        }
    }

    #[test]
    fn iso_eigen_reduction_is_rotation_invariant() {
        let ev = PsiEvaluator::new(
            CoreFunctional::new(Variant::MeanOscillation, 2.0, 2).unwrap(),
            ReferenceCell::unit_cube(2),
            RotationGroup::sampled_so_n(2, 16, 9).unwrap(),
            PsiMode::Generic,
        )
        .unwrap();
        let scalar = ev.scalar_counterpart().unwrap();
        let ident = psi_iso_eigen(|l| scalar.psi_generic(l), &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(ident, 1.0 / 6.0, max_relative = 1e-10);
        let rot = crate::geometry::rotation_2d(0.9);
        let rotated = psi_iso_eigen(|l| scalar.psi_generic(l), &rot).unwrap();
        assert_relative_eq!(rotated, ident, max_relative = 1e-10);
        let zero = psi_iso_eigen(|l| scalar.psi_generic(l), &DMatrix::zeros(2, 2)).unwrap();
        assert!(zero.abs() <= 1e-14);
    }

    #[test]
    fn gamma_constants() {
        let g22 = gamma_np(2, 2.0, 32).unwrap();
        assert!((g22 - 1.0 / 12.0).abs() <= 1e-4, "gamma(2,2) = {g22}");
        let g21 = gamma_np(2, 1.0, 32).unwrap();
        assert!((g21 - 0.25).abs() <= 1e-3, "gamma(2,1) = {g21}");
        let g32 = gamma_np(3, 2.0, 32).unwrap();
        assert!((g32 - 1.0 / 12.0).abs() <= 1e-4, "gamma(3,2) = {g32}");
    }

    #[test]
    fn null_space_detection_across_the_catalog() {
        let tol = 1e-9;
        let mo = evaluator(Variant::MeanOscillation, 2.0, 2, 2);
        let report = mo.estimate_null_space(tol).unwrap();
        assert_eq!(report.null_dim(), 0);
        assert!(report.min_on_unit_sphere > 0.0);

        let skew = evaluator(Variant::SkewInf, 2.0, 2, 2);
        let report = skew.estimate_null_space(tol).unwrap();
        assert_eq!(report.null_dim(), 1);
        assert!(matches!(report.kind, NullSpaceKind::Skew));
        assert!(report.min_on_unit_sphere > 0.0);

        let affine = evaluator(Variant::AffineInf, 2.0, 2, 2);
        let report = affine.estimate_null_space(tol).unwrap();
        assert_eq!(report.null_dim(), 4);
        assert!(matches!(report.kind, NullSpaceKind::Full));

        let dirs = vec![DVector::from_row_slice(&[1.0, 0.0])];
        let ds = evaluator(Variant::DirectionalSup(dirs), 2.0, 2, 2);
        let report = ds.estimate_null_space(tol).unwrap();
        assert_eq!(report.null_dim(), 2);
        // Projection keeps the first row and kills the second.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let proj = report.project(&a);
        assert_relative_eq!(proj[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(proj[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_fixes_psi() {
        let skew = evaluator(Variant::SkewInf, 2.0, 2, 2);
        let report = skew.estimate_null_space(1e-9).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let direct = skew.psi_generic(&a).unwrap();
        let projected = skew.psi_generic(&report.project(&a)).unwrap();
        assert_relative_eq!(direct, projected, max_relative = 1e-10);
    }

    #[test]
    fn limit_integral_of_linear_field_is_psi() {
        let ev = PsiEvaluator::new(
            CoreFunctional::new(Variant::MeanOscillation, 2.0, 2).unwrap(),
            ReferenceCell::unit_cube(2),
            RotationGroup::trivial(2),
            PsiMode::ClosedForm,
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
        let u = Field::linear(a.clone());
        let ambient = Hyperbox::unit(2);
        let v = ev.limit_integral(&u, &ambient, GradientSource::Full, 4).unwrap();
        assert_relative_eq!(v, a.norm_squared() / 12.0, max_relative = 1e-12);
    }

    #[test]
    fn limit_integral_of_sine_field_matches_analytic_value() {
        let ev = PsiEvaluator::new(
            CoreFunctional::new(Variant::MeanOscillation, 2.0, 2).unwrap(),
            ReferenceCell::unit_cube(2),
            RotationGroup::trivial(2),
            PsiMode::ClosedForm,
        )
        .unwrap();
        let u = Field::sine2d();
        let ambient = Hyperbox::unit(2);
        let v = ev.limit_integral(&u, &ambient, GradientSource::Full, 8).unwrap();
        let expected = std::f64::consts::PI.powi(2) / 24.0;
        assert_relative_eq!(v, expected, max_relative = 1e-9);
    }

    #[test]
    fn limit_integral_symmetric_source_kills_rigid_motions() {
        let ev = PsiEvaluator::new(
            CoreFunctional::new(Variant::SkewInf, 2.0, 2).unwrap(),
            ReferenceCell::unit_cube(2),
            RotationGroup::trivial(2),
            PsiMode::ClosedForm,
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        let u = Field::rigid(a, DVector::from_row_slice(&[1.0, -1.0])).unwrap();
        let ambient = Hyperbox::unit(2);
        let v = ev.limit_integral(&u, &ambient, GradientSource::Symmetric, 4).unwrap();
        assert!(v.abs() <= 1e-12);
    }

    #[test]
    fn property_check_mean_oscillation() {
        let ev = evaluator(Variant::MeanOscillation, 2.0, 2, 2);
        let report = ev.psi_property_check(25, 7, None).unwrap();
        assert!(report.max_violation() <= 1e-8, "{report:?}");
        assert!(report.lipschitz_ratio.is_finite());
    }

    #[test]
    fn property_check_skew_translation_invariance() {
        let ev = evaluator(Variant::SkewInf, 2.0, 2, 2);
        let ns = ev.estimate_null_space(1e-9).unwrap();
        let report = ev.psi_property_check(25, 13, Some(&ns)).unwrap();
        assert!(report.translation_null <= 1e-9, "{report:?}");
        assert!(report.triangle_root <= 1e-9, "{report:?}");
    }
}
