//! Packing-based lower bounds of the scale-parametrized seminorm
//! `G_eps(u, Omega) = eps^(n-p) sup sum alpha_p(u, D')`, scale sweeps with
//! limit extrapolation and divergence detection, and the mollified
//! inequality chain connecting the projected gradient, the limit integrand
//! and the seminorm.

use crate::error::{Error, Result};
use crate::field::{Field, DEFAULT_FD_STEP};
use crate::functionals::{operator_norm, CoreFunctional};
use crate::geometry::{
    packing_candidates, Hyperbox, PackingFamily, PackingOptions, ReferenceCell, RotationGroup,
};
use crate::psi::{PsiEvaluator, SubspaceReport};
use crate::quad::{kahan_sum, nodes_on_box_adaptive, QuadratureRule};
use rayon::prelude::*;
use std::time::Instant;

/// Everything needed to generate and evaluate candidate packings.
#[derive(Debug, Clone)]
pub struct PackingConfig {
    pub reference: ReferenceCell,
    pub group: RotationGroup,
    pub options: PackingOptions,
    pub rule: QuadratureRule,
}

impl PackingConfig {
    pub fn dyadic_default(n: usize) -> Self {
        Self {
            reference: ReferenceCell::unit_cube(n),
            group: RotationGroup::trivial(n),
            options: PackingOptions::default(),
            rule: QuadratureRule::default(),
        }
    }
}

/// Best family found at one scale. The value is a certified lower bound of
/// the packing supremum; coverage of the maximizer indicates tightness.
#[derive(Debug, Clone)]
pub struct SeminormValue {
    pub value: f64,
    pub coverage: f64,
    pub family_label: String,
    pub cells: usize,
}

/// `eps^(n-p)` times the best candidate-family sum of `alpha_p(u, D')`.
/// Returns 0 with an empty label when no cell fits. Per-family sums use
/// compensated summation in a fixed cell order, so results do not depend on
/// the worker count.
pub fn seminorm_at(
    functional: &CoreFunctional,
    u: &Field,
    ambient: &Hyperbox,
    epsilon: f64,
    config: &PackingConfig,
) -> Result<SeminormValue> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter("epsilon must be positive".into()));
    }
    let n = ambient.dim();
    if u.dim_in() != n || config.reference.dim() != n {
        return Err(Error::Shape("field, ambient and reference dimensions must match".into()));
    }
    let families =
        packing_candidates(ambient, &config.reference, epsilon, &config.group, &config.options)?;
    let prefactor = epsilon.powf(n as f64 - functional.p);
    let mut best = SeminormValue {
        value: 0.0,
        coverage: 0.0,
        family_label: String::new(),
        cells: 0,
    };
    for family in &families {
        let sum = family_sum(functional, u, family, &config.rule)?;
        let value = prefactor * sum;
        if value > best.value || best.family_label.is_empty() {
            best = SeminormValue {
                value,
                coverage: family.coverage(),
                family_label: family.label().to_string(),
                cells: family.len(),
            };
        }
    }
    Ok(best)
}

fn family_sum(
    functional: &CoreFunctional,
    u: &Field,
    family: &PackingFamily,
    rule: &QuadratureRule,
) -> Result<f64> {
    let per_cell: Result<Vec<f64>> = family
        .cells()
        .par_iter()
        .map(|cell| {
            functional.alpha_eval(u, cell, rule).map_err(|e| match e {
                Error::Solver { message, last_iterate, gradient_norm, iterations } => {
                    Error::Solver {
                        message: format!(
                            "{message} (cell at {:?}, eps {})",
                            cell.translation().as_slice(),
                            cell.epsilon()
                        ),
                        last_iterate,
                        gradient_norm,
                        iterations,
                    }
                }
                other => other,
            })
        })
        .collect();
    Ok(kahan_sum(per_cell?.into_iter()))
}

/// Extrapolation and divergence-detection thresholds for sweeps.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Points entering the log-log slope fit.
    pub k_fit: usize,
    /// Sequences steeper than this (in log G vs log eps) are divergence
    /// candidates.
    pub divergence_slope: f64,
    /// Required relative growth per halving for the divergent flag.
    pub divergence_growth: f64,
    /// Values below this are treated as an identically-zero sequence.
    pub zero_tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { k_fit: 3, divergence_slope: -0.1, divergence_growth: 0.05, zero_tol: 1e-11 }
    }
}

/// One scale of a sweep.
#[derive(Debug, Clone)]
pub struct EpsRecord {
    pub epsilon: f64,
    pub value: f64,
    pub coverage: f64,
    pub family_label: String,
    pub cells: usize,
    pub seconds: f64,
}

/// A scale sweep: per-scale values (computed independently), the
/// least-squares log-log slope over the last `k_fit` points, and the
/// Richardson-extrapolated limit (`None` when the sequence diverges).
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<EpsRecord>,
    pub extrapolated_limit: Option<f64>,
    pub divergent: bool,
    pub loglog_slope: f64,
    pub k_fit: usize,
}

impl SweepResult {
    pub fn epsilons(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.epsilon).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn max_value(&self) -> f64 {
        self.records.iter().map(|r| r.value).fold(0.0, f64::max)
    }
}

/// Runs `seminorm_at` over a decreasing scale list and post-processes the
/// sequence. Scales are evaluated independently (no warm starting), keeping
/// the results packing-order independent.
pub fn sweep(
    functional: &CoreFunctional,
    u: &Field,
    ambient: &Hyperbox,
    epsilons: &[f64],
    config: &PackingConfig,
    options: &SweepOptions,
) -> Result<SweepResult> {
    if epsilons.len() < 2 {
        return Err(Error::Parameter("a sweep needs at least 2 scales".into()));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Parameter("scales must be strictly decreasing".into()));
    }
    let mut records = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let started = Instant::now();
        let v = seminorm_at(functional, u, ambient, eps, config)?;
        records.push(EpsRecord {
            epsilon: eps,
            value: v.value,
            coverage: v.coverage,
            family_label: v.family_label,
            cells: v.cells,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(postprocess_sweep(records, options))
}

/// Slope fitting, divergence detection and Richardson extrapolation on an
/// already-computed sequence.
pub fn postprocess_sweep(records: Vec<EpsRecord>, options: &SweepOptions) -> SweepResult {
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    let epsilons: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    let k_fit = options.k_fit.min(records.len()).max(2);

    if values.iter().all(|v| v.abs() <= options.zero_tol) {
        return SweepResult {
            records,
            extrapolated_limit: Some(0.0),
            divergent: false,
            loglog_slope: 0.0,
            k_fit,
        };
    }

    let tail = records.len() - k_fit;
    let slope = loglog_slope(&epsilons[tail..], &values[tail..]);

    // Divergence: steep negative slope plus monotone growth of at least
    // `divergence_growth` per halving over the fitted window.
    let mut monotone_growth = true;
    for w in tail..records.len() - 1 {
        let halvings = (epsilons[w] / epsilons[w + 1]).log2();
        let required = (1.0 + options.divergence_growth).powf(halvings);
        if !(values[w + 1] >= values[w] * required) {
            monotone_growth = false;
            break;
        }
    }
    let divergent = slope < options.divergence_slope && monotone_growth;

    let extrapolated_limit = if divergent {
        None
    } else {
        Some(richardson_limit(&epsilons, &values))
    };
    SweepResult { records, extrapolated_limit, divergent, loglog_slope: slope, k_fit }
}

/// Least-squares slope of `log value` against `log eps`; zero when any
/// value in the window is nonpositive (slopes of vanishing sequences carry
/// no information).
fn loglog_slope(epsilons: &[f64], values: &[f64]) -> f64 {
    if values.iter().any(|v| *v <= 0.0) {
        return 0.0;
    }
    let n = epsilons.len() as f64;
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Least-squares fit of `G = L + c * eps` over the last three points; the
/// fitted `L` is the extrapolated limit.
fn richardson_limit(epsilons: &[f64], values: &[f64]) -> f64 {
    let k = epsilons.len().min(3);
    let eps = &epsilons[epsilons.len() - k..];
    let val = &values[values.len() - k..];
    let n = k as f64;
    let se: f64 = eps.iter().sum();
    let sv: f64 = val.iter().sum();
    let see: f64 = eps.iter().map(|e| e * e).sum();
    let sev: f64 = eps.iter().zip(val).map(|(e, v)| e * v).sum();
    let det = n * see - se * se;
    if det.abs() < 1e-300 {
        return sv / n;
    }
    (see * sv - se * sev) / det
}

/// The three quantities of the mollified chain and whether the inequalities
/// hold at the given resolution.
#[derive(Debug, Clone)]
pub struct ChainReport {
    /// `C * int |pi_P(grad u_sigma)|_2^p` over the inner box.
    pub lower: f64,
    /// `int psi(grad u_sigma)` over the inner box.
    pub middle: f64,
    /// The seminorm lower bound of the raw field on the full ambient.
    pub upper: f64,
    pub holds: bool,
    /// Relative slack allowed on the upper comparison.
    pub slack: f64,
}

/// Checks `C int |pi_P(grad u_sigma)|^p <= int psi(grad u_sigma) <=
/// seminorm_at(u, ambient, eps)` with the given relative slack on the right
/// inequality. Both integrals share quadrature nodes, so the left
/// inequality is evaluated sample-wise.
#[allow(clippy::too_many_arguments)]
pub fn mollified_chain_check(
    functional: &CoreFunctional,
    u: &Field,
    ambient: &Hyperbox,
    inner: &Hyperbox,
    sigma: f64,
    epsilon: f64,
    config: &PackingConfig,
    evaluator: &PsiEvaluator,
    null_space: &SubspaceReport,
    slack: f64,
) -> Result<ChainReport> {
    let n = ambient.dim();
    if inner.dim() != n {
        return Err(Error::Shape("inner box dimension mismatch".into()));
    }
    for i in 0..n {
        if inner.lo()[i] - sigma < ambient.lo()[i] - 1e-12
            || inner.hi()[i] + sigma > ambient.hi()[i] + 1e-12
        {
            return Err(Error::Domain(
                "the inner box plus a sigma-neighborhood must fit inside the ambient".into(),
            ));
        }
    }
    let mollified = u.mollify(sigma)?;
    let p = functional.p;
    let c_min = null_space.min_on_unit_sphere;

    // Shared nodes over the inner box with refinement toward flags.
    let panels = 16usize;
    let flags: Vec<Vec<f64>> = u.flagged_points().to_vec();
    let panel_boxes = split_panels(inner, panels);
    let partials: Result<Vec<(f64, f64)>> = panel_boxes
        .par_iter()
        .map(|panel| -> Result<(f64, f64)> {
            let flag_refs: Vec<&[f64]> = flags.iter().map(|f| f.as_slice()).collect();
            let nodes = nodes_on_box_adaptive(panel, 5, 4, &flag_refs);
            let mut lower = 0.0;
            let mut middle = 0.0;
            for q in 0..nodes.len() {
                let jac = mollified.gradient_at(nodes.point(q), DEFAULT_FD_STEP)?;
                let projected = null_space.project(&jac);
                let w = nodes.weight(q);
                lower += w * c_min * operator_norm(&projected).powf(p);
                middle += w * evaluator.psi_value(&projected)?;
            }
            Ok((lower, middle))
        })
        .collect();
    let partials = partials?;
    let lower = kahan_sum(partials.iter().map(|p| p.0));
    let middle = kahan_sum(partials.iter().map(|p| p.1));

    let upper = seminorm_at(functional, u, ambient, epsilon, config)?.value;
    let tol = 1e-9 * (1.0 + middle.abs());
    let holds = lower <= middle + tol && middle <= upper * (1.0 + slack) + tol;
    Ok(ChainReport { lower, middle, upper, holds, slack })
}

fn split_panels(bx: &Hyperbox, panels: usize) -> Vec<Hyperbox> {
    let n = bx.dim();
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        let lo: Vec<f64> = (0..n)
            .map(|i| bx.lo()[i] + bx.side(i) * idx[i] as f64 / panels as f64)
            .collect();
        let hi: Vec<f64> = (0..n)
            .map(|i| bx.lo()[i] + bx.side(i) * (idx[i] + 1) as f64 / panels as f64)
            .collect();
        out.push(Hyperbox::new(lo, hi).expect("valid panel"));
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
    out
}
