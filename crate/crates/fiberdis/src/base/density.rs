//! Invariant densities of the base maps: analytic closed forms for the
//! catalog, piecewise-linear tables from transfer-operator iteration
//! otherwise.

use super::{BranchSet, CountableFamily, ExpandingMap};
use crate::error::{Error, Result};
use crate::numeric::{midpoint_integral, NeumaierSum};

/// Closed-form densities shipped with the catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticDensity {
    /// Lebesgue measure, `phi ≡ 1`.
    Uniform,
    /// `phi(x) = 1 / ((1 + x) ln 2)`.
    GaussMeasure,
}

impl AnalyticDensity {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            AnalyticDensity::Uniform => 1.0,
            AnalyticDensity::GaussMeasure => 1.0 / ((1.0 + x) * std::f64::consts::LN_2),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            AnalyticDensity::Uniform => 0.0,
            AnalyticDensity::GaussMeasure => {
                -1.0 / ((1.0 + x) * (1.0 + x) * std::f64::consts::LN_2)
            }
        }
    }

    pub fn floor(self) -> f64 {
        match self {
            AnalyticDensity::Uniform => 1.0,
            AnalyticDensity::GaussMeasure => 1.0 / (2.0 * std::f64::consts::LN_2),
        }
    }

    /// Value and derivative at `0+`, used by countable-branch tail sums.
    fn zero_limit(self) -> (f64, f64) {
        match self {
            AnalyticDensity::Uniform => (1.0, 0.0),
            AnalyticDensity::GaussMeasure => {
                (1.0 / std::f64::consts::LN_2, -1.0 / std::f64::consts::LN_2)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Analytic(AnalyticDensity),
    /// Values at the nodes `j / resolution`, interpolated linearly.
    Table { values: Vec<f64> },
}

/// The density of the absolutely continuous invariant measure.
#[derive(Debug, Clone)]
pub struct InvariantDensity {
    repr: Repr,
    pub floor: f64,
    pub normalization_residual: f64,
    pub fixed_point_residual: f64,
    /// True for analytic derivatives, false for finite-difference tables.
    pub derivative_is_exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMethod {
    Analytic,
    OperatorIteration,
}

impl InvariantDensity {
    pub fn eval(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Analytic(a) => a.eval(x),
            Repr::Table { values } => table_eval(values, x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Analytic(a) => a.deriv(x),
            Repr::Table { values } => {
                // Central difference on the table, flagged inexact.
                let h = 1.0 / (values.len() - 1) as f64;
                let xm = (x - h).max(0.0);
                let xp = (x + h).min(1.0);
                (table_eval(values, xp) - table_eval(values, xm)) / (xp - xm)
            }
        }
    }

    /// Value and slope at `0+` for countable tail estimates.
    pub fn zero_limit(&self) -> (f64, f64) {
        match &self.repr {
            Repr::Analytic(a) => a.zero_limit(),
            Repr::Table { values } => {
                let h = 1.0 / (values.len() - 1) as f64;
                (values[0], (values[1] - values[0]) / h)
            }
        }
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.repr, Repr::Analytic(_))
    }
}

fn table_eval(values: &[f64], x: f64) -> f64 {
    let n = values.len() - 1;
    let t = (x.clamp(0.0, 1.0)) * n as f64;
    let i = (t.floor() as usize).min(n - 1);
    let frac = t - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

/// Constructs the invariant density and verifies it: normalization within
/// `tol` and transfer fixed-point residual below `tol` on the grid.
pub fn invariant_density(
    map: &ExpandingMap,
    method: DensityMethod,
    resolution: usize,
    tol: f64,
) -> Result<InvariantDensity> {
    assert!(resolution >= 8 && tol > 0.0);
    let mut density = match method {
        DensityMethod::Analytic => {
            let analytic = map.known_density.ok_or_else(|| {
                Error::Config(format!("map `{}` has no catalog closed-form density", map.name))
            })?;
            InvariantDensity {
                repr: Repr::Analytic(analytic),
                floor: analytic.floor(),
                normalization_residual: 0.0,
                fixed_point_residual: 0.0,
                derivative_is_exact: true,
            }
        }
        DensityMethod::OperatorIteration => iterate_density(map, resolution, tol)?,
    };
    // The normalization check runs on a refined quadrature so its own
    // midpoint error (~ h^2/24 * int |phi''|) stays below tight tolerances.
    let normalization =
        (midpoint_integral(resolution.max(65_536), |x| density.eval(x)) - 1.0).abs();
    if normalization > tol {
        return Err(Error::DensityNotConverged { residual: normalization, iterations: 0 });
    }
    let probes: Vec<f64> = (0..=resolution)
        .map(|j| {
            (j as f64 / resolution as f64)
                .clamp(map.boundary_margin, 1.0 - map.boundary_margin)
        })
        .collect();
    let residual = transfer_residual(map, &density, &probes)?;
    if residual > tol {
        return Err(Error::DensityNotConverged { residual, iterations: 0 });
    }
    density.normalization_residual = normalization;
    density.fixed_point_residual = residual;
    Ok(density)
}

/// `sup_x |sum_h J_h(x) phi(h x) - phi(x)|` over the probe points
/// (single-step Lebesgue-transfer invariance).
pub fn transfer_residual(
    map: &ExpandingMap,
    density: &InvariantDensity,
    probes: &[f64],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &x in probes {
        let image = apply_lebesgue_transfer(map, x, |t| density.eval(t), density.zero_limit())?;
        let r = (image - density.eval(x)).abs();
        if r > worst {
            worst = r;
        }
    }
    Ok(worst)
}

/// One application of the transfer operator with respect to Lebesgue
/// measure, `(P f)(x) = sum_h J_h(x) f(h x)`.
///
/// Countable families are summed up to `GAUSS_TRANSFER_K` branches and the
/// remaining tail is restored from a first-order expansion of `f` at `0+`
/// with Euler–Maclaurin sums (the omitted branches map into
/// `(0, 1/K)`, so the quadratic remainder is below `1/(3 K^3) * sup|f''|`).
pub fn apply_lebesgue_transfer(
    map: &ExpandingMap,
    x: f64,
    f: impl Fn(f64) -> f64,
    f_zero_limit: (f64, f64),
) -> Result<f64> {
    match &map.branch_set {
        BranchSet::Finite(branches) => {
            let mut acc = NeumaierSum::new();
            for id in 0..branches.len() as u32 {
                let hx = map.inverse_step(id, x);
                let j = map.inverse_step_d(id, x, hx).abs();
                acc.add(j * f(hx));
            }
            Ok(acc.value())
        }
        BranchSet::Countable(CountableFamily::Gauss) => {
            let k_max = GAUSS_TRANSFER_K;
            let mut acc = NeumaierSum::new();
            for k in 1..=k_max {
                let hx = 1.0 / (k as f64 + x);
                acc.add(hx * hx * f(hx));
            }
            let (f0, df0) = f_zero_limit;
            let t = k_max as f64 + 1.0 + x;
            let (s2, s3) = inverse_power_sums(t);
            acc.add(f0 * s2 + df0 * s3);
            Ok(acc.value())
        }
    }
}

/// Branches kept in countable transfer sums before the tail expansion.
pub const GAUSS_TRANSFER_K: u32 = 3000;

/// `(sum_{j>=0} (t+j)^-2, sum_{j>=0} (t+j)^-3)` by direct summation of the
/// first 64 terms plus Euler–Maclaurin remainders.
fn inverse_power_sums(t: f64) -> (f64, f64) {
    let mut s2 = NeumaierSum::new();
    let mut s3 = NeumaierSum::new();
    let direct = 64;
    for j in 0..direct {
        let w = t + j as f64;
        s2.add(1.0 / (w * w));
        s3.add(1.0 / (w * w * w));
    }
    let big = t + direct as f64;
    let inv = 1.0 / big;
    let inv2 = inv * inv;
    s2.add(inv + 0.5 * inv2 + inv2 * inv / 6.0 - inv2 * inv2 * inv / 30.0);
    s3.add(0.5 * inv2 + 0.5 * inv2 * inv + 0.25 * inv2 * inv2 - inv2 * inv2 * inv2 / 12.0);
    (s2.value(), s3.value())
}

fn iterate_density(map: &ExpandingMap, resolution: usize, tol: f64) -> Result<InvariantDensity> {
    const MAX_ITERS: usize = 10_000;
    let nodes: Vec<f64> = (0..=resolution)
        .map(|j| {
            (j as f64 / resolution as f64)
                .clamp(map.boundary_margin, 1.0 - map.boundary_margin)
        })
        .collect();
    let mut values = vec![1.0f64; resolution + 1];
    let mut residual = f64::INFINITY;
    for iteration in 0..MAX_ITERS {
        let zero_limit = {
            let h = 1.0 / resolution as f64;
            (values[0], (values[1] - values[0]) / h)
        };
        let mut next = Vec::with_capacity(values.len());
        for &x in &nodes {
            next.push(apply_lebesgue_transfer(map, x, |t| table_eval(&values, t), zero_limit)?);
        }
        // Normalize: midpoint rule on the linear interpolant.
        let mass = midpoint_integral(resolution, |x| table_eval(&next, x));
        for v in &mut next {
            *v /= mass;
        }
        residual = values
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if residual < tol {
            let floor = values.iter().copied().fold(f64::INFINITY, f64::min);
            if floor <= 0.0 {
                return Err(Error::DensityNotConverged { residual: floor, iterations: iteration });
            }
            return Ok(InvariantDensity {
                repr: Repr::Table { values },
                floor,
                normalization_residual: 0.0,
                fixed_point_residual: residual,
                derivative_is_exact: false,
            });
        }
    }
    Err(Error::DensityNotConverged { residual, iterations: MAX_ITERS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    #[test]
    fn doubling_analytic_is_lebesgue() {
        let map = catalog::doubling_map();
        let d = invariant_density(&map, DensityMethod::Analytic, 1024, 1e-12).unwrap();
        assert_eq!(d.eval(0.37), 1.0);
        assert_eq!(d.floor, 1.0);
        assert_eq!(d.deriv(0.37), 0.0);
        assert!(d.fixed_point_residual < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)] // the catalog value 1/ln2 happens to be log2(e)
    fn gauss_analytic_density_fixed_point() {
        let map = catalog::gauss_map();
        let d = invariant_density(&map, DensityMethod::Analytic, 1024, 1e-10).unwrap();
        assert!((d.eval(0.0) - 1.4426950408889634).abs() < 1e-12);
        assert!(d.fixed_point_residual < 1e-10, "residual {}", d.fixed_point_residual);
        assert!(d.normalization_residual < 1e-8);
        assert!((d.floor - 1.0 / (2.0 * std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn doubling_operator_iteration_is_exactly_flat() {
        let map = catalog::doubling_map();
        let d = invariant_density(&map, DensityMethod::OperatorIteration, 1024, 1e-10).unwrap();
        for x in crate::base::low_discrepancy_points(50, 1e-6) {
            assert!((d.eval(x) - 1.0).abs() < 1e-12, "phi({x}) = {}", d.eval(x));
        }
        assert!(d.floor > 1.0 - 1e-12);
        assert!(!d.derivative_is_exact);
    }

    #[test]
    fn analytic_requires_catalog_density() {
        let mut map = catalog::doubling_map();
        map.known_density = None;
        assert!(matches!(
            invariant_density(&map, DensityMethod::Analytic, 256, 1e-8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverse_power_sums_match_closed_forms() {
        let pi2_6 = std::f64::consts::PI * std::f64::consts::PI / 6.0;
        let zeta3 = 1.202_056_903_159_594_3;
        for (t, expect2, expect3) in [
            (1.0, pi2_6, zeta3),
            (2.0, pi2_6 - 1.0, zeta3 - 1.0),
            (0.5, 3.0 * pi2_6, 7.0 * zeta3),
        ] {
            let (s2, s3) = inverse_power_sums(t);
            assert!((s2 - expect2).abs() < 1e-12, "t={t}: {s2} vs {expect2}");
            assert!((s3 - expect3).abs() < 1e-12, "t={t}: {s3} vs {expect3}");
        }
    }
}
