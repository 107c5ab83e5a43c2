//! Disintegration over suspension domains: roof functions constant along
//! fibers, observables `v(x, z, u)` below the roof, and the frozen-level
//! quotient computation with its Hölder suite.

use crate::base::{self, InvariantDensity, Verdict};
use crate::disint::{quotient_observable, ConvergenceTrace};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Var};
use crate::observable::FiberObservable;
use crate::regularity::{holder_suite, RegularityReport, SampleMeta, Table};
use crate::skew::SkewProduct;
use std::sync::Arc;

type RoofFn = Arc<dyn Fn(f64) -> Result<f64> + Send + Sync>;
type SuspFn = Arc<dyn Fn(f64, f64, f64) -> Result<f64> + Send + Sync>;

/// A positive roof depending on the base coordinate only.
#[derive(Clone)]
pub struct RoofFunction {
    pub label: String,
    eval: RoofFn,
    /// Declared positive lower bound, validated on samples.
    pub inf_r: f64,
    /// Hölder data `(alpha, seminorm)`; quantitative suites need it even
    /// though the construction itself only requires measurability.
    pub holder: (f64, f64),
}

impl std::fmt::Debug for RoofFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoofFunction")
            .field("label", &self.label)
            .field("inf_r", &self.inf_r)
            .finish()
    }
}

impl RoofFunction {
    pub fn from_expr(expr: Expr, inf_r: f64, holder: (f64, f64)) -> Result<RoofFunction> {
        if expr.uses(Var::Z) || expr.uses(Var::U) {
            return Err(Error::Config(format!(
                "roof `{expr}` must depend on the base coordinate only"
            )));
        }
        if inf_r <= 0.0 {
            return Err(Error::Config("roof lower bound must be positive".into()));
        }
        let e = expr.clone();
        let eval: RoofFn = Arc::new(move |x| e.eval(&Bindings::x_only(x)));
        let roof = RoofFunction { label: expr.to_string(), eval, inf_r, holder };
        for x in base::low_discrepancy_points(2000, 1e-9) {
            let r = roof.eval(x)?;
            if r < inf_r {
                return Err(Error::Config(format!(
                    "roof `{}` dips to {r} below its declared bound {inf_r} at x = {x}",
                    roof.label
                )));
            }
        }
        Ok(roof)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        (self.eval)(x)
    }

    /// Margin kept below the roof by every evaluation level.
    pub fn margin(&self) -> f64 {
        1e-6 * self.inf_r
    }
}

/// An observable on the suspension domain `0 <= u <= R(x)`.
#[derive(Clone)]
pub struct SuspendedObservable {
    pub label: String,
    eval: SuspFn,
    pub sup_norm: f64,
    pub lip_z: f64,
    /// Hölder data shared by every frozen level.
    pub holder: Option<(f64, f64)>,
}

impl std::fmt::Debug for SuspendedObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SuspendedObservable").field("label", &self.label).finish()
    }
}

impl SuspendedObservable {
    pub fn from_expr(expr: Expr, sup_norm: f64, lip_z: f64) -> Result<SuspendedObservable> {
        let e = expr.clone();
        let eval: SuspFn = Arc::new(move |x, z, u| e.eval(&Bindings::xzu(x, z, u)));
        Ok(SuspendedObservable { label: expr.to_string(), eval, sup_norm, lip_z, holder: None })
    }

    pub fn from_fn(
        label: impl Into<String>,
        f: impl Fn(f64, f64, f64) -> Result<f64> + Send + Sync + 'static,
        sup_norm: f64,
        lip_z: f64,
    ) -> SuspendedObservable {
        SuspendedObservable { label: label.into(), eval: Arc::new(f), sup_norm, lip_z, holder: None }
    }

    pub fn with_holder(mut self, alpha: f64, seminorm: f64) -> Self {
        self.holder = Some((alpha, seminorm));
        self
    }

    pub fn eval(&self, x: f64, z: f64, u: f64) -> Result<f64> {
        (self.eval)(x, z, u)
    }

    /// The level-`u` observable, guarded so no evaluation ever queries a
    /// point above the roof.
    pub fn frozen(&self, roof: &RoofFunction, u: f64) -> FiberObservable {
        let eval = self.eval.clone();
        let roof = roof.clone();
        let label = format!("{} at level u={u}", self.label);
        FiberObservable::from_fn(
            label,
            move |x, z| {
                let r = roof.eval(x)?;
                if u > r {
                    return Err(Error::OutsideSuspensionDomain { x, u, roof: r });
                }
                (eval)(x, z, u)
            },
            self.sup_norm,
            self.lip_z,
        )
    }
}

/// The disintegrated suspension observable on an `(x, u)` grid.
#[derive(Debug, Clone)]
pub struct SuspensionField {
    pub xs: Vec<f64>,
    /// Shared u levels, fractions of the roof's lower bound so every
    /// column contains all of them.
    pub us: Vec<f64>,
    /// `values[k][i]` is the value at `(xs[i], us[k])`.
    pub values: Vec<Vec<f64>>,
    pub error_bounds: Vec<Vec<f64>>,
    pub traces: Vec<ConvergenceTrace>,
}

/// Shared evaluation levels below the roof.
pub fn u_levels(roof: &RoofFunction, count: usize) -> Vec<f64> {
    assert!(count >= 1);
    let top = roof.inf_r - roof.margin();
    if count == 1 {
        return vec![0.0];
    }
    (0..count).map(|k| top * k as f64 / (count - 1) as f64).collect()
}

/// Computes the disintegrated observable level by level: at each shared
/// `u`, the frozen observable runs through the standard quotient
/// computation. Values only ever sample `v` at `(x, ·, u)` with
/// `u <= R(x)`, so any continuous extension off the suspension domain
/// yields identical results.
pub fn suspension_quotient(
    skew: &SkewProduct,
    density: &InvariantDensity,
    roof: &RoofFunction,
    v: &SuspendedObservable,
    xs: &[f64],
    u_count: usize,
    tol: f64,
) -> Result<SuspensionField> {
    for &x in xs {
        let r = roof.eval(x)?;
        if r < roof.inf_r {
            return Err(Error::Config(format!(
                "roof below declared bound at x = {x}: {r} < {}",
                roof.inf_r
            )));
        }
    }
    let us = u_levels(roof, u_count);
    let tail_tol = skew.base.is_countable().then_some(1e-3);
    let mut values = Vec::with_capacity(us.len());
    let mut error_bounds = Vec::with_capacity(us.len());
    let mut traces = Vec::with_capacity(us.len());
    for &u in &us {
        let frozen = v.frozen(roof, u);
        let (q, trace) = quotient_observable(
            skew,
            density,
            &frozen,
            tol,
            crate::disint::DEFAULT_K_GAP,
            crate::disint::DEFAULT_N_CAP,
            xs,
            tail_tol,
        )?;
        values.push(q.values);
        error_bounds.push(q.error_bounds);
        traces.push(trace);
    }
    Ok(SuspensionField { xs: xs.to_vec(), us, values, error_bounds, traces })
}

/// Hölder suite over the suspension: same-level pairs only, one sub-suite
/// per u level, with the uniform-boundedness verdict aggregated.
#[allow(clippy::too_many_arguments)]
pub fn suspension_holder_suite(
    skew: &SkewProduct,
    density: &InvariantDensity,
    roof: &RoofFunction,
    v: &SuspendedObservable,
    alpha: f64,
    n_list: &[usize],
    pair_samples: usize,
    seed: u64,
) -> Result<RegularityReport> {
    let (holder_alpha, seminorm) = v.holder.ok_or_else(|| {
        Error::NotHolderAdmissible(format!("suspended observable `{}` lacks Hölder data", v.label))
    })?;
    if (holder_alpha - alpha).abs() > 1e-12 {
        return Err(Error::NotHolderAdmissible(format!(
            "declared Hölder exponent {holder_alpha} does not match requested {alpha}"
        )));
    }
    let levels = u_levels(roof, 5);
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let mut verdict = Verdict::Pass;
    let mut meta: Option<SampleMeta> = None;
    for &u in &levels {
        let frozen = v.frozen(roof, u).with_holder(alpha, seminorm);
        let sub = holder_suite(skew, density, &frozen, alpha, n_list, pair_samples, seed)?;
        if sub.verdict == Verdict::Fail {
            verdict = Verdict::Fail;
        }
        for violation in &sub.violations {
            violations.push(format!("u={u}: {violation}"));
        }
        for row in &sub.table("per_depth").expect("holder table").rows {
            let mut with_u = vec![u];
            with_u.extend_from_slice(row);
            rows.push(with_u);
        }
        meta.get_or_insert(sub.meta);
    }
    Ok(RegularityReport {
        suite: "suspension-holder".into(),
        system: skew.base.name.clone(),
        observable: v.label.clone(),
        params: vec![
            ("alpha".into(), format!("{alpha}")),
            ("roof".into(), roof.label.clone()),
            ("levels".into(), format!("{}", levels.len())),
        ],
        tables: vec![Table {
            name: "per_level_depth".into(),
            columns: vec![
                "u".into(),
                "n".into(),
                "fiber_x_sensitivity".into(),
                "word_term_seminorm".into(),
                "quotient_seminorm".into(),
                "norm_ratio".into(),
            ],
            rows,
        }],
        fitted: None,
        verdict,
        violations,
        meta: meta.expect("at least one level"),
    })
}
