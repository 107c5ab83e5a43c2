//! The composition (Koopman) operator and the transfer operator
//! normalized by the invariant density, evaluated by direct inverse-branch
//! summation at query points.

use crate::base::{self, ExpandingMap, InvariantDensity};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::numeric::{par_try_sum_by, NeumaierSum};
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn(f64) -> Result<f64> + Send + Sync>;

/// A function of the base coordinate carried on a boundary-avoiding grid,
/// with an optional analytic backing used for all compositions.
#[derive(Clone)]
pub struct GridFunction {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    backing: Option<ScalarFn>,
    /// Accumulated annotation (truncation and interpolation slack).
    pub error_bound: f64,
    /// Nodes re-sampled because their image was boundary-degenerate.
    pub jittered_nodes: usize,
}

impl std::fmt::Debug for GridFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridFunction")
            .field("len", &self.xs.len())
            .field("error_bound", &self.error_bound)
            .field("has_backing", &self.backing.is_some())
            .finish()
    }
}

/// Uniform midpoint grid on the open interval.
pub fn uniform_grid(resolution: usize) -> Vec<f64> {
    base::midpoints(resolution)
}

impl GridFunction {
    pub fn from_expr(expr: &Expr, xs: Vec<f64>) -> Result<GridFunction> {
        let e = expr.clone();
        let backing: ScalarFn = Arc::new(move |x| e.eval(&Bindings::x_only(x)));
        let values = xs.iter().map(|&x| backing(x)).collect::<Result<Vec<_>>>()?;
        Ok(GridFunction { xs, values, backing: Some(backing), error_bound: 0.0, jittered_nodes: 0 })
    }

    pub fn from_fn(
        xs: Vec<f64>,
        f: impl Fn(f64) -> Result<f64> + Send + Sync + 'static,
    ) -> Result<GridFunction> {
        let backing: ScalarFn = Arc::new(f);
        let values = xs.iter().map(|&x| backing(x)).collect::<Result<Vec<_>>>()?;
        Ok(GridFunction { xs, values, backing: Some(backing), error_bound: 0.0, jittered_nodes: 0 })
    }

    pub fn from_values(xs: Vec<f64>, values: Vec<f64>) -> GridFunction {
        assert_eq!(xs.len(), values.len());
        GridFunction { xs, values, backing: None, error_bound: 0.0, jittered_nodes: 0 }
    }

    /// Analytic backing when present, linear interpolation of the grid
    /// otherwise (the backing always wins for composition).
    pub fn eval(&self, x: f64) -> Result<f64> {
        if let Some(b) = &self.backing {
            return b(x);
        }
        let n = self.xs.len();
        if n == 1 {
            return Ok(self.values[0]);
        }
        let lo = self.xs[0];
        let hi = self.xs[n - 1];
        let t = ((x - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let frac = t - i as f64;
        Ok(self.values[i] * (1.0 - frac) + self.values[i + 1] * frac)
    }

    pub fn sup_on_grid(&self) -> f64 {
        self.values.iter().copied().map(f64::abs).fold(0.0, f64::max)
    }

    pub fn set_backing(&mut self, backing: ScalarFn) {
        self.backing = Some(backing);
    }

    pub fn has_backing(&self) -> bool {
        self.backing.is_some()
    }
}

/// `(U w)(x) = w(F x)` on the grid; the analytic backing is composed when
/// available. Nodes whose image is boundary-degenerate are re-sampled with
/// a small jitter and counted.
pub fn apply_koopman(map: &ExpandingMap, w: &GridFunction) -> Result<GridFunction> {
    let margin = map.boundary_margin;
    // Degenerate image: the node cannot be classified (sits at a cut) or
    // its image lands at the edge of the open domain.
    let image = |x: f64| -> Result<f64> {
        let fx = map.forward(x)?;
        if fx < margin || fx > 1.0 - margin {
            return Err(Error::BoundaryPoint { x: fx, margin });
        }
        Ok(fx)
    };
    let mut jittered = 0usize;
    let mut xs = Vec::with_capacity(w.xs.len());
    let mut values = Vec::with_capacity(w.xs.len());
    for &x0 in &w.xs {
        let mut x = x0;
        let mut attempts = 0;
        let value = loop {
            match image(x).and_then(|fx| w.eval(fx)) {
                Ok(v) => break v,
                Err(_) if attempts < 8 => {
                    attempts += 1;
                    jittered += usize::from(attempts == 1);
                    x = (x0 + attempts as f64 * 3.0 * margin).min(1.0 - margin);
                }
                Err(e) => return Err(e),
            }
        };
        xs.push(x);
        values.push(value);
    }
    let backing = w.backing.clone().map(|inner| {
        let map = map.clone();
        let f: ScalarFn = Arc::new(move |x| inner(map.forward(x)?));
        f
    });
    Ok(GridFunction {
        xs,
        values,
        backing,
        error_bound: w.error_bound,
        jittered_nodes: w.jittered_nodes + jittered,
    })
}

/// Evaluates `(L^n w)(x)` by depth-`n` inverse-branch summation:
/// `phi(x)^{-1} sum_h J_h(x) phi(h x) w(h x)` over the (possibly
/// truncated) word set.
pub fn transfer_at(
    map: &ExpandingMap,
    density: &InvariantDensity,
    w: &GridFunction,
    n: usize,
    ids: &[u32],
    x: f64,
) -> Result<f64> {
    let mut acc = NeumaierSum::new();
    let mut failure: Option<Error> = None;
    base::for_each_word(map, x, n, ids, false, |ctx| {
        if failure.is_some() {
            return;
        }
        let hx = ctx.hx();
        match w.eval(hx) {
            Ok(v) => acc.add(ctx.jacobian() * density.eval(hx) * v),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(acc.value() / density.eval(x))
}

/// `L^n w` on the grid of `w`, with the countable-branch truncation error
/// `sup|w| * tail / floor(phi)` folded into the error annotation.
pub fn apply_transfer(
    map: &ExpandingMap,
    density: &InvariantDensity,
    w: &GridFunction,
    n: usize,
    tail_tol: Option<f64>,
) -> Result<GridFunction> {
    assert!(n >= 1);
    let (ids, truncation) = map.enumeration_ids(n, tail_tol)?;
    base::check_budget(ids.len(), n)?;
    let values: Vec<f64> = w
        .xs
        .iter()
        .map(|&x| transfer_at(map, density, w, n, &ids, x))
        .collect::<Result<Vec<_>>>()?;
    let trunc_err = truncation
        .map(|t| w.sup_on_grid() * t.omitted_bound / density.floor)
        .unwrap_or(0.0);
    let backing = w.backing.clone().map(|_| {
        let map = map.clone();
        let density = density.clone();
        let w = w.clone();
        let ids = ids.clone();
        let f: ScalarFn = Arc::new(move |x| transfer_at(&map, &density, &w, n, &ids, x));
        f
    });
    Ok(GridFunction {
        xs: w.xs.clone(),
        values,
        backing,
        error_bound: w.error_bound + trunc_err,
        jittered_nodes: w.jittered_nodes,
    })
}

/// `|∫ (U^n w) v dnu - ∫ w (L^n v) dnu|` by midpoint quadrature.
///
/// Quadrature nodes whose forward orbit degenerates are excluded from both
/// sides; more than 0.1% exclusions is an error.
pub fn duality_residual(
    map: &ExpandingMap,
    density: &InvariantDensity,
    w: &Expr,
    v: &Expr,
    n: usize,
    quad_res: usize,
) -> Result<f64> {
    let tail_tol = map.is_countable().then_some(1e-3);
    let (ids, _) = map.enumeration_ids(n, tail_tol)?;
    base::check_budget(ids.len(), n)?;
    let v_grid = GridFunction::from_expr(v, vec![0.5])?;
    let nodes = uniform_grid(quad_res);
    struct NodeEval {
        left: f64,
        right: f64,
    }
    let per_node = |i: usize| -> Result<Option<NodeEval>> {
        let x = nodes[i];
        let phi = density.eval(x);
        let mut fx = x;
        for step in 0..n {
            match map.forward(fx) {
                Ok(y) => fx = y,
                Err(_) => {
                    let _ = step;
                    return Ok(None);
                }
            }
        }
        let left = w.eval(&Bindings::x_only(fx))? * v.eval(&Bindings::x_only(x))? * phi;
        let right =
            w.eval(&Bindings::x_only(x))? * transfer_at(map, density, &v_grid, n, &ids, x)? * phi;
        Ok(Some(NodeEval { left, right }))
    };
    use rayon::prelude::*;
    let evals: Vec<Result<Option<NodeEval>>> =
        (0..nodes.len()).into_par_iter().map(per_node).collect();
    let mut left = NeumaierSum::new();
    let mut right = NeumaierSum::new();
    let mut excluded = 0usize;
    for e in evals {
        match e? {
            Some(node) => {
                left.add(node.left);
                right.add(node.right);
            }
            None => excluded += 1,
        }
    }
    if excluded * 1000 > nodes.len() {
        return Err(Error::TooManyExcludedNodes { excluded, total: nodes.len() });
    }
    let r = quad_res as f64;
    Ok((left.value() / r - right.value() / r).abs())
}

/// Parallel map of `transfer_at` over a point set (deterministic order).
pub fn transfer_on_points(
    map: &ExpandingMap,
    density: &InvariantDensity,
    w: &GridFunction,
    n: usize,
    ids: &[u32],
    points: &[f64],
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|&x| transfer_at(map, density, w, n, ids, x))
        .collect()
}

/// `∫ f dnu` by the composite midpoint rule.
pub fn integrate_nu(
    density: &InvariantDensity,
    quad_res: usize,
    f: impl Fn(f64) -> Result<f64> + Sync,
) -> Result<f64> {
    let r = quad_res as f64;
    let value = par_try_sum_by(quad_res, |i| {
        let x = (i as f64 + 0.5) / r;
        Ok::<f64, Error>(f(x)? * density.eval(x))
    })?;
    Ok(value / r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::DensityMethod;
    use crate::catalog;

    fn doubling() -> (ExpandingMap, InvariantDensity) {
        let map = catalog::doubling_map();
        let d = base::density::invariant_density(&map, DensityMethod::Analytic, 256, 1e-10).unwrap();
        (map, d)
    }

    fn gauss() -> (ExpandingMap, InvariantDensity) {
        let map = catalog::gauss_map();
        let d = base::density::invariant_density(&map, DensityMethod::Analytic, 256, 1e-9).unwrap();
        (map, d)
    }

    #[test]
    fn koopman_point_checks() {
        let (map, _) = doubling();
        let w = GridFunction::from_expr(&Expr::parse("x").unwrap(), vec![0.3]).unwrap();
        let uw = apply_koopman(&map, &w).unwrap();
        assert!((uw.values[0] - 0.6).abs() < 1e-15);

        let c = GridFunction::from_expr(&Expr::parse("7").unwrap(), uniform_grid(64)).unwrap();
        let uc = apply_koopman(&map, &c).unwrap();
        assert!(uc.values.iter().all(|&v| v == 7.0));

        let (gmap, _) = gauss();
        let w = GridFunction::from_expr(&Expr::parse("x").unwrap(), vec![0.4]).unwrap();
        let uw = apply_koopman(&gmap, &w).unwrap();
        assert!((uw.values[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn koopman_jitters_degenerate_nodes() {
        let (map, _) = doubling();
        // Just below the cut the node cannot be classified; just above it
        // the image lands at the edge of the open domain. Both re-sample.
        let w = GridFunction::from_expr(
            &Expr::parse("x").unwrap(),
            vec![0.5 - 1e-10, 0.5 + 1e-10],
        )
        .unwrap();
        let uw = apply_koopman(&map, &w).unwrap();
        assert_eq!(uw.jittered_nodes, 2);
        assert!(uw.xs[0] != 0.5 - 1e-10);
        // An image at an interior cut is fine for continuous observables.
        let w = GridFunction::from_expr(&Expr::parse("x").unwrap(), vec![0.25]).unwrap();
        let uw = apply_koopman(&map, &w).unwrap();
        assert_eq!(uw.jittered_nodes, 0);
        assert_eq!(uw.values[0], 0.5);
    }

    #[test]
    fn transfer_fixes_constants() {
        let (map, d) = doubling();
        let one = GridFunction::from_expr(&Expr::parse("1").unwrap(), uniform_grid(128)).unwrap();
        for n in [1usize, 3, 7] {
            let l = apply_transfer(&map, &d, &one, n, None).unwrap();
            for &v in &l.values {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transfer_branch_pair_cancellation() {
        // L(cos 2 pi x)(x) = (cos(pi x) + cos(pi x + pi))/2 = 0.
        let (map, d) = doubling();
        let w =
            GridFunction::from_expr(&Expr::parse("cos(2*pi*x)").unwrap(), uniform_grid(256)).unwrap();
        let l = apply_transfer(&map, &d, &w, 1, None).unwrap();
        for &v in &l.values {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn gauss_truncated_transfer_of_one() {
        let (map, d) = gauss();
        let one = GridFunction::from_expr(&Expr::parse("1").unwrap(), uniform_grid(128)).unwrap();
        // tail_tol 1e-3 keeps branches 1..=1000; the omitted mass folded
        // through the density ratio bound is at most 2/K.
        let l = apply_transfer(&map, &d, &one, 1, Some(1e-3)).unwrap();
        for &v in &l.values {
            assert!((v - 1.0).abs() <= 2e-3, "L1 = {v}");
        }
        assert!(l.error_bound <= 2.1e-3);
        assert!(l.error_bound > 0.0);
    }

    #[test]
    fn koopman_transfer_is_identity() {
        let (map, d) = doubling();
        let w = GridFunction::from_expr(
            &Expr::parse("x^2 + sin(2*pi*x)").unwrap(),
            uniform_grid(64),
        )
        .unwrap();
        let uw = apply_koopman(&map, &w).unwrap();
        let luw = apply_transfer(&map, &d, &uw, 1, None).unwrap();
        for (x, v) in luw.xs.iter().zip(&luw.values) {
            let expected = w.eval(*x).unwrap();
            assert!((v - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn transfer_module_identity() {
        // L(Uw * v) = w * Lv.
        let (map, d) = doubling();
        let w_expr = Expr::parse("x^2").unwrap();
        let v_expr = Expr::parse("cos(2*pi*x) + x").unwrap();
        let map2 = map.clone();
        let (we, ve) = (w_expr.clone(), v_expr.clone());
        let product = GridFunction::from_fn(uniform_grid(64), move |x| {
            let fx = map2.forward(x)?;
            Ok(we.eval(&Bindings::x_only(fx))? * ve.eval(&Bindings::x_only(x))?)
        })
        .unwrap();
        let v = GridFunction::from_expr(&v_expr, uniform_grid(64)).unwrap();
        let lhs = apply_transfer(&map, &d, &product, 1, None).unwrap();
        let lv = apply_transfer(&map, &d, &v, 1, None).unwrap();
        for ((x, a), lvx) in lhs.xs.iter().zip(&lhs.values).zip(&lv.values) {
            let rhs = w_expr.eval(&Bindings::x_only(*x)).unwrap() * lvx;
            assert!((a - rhs).abs() < 1e-10, "at {x}: {a} vs {rhs}");
        }
    }

    #[test]
    fn sup_bound_and_positivity() {
        let (map, d) = doubling();
        let v = GridFunction::from_expr(
            &Expr::parse("x^2 + sin(2*pi*x) + 1.5").unwrap(),
            uniform_grid(256),
        )
        .unwrap();
        let lv = apply_transfer(&map, &d, &v, 1, None).unwrap();
        for (x, out) in lv.xs.iter().zip(&lv.values) {
            // |Lv(x)| <= max over preimages of |v|, and v >= 0 => Lv >= 0.
            let mut pre_max = 0.0f64;
            for id in 0..2u32 {
                let hx = map.inverse_step(id, *x);
                pre_max = pre_max.max(v.eval(hx).unwrap().abs());
            }
            assert!(out.abs() <= pre_max + 1e-13);
            assert!(*out >= -1e-13);
        }
    }

    #[test]
    fn depth_words_match_iterated_transfer() {
        let (map, d) = doubling();
        let v = GridFunction::from_expr(
            &Expr::parse("sin(2*pi*x) + x^3").unwrap(),
            uniform_grid(32),
        )
        .unwrap();
        let deep = apply_transfer(&map, &d, &v, 4, None).unwrap();
        let mut nested = v.clone();
        for _ in 0..4 {
            nested = apply_transfer(&map, &d, &nested, 1, None).unwrap();
        }
        for (a, b) in deep.values.iter().zip(&nested.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn duality_residuals() {
        let (map, d) = doubling();
        let x = Expr::parse("x").unwrap();
        let cos = Expr::parse("cos(2*pi*x)").unwrap();
        let one = Expr::parse("1").unwrap();
        let r = duality_residual(&map, &d, &x, &cos, 1, 4096).unwrap();
        assert!(r < 1e-9, "residual {r}");
        let r = duality_residual(&map, &d, &one, &one, 1, 4096).unwrap();
        assert!(r < 1e-14);
        // With w = 1 the residual is |∫v - ∫L^n v| (nu-integral preserved);
        // the midpoint-rule mismatch between the two sides is h^2-sized.
        let v = Expr::parse("x^2").unwrap();
        let r = duality_residual(&map, &d, &one, &v, 2, 16384).unwrap();
        assert!(r < 1e-9, "residual {r}");
    }

    #[test]
    fn gauss_duality_within_truncation() {
        let (map, d) = gauss();
        let one = Expr::parse("1").unwrap();
        let v = Expr::parse("x").unwrap();
        let r = duality_residual(&map, &d, &one, &v, 1, 4096).unwrap();
        // Truncation at K = 1000 leaves a ~1e-3-sized mass defect.
        assert!(r < 3e-3, "residual {r}");
    }
}
