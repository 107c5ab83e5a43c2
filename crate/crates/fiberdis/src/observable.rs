//! Observables on the skew-product space: evaluator, optional analytic
//! gradient, and the norm/Lipschitz data the error budgets rely on.

use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Var};
use crate::skew::SkewProduct;
use std::sync::Arc;

type EvalFn = Arc<dyn Fn(f64, f64) -> Result<f64> + Send + Sync>;
type GradFn = Arc<dyn Fn(f64, f64) -> Result<(f64, f64)> + Send + Sync>;

/// A function `v(x, z)` on the product space.
///
/// The sup-norm and fiber Lipschitz constant feed the rigorous error
/// brackets, so they must be upper bounds; each is flagged as declared
/// (trusted, hand-derived) or sampled (empirical lower-bound estimate,
/// inflated but not certified).
#[derive(Clone)]
pub struct FiberObservable {
    pub label: String,
    eval: EvalFn,
    grad: Option<GradFn>,
    pub sup_norm: f64,
    pub lip_z: f64,
    pub bounds_declared: bool,
    /// Hölder data `(alpha, seminorm bound)` on the product space, when
    /// declared.
    pub holder: Option<(f64, f64)>,
}

impl std::fmt::Debug for FiberObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiberObservable")
            .field("label", &self.label)
            .field("sup_norm", &self.sup_norm)
            .field("lip_z", &self.lip_z)
            .field("has_gradient", &self.grad.is_some())
            .finish()
    }
}

impl FiberObservable {
    /// Builds from an expression in `x`, `z`, with declared norm bounds.
    /// Smooth expressions get a forward-mode gradient which is validated
    /// against central differences at construction.
    pub fn from_expr(expr: Expr, sup_norm: f64, lip_z: f64) -> Result<Self> {
        if expr.uses(Var::U) {
            return Err(Error::Config(format!(
                "observable `{expr}` references `u`; only suspension observables may"
            )));
        }
        let label = expr.to_string();
        let smooth = !expr.has_nonsmooth_ops();
        let eval_expr = expr.clone();
        let eval: EvalFn = Arc::new(move |x, z| eval_expr.eval(&Bindings::xz(x, z)));
        let grad: Option<GradFn> = smooth.then(|| {
            let g = expr.clone();
            let f: GradFn = Arc::new(move |x, z| {
                let (_, d) = g.grad(&Bindings::xz(x, z))?;
                Ok((d[0], d[1]))
            });
            f
        });
        let out = FiberObservable {
            label,
            eval,
            grad,
            sup_norm,
            lip_z,
            bounds_declared: true,
            holder: None,
        };
        if out.grad.is_some() {
            out.validate_gradient()?;
        }
        Ok(out)
    }

    /// Builds from an expression, sampling sup-norm and fiber Lipschitz
    /// data on a dense grid (flagged as sampled, not certified).
    pub fn from_expr_sampled(expr: Expr, z_min: f64, z_max: f64) -> Result<Self> {
        let mut sup = 0.0f64;
        let mut lip = 0.0f64;
        let dz = (z_max - z_min) / 64.0;
        for i in 0..=128 {
            let x = 1e-6 + (i as f64 / 128.0) * (1.0 - 2e-6);
            let mut prev: Option<f64> = None;
            for j in 0..=64 {
                let z = z_min + dz * j as f64;
                let v = expr.eval(&Bindings::xz(x, z))?;
                sup = sup.max(v.abs());
                if let Some(p) = prev {
                    lip = lip.max((v - p).abs() / dz);
                }
                prev = Some(v);
            }
        }
        let mut out = Self::from_expr(expr, sup * 1.05, lip * 1.1)?;
        out.bounds_declared = false;
        Ok(out)
    }

    /// Closure-backed observable (no gradient).
    pub fn from_fn(
        label: impl Into<String>,
        f: impl Fn(f64, f64) -> Result<f64> + Send + Sync + 'static,
        sup_norm: f64,
        lip_z: f64,
    ) -> Self {
        FiberObservable {
            label: label.into(),
            eval: Arc::new(f),
            grad: None,
            sup_norm,
            lip_z,
            bounds_declared: true,
            holder: None,
        }
    }

    pub fn with_holder(mut self, alpha: f64, seminorm: f64) -> Self {
        self.holder = Some((alpha, seminorm));
        self
    }

    /// The observable `v ∘ F̂`, for invariance checks. Fiber Lipschitz data
    /// contracts by the declared one-step factor; the sup-norm carries over.
    pub fn compose_with(&self, skew: &SkewProduct) -> FiberObservable {
        let inner = self.eval.clone();
        let base = skew.base.clone();
        let fiber = skew.fiber.clone();
        let lip = self.lip_z;
        let eval: EvalFn = Arc::new(move |x, z| {
            let id = base.branch_of(x)?;
            let gz = fiber.eval_on_branch(id, x, z);
            let fx = base.forward_on_branch(id, x);
            (inner)(fx, gz)
        });
        FiberObservable {
            label: format!("({}) after one step", self.label),
            eval,
            grad: None,
            sup_norm: self.sup_norm,
            lip_z: lip * skew.fiber.c_lambda_s * (-skew.fiber.lambda_s).exp(),
            bounds_declared: self.bounds_declared,
            holder: None,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, z: f64) -> Result<f64> {
        (self.eval)(x, z)
    }

    /// `(D_u v, D_s v)(x, z)`; errors when no analytic gradient exists.
    pub fn gradient(&self, x: f64, z: f64) -> Result<(f64, f64)> {
        match &self.grad {
            Some(g) => g(x, z),
            None => Err(Error::InsufficientSmoothness(format!(
                "observable `{}` has no analytic gradient",
                self.label
            ))),
        }
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    /// Checks the declared gradient against central differences at 100
    /// deterministic points.
    fn validate_gradient(&self) -> Result<()> {
        let h = 1e-6;
        for i in 0..100 {
            let x = 0.01 + 0.98 * ((0.5 + 0.618_033_988_749_894_9 * (i as f64 + 1.0)).fract());
            let z = -0.9 + 1.8 * ((0.5 + 0.414_213_562_373_095_1 * (i as f64 + 1.0)).fract());
            let (du, ds) = match self.gradient(x, z) {
                Ok(g) => g,
                Err(Error::NonDifferentiable(_)) => continue,
                Err(e) => return Err(e),
            };
            let ok = |analytic: f64, fd: f64| {
                (analytic - fd).abs() <= 1e-6 * analytic.abs().max(fd.abs()).max(1.0)
            };
            let fd_x = (self.eval(x + h, z)? - self.eval(x - h, z)?) / (2.0 * h);
            let fd_z = (self.eval(x, z + h)? - self.eval(x, z - h)?) / (2.0 * h);
            if !ok(du, fd_x) || !ok(ds, fd_z) {
                return Err(Error::GradientMismatch(format!(
                    "`{}` at ({x:.6}, {z:.6}): analytic ({du:.3e}, {ds:.3e}) vs fd ({fd_x:.3e}, {fd_z:.3e})",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    #[test]
    fn expression_observable_evaluates() {
        let v = FiberObservable::from_expr(Expr::parse("z^2").unwrap(), 1.0, 2.0).unwrap();
        assert_eq!(v.eval(0.3, 0.5).unwrap(), 0.25);
        let (du, ds) = v.gradient(0.3, 0.5).unwrap();
        assert_eq!(du, 0.0);
        assert!((ds - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonsmooth_expression_has_no_gradient() {
        let v = FiberObservable::from_expr(Expr::parse("abs(z)").unwrap(), 1.0, 1.0).unwrap();
        assert!(!v.has_gradient());
        assert!(v.gradient(0.3, 0.5).is_err());
    }

    #[test]
    fn sampled_bounds_cover_true_values() {
        let v = FiberObservable::from_expr_sampled(
            Expr::parse("z*cos(2*pi*x)").unwrap(),
            -1.0,
            1.0,
        )
        .unwrap();
        assert!(!v.bounds_declared);
        assert!(v.sup_norm >= 1.0 && v.sup_norm < 1.2);
        assert!(v.lip_z >= 1.0 && v.lip_z < 1.3);
    }

    #[test]
    fn composition_with_skew_matches_direct_evaluation() {
        let system = catalog::build(catalog::SystemId::DoublingDigit);
        let v = FiberObservable::from_expr(Expr::parse("z^2").unwrap(), 1.0, 2.0).unwrap();
        let vf = v.compose_with(&system.skew);
        let (x, z) = (0.3, 0.25);
        // One step: z -> (z - 1)/3 on the left branch.
        let expected = ((z - 1.0) / 3.0) * ((z - 1.0) / 3.0);
        assert!((vf.eval(x, z).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn u_variable_rejected() {
        assert!(FiberObservable::from_expr(Expr::parse("u*z").unwrap(), 1.0, 1.0).is_err());
    }
}
