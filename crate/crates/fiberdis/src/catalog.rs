//! Built-in example systems with hand-certified constants.
//!
//! Base maps:
//! - `doubling`: `F(x) = 2x mod 1`. Inverse branches contract by exactly
//!   `2^-n`, Jacobians are constant, so `lambda = ln 2`, `c_lambda = 1`,
//!   `c_j = 0`, `c_j' = 1` (the `2^n` words each contribute `2^-n`) and
//!   `c_d = 0`.
//! - `gauss`: `F(x) = 1/x mod 1` with countable branches
//!   `h_k(y) = 1/(k+y)`. Words act as Möbius maps `(p x + p')/(q x + q')`
//!   with unit determinant, so `|Dh| = (q x + q')^{-2}`; the slowest decay
//!   runs along the all-ones words where `q' = Fib(n+1)`, giving
//!   `|Dh| <= g^2 exp(-2 ln(g) n)` with `g` the golden ratio. The
//!   distortion derivative `|d/dy log J_h| = 2q/(qy + q') <= 2` certifies
//!   `c_j = 2`. `c_j'` and `c_d` come from the same geometric series
//!   folded through bounded distortion (`sum_h sup J_h <= e^{c_j} sup P^n 1
//!   <= e^2 pi^2/6`), declared with generous round numbers.
//!
//! Fibers, all with `n0 = 1`:
//! - `pure`: `G = z/3` on `[-1, 1]`; x-independent.
//! - `cos`: `G = (z + cos 2 pi x)/3` on `[-1, 1]`. The base-direction
//!   sensitivity of `G_n(h x, z)` sums the geometric series
//!   `2 pi sum_j 6^{-j} <= 2 pi / 5`, which also bounds the mixed
//!   derivative products `|D_u G_m (hx, z) Dh(x)| <= (2 pi/5) 2^{m-n}`.
//! - `digit`: `G = (z + s(x))/3`, `s = -1` on the left branch, `+1` on the
//!   right, on `[-1, 1]`. Piecewise in x; fiber values over a word depend
//!   only on the word, so the same-word x-sensitivity is 0. Its invariant
//!   fiber measures are the classical symmetric Cantor-type measures.
//! - `gauss-affine`: `G = (z + 1/(1+x))/2` on `[0, 1]` over the gauss
//!   base. `|D_u G| <= 1/2`, `D_s G = 1/2`, and the word sums give the
//!   declared sensitivity constants below.

use crate::base::{
    density::AnalyticDensity, Branch, BranchFormula, BranchSet, CountableFamily,
    DeclaredConstants, ExpandingMap, Smoothness, BOUNDARY_MARGIN,
};
use crate::base::{BaseMetric, DensityMethod, InvariantDensity};
use crate::error::{Error, Result};
use crate::skew::{FiberKind, FiberMap, FiberRegularity, SkewDeclared, SkewProduct};

/// Golden ratio.
pub const GOLDEN: f64 = 1.618_033_988_749_895;

/// Named systems shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemId {
    DoublingPure,
    DoublingCos,
    DoublingDigit,
    GaussAffine,
}

impl SystemId {
    pub fn parse(name: &str) -> Result<SystemId> {
        Ok(match name {
            "doubling-pure" => SystemId::DoublingPure,
            "doubling-cos" => SystemId::DoublingCos,
            "doubling-digit" => SystemId::DoublingDigit,
            "gauss-affine" => SystemId::GaussAffine,
            other => {
                return Err(Error::Config(format!(
                    "unknown system `{other}` (catalog: doubling-pure, doubling-cos, doubling-digit, gauss-affine)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemId::DoublingPure => "doubling-pure",
            SystemId::DoublingCos => "doubling-cos",
            SystemId::DoublingDigit => "doubling-digit",
            SystemId::GaussAffine => "gauss-affine",
        }
    }

    pub fn all() -> [SystemId; 4] {
        [
            SystemId::DoublingPure,
            SystemId::DoublingCos,
            SystemId::DoublingDigit,
            SystemId::GaussAffine,
        ]
    }
}

/// A fully assembled system: skew product plus the invariant density of
/// its base.
#[derive(Debug, Clone)]
pub struct SkewSystem {
    pub id: Option<SystemId>,
    pub skew: SkewProduct,
    pub density: InvariantDensity,
}

/// The binary shift base map.
pub fn doubling_map() -> ExpandingMap {
    ExpandingMap {
        name: "doubling".into(),
        branch_set: BranchSet::Finite(vec![
            Branch { lo: 0.0, hi: 0.5, formula: BranchFormula::Affine { a: 2.0, b: 0.0 } },
            Branch { lo: 0.5, hi: 1.0, formula: BranchFormula::Affine { a: 2.0, b: -1.0 } },
        ]),
        constants: DeclaredConstants {
            lambda: std::f64::consts::LN_2,
            c_lambda: 1.0,
            c_j: 0.0,
            c_j_prime: 1.0,
            c_d: 0.0,
            certified: true,
        },
        smoothness: Smoothness::C2,
        boundary_margin: BOUNDARY_MARGIN,
        min_slope: 2.0,
        exact_binary_shift: true,
        known_density: Some(AnalyticDensity::Uniform),
    }
}

/// The continued-fraction base map.
pub fn gauss_map() -> ExpandingMap {
    ExpandingMap {
        name: "gauss".into(),
        branch_set: BranchSet::Countable(CountableFamily::Gauss),
        constants: DeclaredConstants {
            lambda: 2.0 * GOLDEN.ln(),
            c_lambda: GOLDEN * GOLDEN,
            c_j: 2.0,
            c_j_prime: 30.0,
            c_d: 16.0,
            certified: true,
        },
        smoothness: Smoothness::C2,
        boundary_margin: BOUNDARY_MARGIN,
        // |F'| = 1/x^2 > 1 on every branch interior, but the infimum over
        // the first branch is 1; uniform expansion holds at depth through
        // (lambda, c_lambda).
        min_slope: 1.0,
        exact_binary_shift: false,
        known_density: Some(AnalyticDensity::GaussMeasure),
    }
}

fn metric_default() -> BaseMetric {
    BaseMetric::Euclidean
}

/// Builds a catalog system with its certified constants and analytic
/// density.
pub fn build(id: SystemId) -> SkewSystem {
    let ln3 = 3.0f64.ln();
    let (base, fiber, declared) = match id {
        SystemId::DoublingPure => (
            doubling_map(),
            FiberMap {
                z_min: -1.0,
                z_max: 1.0,
                kind: FiberKind::PureThird,
                lambda_s: ln3,
                c_lambda_s: 1.0,
                n0: 1,
                z0: 0.0,
                regularity: FiberRegularity::Smooth,
            },
            SkewDeclared { fiber_x_lip: Some(0.0), du_product_c: Some(0.0) },
        ),
        SystemId::DoublingCos => (
            doubling_map(),
            FiberMap {
                z_min: -1.0,
                z_max: 1.0,
                kind: FiberKind::CosThird,
                lambda_s: ln3,
                c_lambda_s: 1.0,
                n0: 1,
                z0: 0.0,
                regularity: FiberRegularity::Smooth,
            },
            SkewDeclared {
                // 2 pi sum_{j>=1} 6^{-j} = 2 pi / 5 bounds both the
                // x-sensitivity of fiber iterates over words and the mixed
                // derivative products (with rate 2^{m-n}).
                fiber_x_lip: Some(2.0 * std::f64::consts::PI / 5.0),
                du_product_c: Some(2.0 * std::f64::consts::PI / 5.0),
            },
        ),
        SystemId::DoublingDigit => (
            doubling_map(),
            FiberMap {
                z_min: -1.0,
                z_max: 1.0,
                kind: FiberKind::DigitThird,
                lambda_s: ln3,
                c_lambda_s: 1.0,
                n0: 1,
                z0: 0.0,
                regularity: FiberRegularity::PiecewiseAligned,
            },
            SkewDeclared { fiber_x_lip: Some(0.0), du_product_c: None },
        ),
        SystemId::GaussAffine => (
            gauss_map(),
            FiberMap {
                z_min: 0.0,
                z_max: 1.0,
                kind: FiberKind::GaussAffine,
                lambda_s: std::f64::consts::LN_2,
                c_lambda_s: 1.0,
                n0: 1,
                z0: 0.5,
                regularity: FiberRegularity::Smooth,
            },
            SkewDeclared {
                // (1/2) sum_{i>=0} (2 g^2)^{-i} = g^2/(2 g^2 - 1) ~ 0.618
                // for the x-sensitivity; the mixed products pick up one
                // more golden factor, both declared with headroom.
                fiber_x_lip: Some(0.7),
                du_product_c: Some(0.7),
            },
        ),
    };
    let density = crate::base::density::invariant_density(&base, DensityMethod::Analytic, 1024, 1e-8)
        .expect("catalog densities satisfy their own invariants");
    SkewSystem {
        id: Some(id),
        skew: SkewProduct { base, fiber, metric: metric_default(), declared },
        density,
    }
}

/// Builds a catalog system by name.
pub fn build_named(name: &str) -> Result<SkewSystem> {
    Ok(build(SystemId::parse(name)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skew::z_grid;

    #[test]
    fn fiber_invariance_on_catalog() {
        for id in SystemId::all() {
            let system = build(id);
            let fiber = &system.skew.fiber;
            for x in crate::base::low_discrepancy_points(100, 1e-6) {
                let branch = system.skew.base.branch_of(x).unwrap();
                for z in z_grid(fiber, 33) {
                    let gz = fiber.eval_on_branch(branch, x, z);
                    assert!(
                        fiber.contains(gz),
                        "{id:?}: G({x}, {z}) = {gz} leaves the fiber interval"
                    );
                }
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for id in SystemId::all() {
            assert_eq!(SystemId::parse(id.name()).unwrap(), id);
        }
        assert!(SystemId::parse("nope").is_err());
    }
}
