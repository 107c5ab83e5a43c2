//! Cross-module integration checks that combine the transfer machinery,
//! the measure construction and the disintegration on the catalog.

use fiberdis::base::{self, DensityMethod};
use fiberdis::catalog::{build, SystemId};
use fiberdis::disint;
use fiberdis::eta;
use fiberdis::expr::Expr;
use fiberdis::observable::FiberObservable;
use fiberdis::transfer::{self, GridFunction};

fn observable(text: &str, sup: f64, lip: f64) -> FiberObservable {
    FiberObservable::from_expr(Expr::parse(text).unwrap(), sup, lip).unwrap()
}

/// The transfer operator preserves nu-integrals of random observables on
/// both catalog bases, up to their reported annotations.
#[test]
fn transfer_preserves_invariant_integrals() {
    let one = Expr::parse("1").unwrap();
    for (system, tol) in [(SystemId::DoublingPure, 1e-9), (SystemId::GaussAffine, 3e-3)] {
        let s = build(system);
        for text in ["x^2", "cos(2*pi*x)", "exp(x)/3"] {
            let v = Expr::parse(text).unwrap();
            let r = transfer::duality_residual(&s.skew.base, &s.density, &one, &v, 1, 16384)
                .unwrap();
            assert!(r < tol, "{system:?}/{text}: residual {r}");
        }
    }
}

/// The operator-iterated table density of the doubling map agrees with
/// the analytic one, and the depth-words transfer matches iterated
/// single-step transfer within the interpolation slack.
#[test]
fn table_density_consistency() {
    let map = fiberdis::catalog::doubling_map();
    let table =
        base::density::invariant_density(&map, DensityMethod::OperatorIteration, 512, 1e-10)
            .unwrap();
    let w =
        GridFunction::from_expr(&Expr::parse("sin(2*pi*x)").unwrap(), transfer::uniform_grid(64))
            .unwrap();
    let deep = transfer::apply_transfer(&map, &table, &w, 3, None).unwrap();
    let mut nested = w;
    for _ in 0..3 {
        nested = transfer::apply_transfer(&map, &table, &nested, 1, None).unwrap();
    }
    for (a, b) in deep.values.iter().zip(&nested.values) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

/// The sandwich value, the disintegrated integral and the Monte-Carlo
/// oracle all see the same number on the digit system.
#[test]
fn three_routes_to_the_digit_variance() {
    let s = build(SystemId::DoublingDigit);
    let v = observable("z^2", 1.0, 2.0);

    let sandwich = eta::eta_value(&s.skew, &s.density, &v, 1e-4, 25).unwrap();
    assert!((sandwich.value - 0.125).abs() < 1e-4);

    let r = disint::disintegration_residual(&s.skew, &s.density, &v, 1e-4).unwrap();
    assert!((r.quotient_integral - 0.125).abs() < 1e-4);
    assert!(r.residual <= r.bound);

    let (mc, se) =
        disint::backward_sampling_oracle(&s.skew, &s.density, &v, 0.3, 12, 200_000, 1).unwrap();
    let exact = (1.0 - 9.0f64.powi(-12)) / 8.0;
    assert!((mc - exact).abs() <= 4.0 * se, "mc {mc} vs {exact} (se {se})");
}

/// Quotient values stay within the sup-norm and transport the fiber
/// Lipschitz structure: recomputing with a shifted distinguished point
/// stays within the contraction-weighted distance.
#[test]
fn quotient_stability_on_cos() {
    let s = build(SystemId::DoublingCos);
    let v = observable("z*cos(2*pi*x)", 1.0, 1.0);
    let xs = base::midpoints(64);
    let (q, trace) =
        disint::quotient_observable(&s.skew, &s.density, &v, 1e-5, 5, 25, &xs, None).unwrap();
    assert!(q.sup() <= v.sup_norm + 1e-12);
    assert!(!trace.rows.is_empty());
    for w in trace.rows.windows(2) {
        assert!(w[1].apriori_bound < w[0].apriori_bound);
    }
}

/// Symbolic-metric comparability: the forward constant is recorded and
/// used, the reverse constant only reported.
#[test]
fn symbolic_metric_comparability() {
    let map = fiberdis::catalog::doubling_map();
    let metric = base::BaseMetric::Symbolic { theta: 0.5, cap: 48 };
    let report = base::metric::comparability_report(&map, &metric, 400).unwrap();
    assert!(report.c1 <= 1.0 + 1e-9);
    assert!(report.reverse.is_finite());
}
