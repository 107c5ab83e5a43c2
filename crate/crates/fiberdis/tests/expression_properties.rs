//! Property tests for the expression language: print/parse round-trip,
//! gradient exactness against Richardson-extrapolated differences, and
//! evaluation determinism.

use fiberdis::expr::{Bindings, Expr, Func, Var};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-4.0..4.0f64).prop_map(|v| Expr::Num(v.abs())),
        Just(Expr::Pi),
        Just(Expr::Var(Var::X)),
        Just(Expr::Var(Var::Z)),
        Just(Expr::Var(Var::U)),
    ]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(5, 64, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
            (inner.clone(), 0..4i32).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            (inner.clone()).prop_map(|a| Expr::Call(Func::Sin, vec![a])),
            (inner.clone()).prop_map(|a| Expr::Call(Func::Cos, vec![a])),
            (inner.clone()).prop_map(|a| Expr::Call(Func::Exp, vec![a])),
            (inner.clone()).prop_map(|a| Expr::Call(Func::Abs, vec![a])),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| Expr::Call(Func::Min, vec![a, b])),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Max, vec![a, b])),
        ]
    })
}

/// Smooth expressions for the gradient property (no abs/min/max/sqrt, and
/// arguments kept bounded so exp stays finite).
fn smooth_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-2.0..2.0f64).prop_map(|v| Expr::Num(v.abs())),
        Just(Expr::Var(Var::X)),
        Just(Expr::Var(Var::Z)),
        Just(Expr::Var(Var::U)),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), 1..3i32).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            inner.clone().prop_map(|a| Expr::Call(Func::Sin, vec![a])),
            inner.prop_map(|a| Expr::Call(Func::Cos, vec![a])),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn print_parse_round_trip(tree in arb_expr()) {
        let printed = tree.to_string();
        let reparsed = Expr::parse(&printed)
            .unwrap_or_else(|e| panic!("`{printed}` failed to reparse: {e}"));
        prop_assert_eq!(tree, reparsed);
    }

    #[test]
    fn evaluation_is_bitwise_deterministic(
        tree in arb_expr(),
        x in 0.01..0.99f64,
        z in -0.9..0.9f64,
        u in 0.0..1.0f64,
    ) {
        let b = Bindings::xzu(x, z, u);
        if let (Ok(a), Ok(c)) = (tree.eval(&b), tree.eval(&b)) {
            prop_assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn gradient_matches_richardson_differences(
        tree in smooth_expr(),
        x in 0.05..0.95f64,
        z in -0.8..0.8f64,
        u in 0.1..0.9f64,
    ) {
        let b = Bindings::xzu(x, z, u);
        let Ok((value, grad)) = tree.grad(&b) else { return Ok(()) };
        prop_assume!(value.abs() < 1e6);
        for (slot, var) in [Var::X, Var::Z, Var::U].into_iter().enumerate() {
            let h = 1e-4;
            let eval_at = |t: f64| {
                let mut bb = b;
                match var {
                    Var::X => bb.x = Some(t),
                    Var::Z => bb.z = Some(t),
                    Var::U => bb.u = Some(t),
                }
                tree.eval(&bb)
            };
            let p = match var { Var::X => x, Var::Z => z, Var::U => u };
            let (Ok(f1p), Ok(f1m), Ok(f2p), Ok(f2m)) =
                (eval_at(p + h), eval_at(p - h), eval_at(p + 2.0 * h), eval_at(p - 2.0 * h))
            else { return Ok(()) };
            let d_h = (f1p - f1m) / (2.0 * h);
            let d_2h = (f2p - f2m) / (4.0 * h);
            let richardson = (4.0 * d_h - d_2h) / 3.0;
            prop_assume!(richardson.abs() < 1e6);
            let tol = 1e-7 * grad[slot].abs().max(richardson.abs()).max(1.0);
            prop_assert!(
                (grad[slot] - richardson).abs() <= tol,
                "var {var:?}: forward {} vs richardson {richardson} for `{tree}`",
                grad[slot]
            );
        }
    }
}
