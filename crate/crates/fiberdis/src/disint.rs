//! Disintegration of the invariant measure along stable fibers: the
//! depth-`n` quotient operator, its Cauchy-in-depth stopping rule, the
//! defining integral identity, and an independent Monte-Carlo oracle.

use crate::base::{self, InvariantDensity};
use crate::error::{Error, Result};
use crate::numeric::{sum_compensated, NeumaierSum};
use crate::observable::FiberObservable;
use crate::skew::{fiber_walk, fiber_walk_ctx, SkewProduct};
use crate::transfer::{GridFunction, ScalarFn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Default gap between compared depths in the stopping rule.
pub const DEFAULT_K_GAP: usize = 5;
/// Default depth cap.
pub const DEFAULT_N_CAP: usize = 25;

/// The disintegrated observable on a base grid, with per-point error
/// bounds.
///
/// Values at individual grid points carry the Cauchy bound of the stopping
/// rule; the limit object is only defined up to a null set of base points,
/// which no pointwise computation can detect.
#[derive(Debug, Clone)]
pub struct QuotientObservable {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub error_bounds: Vec<f64>,
    /// Depth actually returned (stopping depth plus the gap).
    pub depth: usize,
    pub z0: f64,
}

impl QuotientObservable {
    pub fn sup(&self) -> f64 {
        self.values.iter().copied().map(f64::abs).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub n: usize,
    /// `sup |M_n v - M_{n+gap} v|` over the grid.
    pub measured_diff: f64,
    /// `lip_z(v) * c * exp(-lambda_s n) * diam N`.
    pub apriori_bound: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

/// Truncation annotation for one application of the quotient operator.
fn truncation_slack(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    omitted: f64,
) -> f64 {
    // Omitted weight mass <= omitted sup-Jacobian mass * sup(phi)/floor.
    let sup_phi = density.eval(0.0).max(density.eval(1.0)).max(density.eval(0.5));
    let _ = skew;
    v.sup_norm * omitted * sup_phi / density.floor
}

/// `(M_n v)(x) = phi(x)^{-1} sum_h J_h(x) phi(h x) v(x, G_n(h x, z0))`.
pub fn mn_at(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    n: usize,
    ids: &[u32],
    x: f64,
) -> Result<f64> {
    let z0 = skew.fiber.z0;
    let mut acc = NeumaierSum::new();
    let mut failure: Option<Error> = None;
    base::for_each_word(&skew.base, x, n, ids, false, |ctx| {
        if failure.is_some() {
            return;
        }
        let g = fiber_walk_ctx(skew, ctx, z0, false);
        match v.eval(x, g.value) {
            Ok(value) => acc.add(ctx.jacobian() * density.eval(ctx.hx()) * value),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(acc.value() / density.eval(x))
}

/// The quotient operator at depth `n` on a grid. The returned function has
/// an analytic backing (the same branch sum at any interior point), so it
/// can be differenced.
pub fn apply_mn(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    n: usize,
    xs: &[f64],
    tail_tol: Option<f64>,
) -> Result<GridFunction> {
    assert!(n >= 1);
    let (ids, truncation) = skew.base.enumeration_ids(n, tail_tol)?;
    base::check_budget(ids.len(), n)?;
    let values: Vec<f64> = xs
        .par_iter()
        .map(|&x| mn_at(skew, density, v, n, &ids, x))
        .collect::<Result<Vec<_>>>()?;
    let trunc_err = truncation
        .map(|t| truncation_slack(skew, density, v, t.omitted_bound))
        .unwrap_or(0.0);
    let backing: ScalarFn = {
        let skew = skew.clone();
        let density = density.clone();
        let v = v.clone();
        let ids = ids.clone();
        Arc::new(move |x| mn_at(&skew, &density, &v, n, &ids, x))
    };
    let mut out = GridFunction::from_values(xs.to_vec(), values);
    out.error_bound = trunc_err;
    out.set_backing(backing);
    Ok(out)
}

fn apriori_bound(skew: &SkewProduct, v: &FiberObservable, n: usize) -> f64 {
    v.lip_z * skew.fiber.c_lambda_s * (-skew.fiber.lambda_s * n as f64).exp() * skew.fiber.diam()
}

/// Deepens `M_n v` until both the measured gap `sup|M_n v - M_{n+gap} v|`
/// and the a-priori contraction bound fall below `tol` (the max of the two
/// guards against flat-looking plateaus), then returns the deeper iterate.
#[allow(clippy::too_many_arguments)]
pub fn quotient_observable(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    tol: f64,
    k_gap: usize,
    n_cap: usize,
    xs: &[f64],
    tail_tol: Option<f64>,
) -> Result<(QuotientObservable, ConvergenceTrace)> {
    assert!(tol > 0.0 && k_gap >= 1);
    let mut history: Vec<GridFunction> = Vec::new();
    let mut trace = ConvergenceTrace::default();
    for j in 1..=(n_cap + k_gap) {
        history.push(apply_mn(skew, density, v, j, xs, tail_tol)?);
        if j <= k_gap {
            continue;
        }
        let n = j - k_gap;
        let shallow = &history[n - 1];
        let deep = &history[j - 1];
        let measured = shallow
            .values
            .iter()
            .zip(&deep.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let apriori = apriori_bound(skew, v, n);
        trace.rows.push(TraceRow { n, measured_diff: measured, apriori_bound: apriori });
        if measured.max(apriori) < tol {
            let error = tol + deep.error_bound;
            return Ok((
                QuotientObservable {
                    xs: xs.to_vec(),
                    values: deep.values.clone(),
                    error_bounds: vec![error; xs.len()],
                    depth: j,
                    z0: skew.fiber.z0,
                },
                trace,
            ));
        }
    }
    let last = trace.rows.last().map(|r| r.measured_diff.max(r.apriori_bound)).unwrap_or(f64::NAN);
    Err(Error::CauchyNotConverged { bound: last, tol, n_cap })
}

#[derive(Debug, Clone, Copy)]
pub struct DisintegrationResidual {
    pub residual: f64,
    pub bound: f64,
    pub quotient_integral: f64,
    pub eta_value: f64,
}

/// `|∫ v̄ dnu - eta(v)|`, which the defining identity of the disintegration
/// bounds by the combined reported errors.
pub fn disintegration_residual(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    tol: f64,
) -> Result<DisintegrationResidual> {
    let xs = base::midpoints(256);
    let tail_tol = skew.base.is_countable().then_some(1e-3);
    let (quotient, _) =
        quotient_observable(skew, density, v, tol, DEFAULT_K_GAP, DEFAULT_N_CAP, &xs, tail_tol)?;
    let r = xs.len() as f64;
    let weighted: Vec<f64> = xs
        .iter()
        .zip(&quotient.values)
        .map(|(&x, &val)| val * density.eval(x))
        .collect();
    let integral = sum_compensated(weighted.iter().copied()) / r;
    // Midpoint-rule error estimate from second differences of the
    // integrand (~ h^2/24 * int |f''|).
    let mut second_diff = NeumaierSum::new();
    for w in weighted.windows(3) {
        second_diff.add((w[2] - 2.0 * w[1] + w[0]).abs());
    }
    let quad_est = second_diff.value() / (24.0 * r) + 1e-14 * (integral.abs() + 1.0);
    let eta = crate::eta::eta_value(skew, density, v, tol, crate::eta::DEFAULT_N_CAP)?;
    let per_point = quotient.error_bounds.iter().copied().fold(0.0, f64::max);
    Ok(DisintegrationResidual {
        residual: (integral - eta.value).abs(),
        bound: per_point + eta.half_width() + quad_est,
        quotient_integral: integral,
        eta_value: eta.value,
    })
}

/// Monte-Carlo estimate of `(M_n v)(x)`: branch words are sampled
/// backwards with the transfer weights as per-step probabilities, and the
/// per-step normalizations ride along as an importance factor (exactly 1
/// for finite-branch maps, and the truncated-sum correction otherwise).
///
/// The stream is counter-based: sample `i` draws from its own seeded
/// stream, so the estimate is reproducible for a given seed regardless of
/// how the samples are scheduled.
pub fn backward_sampling_oracle(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    x: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    assert!(samples >= 2);
    // The oracle only ever weighs one step at a time, so countable maps
    // are truncated per step; exact comparisons must enumerate words over
    // the same per-step index set.
    let tail_tol = skew.base.is_countable().then_some(1e-2);
    let (ids, _) = skew.base.enumeration_ids(1, tail_tol)?;
    let z0 = skew.fiber.z0;
    let draws: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut points = Vec::with_capacity(n + 1);
            let mut choices = Vec::with_capacity(n);
            let prefix_d = vec![1.0; n + 1];
            points.push(x);
            let mut y = x;
            let mut importance = 1.0f64;
            let mut weights = vec![0.0f64; ids.len()];
            for _ in 0..n {
                let phi_y = density.eval(y);
                let mut z_total = 0.0f64;
                for (slot, &id) in ids.iter().enumerate() {
                    let hy = skew.base.inverse_step(id, y);
                    let j = skew.base.inverse_step_d(id, y, hy).abs();
                    let w = j * density.eval(hy) / phi_y;
                    z_total += w;
                    weights[slot] = z_total;
                }
                let draw: f64 = rng.gen::<f64>() * z_total;
                let slot = weights.partition_point(|&c| c < draw).min(ids.len() - 1);
                let id = ids[slot];
                y = skew.base.inverse_step(id, y);
                points.push(y);
                choices.push(id);
                importance *= z_total;
            }
            let g = fiber_walk(&skew.fiber, &points, &choices, &prefix_d, z0, false, |_| {});
            Ok(v.eval(x, g.value)? * importance)
        })
        .collect();
    let values = draws.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean = sum_compensated(values.iter().copied()) / samples as f64;
    let variance = sum_compensated(values.iter().map(|&v| (v - mean) * (v - mean)))
        / (samples as f64 - 1.0);
    let std_error = (variance / samples as f64).sqrt();
    Ok((mean, std_error))
}
