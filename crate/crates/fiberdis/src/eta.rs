//! The invariant measure of the skew product via monotone sandwich
//! limits: integrals of fiberwise suprema and infima of `v ∘ F̂^n` squeeze
//! the value from both sides, with every error term reported separately.

use crate::base::{self, InvariantDensity};
use crate::error::{Error, Result};
use crate::numeric::{sum_compensated, NeumaierSum};
use crate::observable::FiberObservable;
use crate::skew::{z_grid, SkewProduct};
use rayon::prelude::*;

/// Default fiber grid for suprema over the fiber interval.
pub const DEFAULT_Z_GRID: usize = 33;
/// Default quadrature resolution.
pub const DEFAULT_QUAD_RES: usize = 8192;
/// Default depth cap for the sandwich iteration.
pub const DEFAULT_N_CAP: usize = 25;

/// Seed for the orbit-register tail bits used by long forward orbits.
const ORBIT_TAIL_SEED: u64 = 0x51e9;

/// Two-sided estimate at a fixed depth. `lower`/`upper` integrate the
/// fiber-grid extremes; the slack needed to cover the true fiber suprema
/// and the quadrature/truncation estimates are carried separately, so the
/// rigorous bracket is `[lower - err, upper + err]` with
/// `err = quad_err + trunc_err + fiber_slack`.
#[derive(Debug, Clone, Copy)]
pub struct SandwichEstimate {
    pub n: usize,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub quad_err: f64,
    pub trunc_err: f64,
    pub fiber_slack: f64,
    pub excluded_nodes: usize,
}

impl SandwichEstimate {
    pub fn total_error(&self) -> f64 {
        self.quad_err + self.trunc_err + self.fiber_slack
    }

    /// Width of the rigorous bracket.
    pub fn bracket(&self) -> f64 {
        self.width + 2.0 * self.total_error()
    }
}

fn sandwich_at_resolution(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    n: usize,
    zs: &[f64],
    quad_res: usize,
) -> Result<(f64, f64, f64, usize)> {
    let nodes = base::midpoints(quad_res);
    let spacing = if zs.len() > 1 { zs[1] - zs[0] } else { 0.0 };
    struct NodeOut {
        lo: f64,
        hi: f64,
        slack: f64,
    }
    let per_node = |&x0: &f64| -> Result<Option<NodeOut>> {
        let mut x = x0;
        let mut zrow = zs.to_vec();
        // D_s of the empty iterate is 1: at depth 0 the grid gap counts
        // in full.
        let mut max_ds = 1.0f64;
        for _ in 0..n {
            let id = match skew.base.branch_of(x) {
                Ok(id) => id,
                Err(_) => return Ok(None),
            };
            let mut step_ds = 0.0f64;
            for z in zrow.iter_mut() {
                let (_, ds) = skew.fiber.partials_on_branch(id, x, *z);
                step_ds = step_ds.max(ds.abs());
                *z = skew.fiber.eval_on_branch(id, x, *z);
            }
            max_ds *= step_ds;
            x = skew.base.forward_on_branch(id, x);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &gz in &zrow {
            let value = v.eval(x, gz)?;
            lo = lo.min(value);
            hi = hi.max(value);
        }
        let phi = density.eval(x0);
        Ok(Some(NodeOut {
            lo: lo * phi,
            hi: hi * phi,
            slack: v.lip_z * max_ds * spacing * 0.5 * phi,
        }))
    };
    let evals: Vec<Result<Option<NodeOut>>> = nodes.par_iter().map(per_node).collect();
    let mut lows = NeumaierSum::new();
    let mut highs = NeumaierSum::new();
    let mut slack = NeumaierSum::new();
    let mut excluded = 0usize;
    for e in evals {
        match e? {
            Some(out) => {
                lows.add(out.lo);
                highs.add(out.hi);
                slack.add(out.slack);
            }
            None => excluded += 1,
        }
    }
    if excluded * 1000 > quad_res {
        return Err(Error::TooManyExcludedNodes { excluded, total: quad_res });
    }
    let r = quad_res as f64;
    Ok((lows.value() / r, highs.value() / r, slack.value() / r, excluded))
}

/// Integrals of the fiberwise extrema of `v ∘ F̂^n`, bracketing the
/// invariant-measure value from depth `n` on.
pub fn sandwich_bounds(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    n: usize,
    z_grid_count: usize,
    quad_res: usize,
) -> Result<SandwichEstimate> {
    let zs = z_grid(&skew.fiber, z_grid_count.max(2));
    let (lower, upper, fiber_slack, excluded) =
        sandwich_at_resolution(skew, density, v, n, &zs, quad_res)?;
    let (lower_h, upper_h, _, _) =
        sandwich_at_resolution(skew, density, v, n, &zs, quad_res / 2)?;
    let quad_err = (lower - lower_h).abs().max((upper - upper_h).abs())
        + 1e-15 * (upper.abs() + 1.0)
        + excluded as f64 / quad_res as f64 * 2.0 * v.sup_norm * (1.0 / density.floor);
    Ok(SandwichEstimate {
        n,
        lower,
        upper,
        width: upper - lower,
        quad_err,
        trunc_err: 0.0,
        fiber_slack,
        excluded_nodes: excluded,
    })
}

/// Invariant-measure value with its per-depth trace.
#[derive(Debug, Clone)]
pub struct EtaEstimate {
    /// Midpoint of the final bracket.
    pub value: f64,
    /// Rigorous enclosure including all reported error terms.
    pub lower: f64,
    pub upper: f64,
    pub trace: Vec<SandwichEstimate>,
    pub converged: bool,
}

impl EtaEstimate {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }
}

/// Deepens the sandwich until the rigorous bracket falls below `tol` or
/// the depth cap is reached; the trace keeps every computed depth.
pub fn eta_trace(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    tol: f64,
    n_cap: usize,
    z_grid_count: usize,
    quad_res: usize,
) -> EtaEstimate {
    let mut trace = Vec::new();
    let mut converged = false;
    for n in 0..=n_cap {
        match sandwich_bounds(skew, density, v, n, z_grid_count, quad_res) {
            Ok(est) => {
                let done = est.bracket() <= tol;
                trace.push(est);
                if done {
                    converged = true;
                    break;
                }
            }
            // Forward orbits can degenerate at depths beyond the grid's
            // dyadic resolution; keep the deepest healthy bracket.
            Err(_) if !trace.is_empty() => break,
            Err(_) => break,
        }
    }
    let last = trace.last().copied().unwrap_or(SandwichEstimate {
        n: 0,
        lower: -v.sup_norm,
        upper: v.sup_norm,
        width: 2.0 * v.sup_norm,
        quad_err: 0.0,
        trunc_err: 0.0,
        fiber_slack: 0.0,
        excluded_nodes: 0,
    });
    let err = last.total_error();
    EtaEstimate {
        value: (last.lower + last.upper) / 2.0,
        lower: last.lower - err,
        upper: last.upper + err,
        trace,
        converged,
    }
}

/// [`eta_trace`] with the convergence contract enforced.
pub fn eta_value(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    tol: f64,
    n_cap: usize,
) -> Result<EtaEstimate> {
    let est = eta_trace(skew, density, v, tol, n_cap, DEFAULT_Z_GRID, DEFAULT_QUAD_RES);
    if !est.converged {
        return Err(Error::SandwichNotConverged {
            bracket: est.upper - est.lower,
            tol,
            n_cap,
        });
    }
    Ok(est)
}

#[derive(Debug, Clone, Copy)]
pub struct InvarianceResidual {
    pub residual: f64,
    /// Sum of the two bracket half-widths; the residual is bounded by it.
    pub bound: f64,
}

/// `|eta(v ∘ F̂) - eta(v)|` with both values from the sandwich; invariance
/// makes the residual at most the sum of the two brackets.
pub fn invariance_residual(
    skew: &SkewProduct,
    density: &InvariantDensity,
    v: &FiberObservable,
    tol: f64,
) -> Result<InvarianceResidual> {
    let direct = eta_value(skew, density, v, tol, DEFAULT_N_CAP)?;
    let composed = eta_value(skew, density, &v.compose_with(skew), tol, DEFAULT_N_CAP)?;
    Ok(InvarianceResidual {
        residual: (direct.value - composed.value).abs(),
        bound: direct.half_width() + composed.half_width(),
    })
}

/// Max over fiber pairs of the deviation of Birkhoff averages started at
/// the same base point: `|S_n(x, z) - S_n(x, z')|` with
/// `S_n = n^{-1} sum_{j<n} v ∘ F̂^j`. Fiber contraction makes this decay
/// like `C/n` independently of the invariant measure.
pub fn birkhoff_fiber_independence(
    skew: &SkewProduct,
    v: &FiberObservable,
    x: f64,
    z_pairs: &[(f64, f64)],
    n: usize,
) -> Result<f64> {
    assert!(n >= 1);
    let orbit = base::forward_orbit(&skew.base, x, n, ORBIT_TAIL_SEED)?;
    let average = |z0: f64| -> Result<f64> {
        let mut z = z0;
        let mut terms = Vec::with_capacity(n);
        for &(xj, id) in &orbit {
            terms.push(v.eval(xj, z)?);
            z = skew.fiber.eval_on_branch(id, xj, z);
        }
        Ok(sum_compensated(terms) / n as f64)
    };
    let mut worst = 0.0f64;
    for &(za, zb) in z_pairs {
        let d = (average(za)? - average(zb)?).abs();
        if d > worst {
            worst = d;
        }
    }
    Ok(worst)
}
