//! Skew products `(x, z) -> (F x, G(x, z))` over an expanding base, with
//! fiber iterates, the derivative products used by the smooth suites, and
//! contraction diagnostics.

use crate::base::{self, BaseMetric, ExpandingMap, LeafCtx, Verdict, PASS_SLACK};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::numeric::fit_decay;

/// Fiber coordinate maps of the catalog plus custom expressions.
#[derive(Debug, Clone)]
pub enum FiberKind {
    /// `G(x, z) = z / 3`, independent of the base point.
    PureThird,
    /// `G(x, z) = (z + cos 2 pi x) / 3`.
    CosThird,
    /// `G(x, z) = (z + s(x)) / 3` with `s = -1` on branch 0 and `+1` on
    /// branch 1 of a two-branch base.
    DigitThird,
    /// `G(x, z) = (z + 1 / (1 + x)) / 2`.
    GaussAffine,
    /// Expression in `x` and `z`.
    Custom(Expr),
}

/// Regularity of the fiber map in the base direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiberRegularity {
    Smooth,
    /// Discontinuities aligned with the branch partition (e.g. the digit
    /// fiber). Admitted by the measure and Hölder paths; the smooth suites
    /// reject it.
    PiecewiseAligned,
}

#[derive(Debug, Clone)]
pub struct FiberMap {
    pub z_min: f64,
    pub z_max: f64,
    pub kind: FiberKind,
    /// Contraction exponent: `|D_s G_n| <= c_lambda_s * exp(-lambda_s n)`.
    pub lambda_s: f64,
    pub c_lambda_s: f64,
    /// Least iterate count after which one fiber step never expands.
    pub n0: u32,
    /// Distinguished fiber point used by the disintegration.
    pub z0: f64,
    pub regularity: FiberRegularity,
}

impl FiberMap {
    pub fn diam(&self) -> f64 {
        self.z_max - self.z_min
    }

    pub fn contains(&self, z: f64) -> bool {
        z >= self.z_min - 1e-12 && z <= self.z_max + 1e-12
    }

    pub fn is_smooth(&self) -> bool {
        self.regularity == FiberRegularity::Smooth
    }

    /// `G(x, z)` when the branch of `x` is known (the only way the digit
    /// fiber is ever evaluated from inverse-branch words, which keeps it
    /// exact on points whose classification would be ambiguous).
    pub fn eval_on_branch(&self, branch: u32, x: f64, z: f64) -> f64 {
        match &self.kind {
            FiberKind::PureThird => z / 3.0,
            FiberKind::CosThird => (z + (2.0 * std::f64::consts::PI * x).cos()) / 3.0,
            FiberKind::DigitThird => {
                let s = if branch == 0 { -1.0 } else { 1.0 };
                (z + s) / 3.0
            }
            FiberKind::GaussAffine => (z + 1.0 / (1.0 + x)) / 2.0,
            FiberKind::Custom(e) => e
                .eval(&Bindings::xz(x, z))
                .expect("custom fiber expression failed on its domain"),
        }
    }

    /// `(D_u G, D_s G)(x, z)` on a known branch; requires a smooth fiber
    /// for the `D_u` component to be meaningful across the partition.
    pub fn partials_on_branch(&self, branch: u32, x: f64, z: f64) -> (f64, f64) {
        match &self.kind {
            FiberKind::PureThird => (0.0, 1.0 / 3.0),
            FiberKind::CosThird => {
                let arg = 2.0 * std::f64::consts::PI * x;
                (-2.0 * std::f64::consts::PI * arg.sin() / 3.0, 1.0 / 3.0)
            }
            FiberKind::DigitThird => {
                let _ = branch;
                (0.0, 1.0 / 3.0)
            }
            FiberKind::GaussAffine => (-0.5 / ((1.0 + x) * (1.0 + x)), 0.5),
            FiberKind::Custom(e) => {
                let (_, g) = e
                    .grad(&Bindings::xz(x, z))
                    .expect("custom fiber gradient failed on its domain");
                (g[0], g[1])
            }
        }
    }
}

/// The skew product `F̂(x, z) = (F x, G(x, z))`; the projection onto the
/// first coordinate semiconjugates it with the base map by construction.
#[derive(Debug, Clone)]
pub struct SkewProduct {
    pub base: ExpandingMap,
    pub fiber: FiberMap,
    pub metric: BaseMetric,
    /// Hand-certified constants for the quantitative suites, when known.
    pub declared: SkewDeclared,
}

/// Certified suite constants of a catalog system.
#[derive(Debug, Clone, Copy, Default)]
pub struct SkewDeclared {
    /// Bound on `|G_n(hx, z) - G_n(hx', z)| / |x - x'|` over all depths
    /// and words.
    pub fiber_x_lip: Option<f64>,
    /// Bound `C` with `|D_u G_m(hx, z) Dh(x)| <= C exp(-lambda (n - m))`.
    pub du_product_c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberPoint {
    pub x: f64,
    pub z: f64,
}

impl SkewProduct {
    pub fn require_smooth(&self) -> Result<()> {
        if !self.fiber.is_smooth() {
            return Err(Error::InsufficientSmoothness(format!(
                "fiber of `{}` is only piecewise in x; the smooth suites reject it",
                self.base.name
            )));
        }
        self.base.require_c2()
    }
}

/// `F̂^n(x, z) = (F^n x, G_n(x, z))` by the forward recursion. The orbit
/// must stay clear of the partition endpoints.
pub fn forward_iterate(skew: &SkewProduct, p: FiberPoint, n: usize) -> Result<FiberPoint> {
    let mut x = p.x;
    let mut z = p.z;
    for step in 0..n {
        let id = skew
            .base
            .branch_of(x)
            .map_err(|_| Error::OrbitDiscontinuity { x, step })?;
        z = skew.fiber.eval_on_branch(id, x, z);
        x = skew.base.forward_on_branch(id, x);
    }
    Ok(FiberPoint { x, z: z.clamp(skew.fiber.z_min, skew.fiber.z_max) })
}

/// Result of iterating the fiber over an inverse-branch word.
#[derive(Debug, Clone, Copy)]
pub struct FiberBranchEval {
    /// `G_n(h x, z)`.
    pub value: f64,
    /// `D_u G_n(h x, z) * Dh(x)`.
    pub du_dh: f64,
    /// `D_s G_n(h x, z)`.
    pub ds: f64,
}

/// Per-step state passed to fiber-walk observers: after `m` of `n` steps,
/// `value` is `G_m(hx, z)`, `du_dh` is `D_u G_m(hx, z) Dh(x)` and `ds` is
/// `D_s G_m(hx, z)`.
#[derive(Debug, Clone, Copy)]
pub struct FiberStep {
    pub m: usize,
    pub value: f64,
    pub du_dh: f64,
    pub ds: f64,
}

/// Walks the fiber along the backward orbit recorded in a word context.
///
/// `points[d]` must be the image of `x` under the `d` innermost steps (as
/// produced by [`base::for_each_word`] or [`fiber_over_branch`]); the walk
/// then visits the base points `F^{m-1}(h x)` in order, accumulating the
/// standard recursions for `G_m`, its fiber derivative product, and the
/// mixed derivative product against `Dh(x)`.
pub fn fiber_walk<F>(
    fiber: &FiberMap,
    points: &[f64],
    choices: &[u32],
    prefix_d: &[f64],
    z_start: f64,
    with_derivatives: bool,
    mut per_step: F,
) -> FiberBranchEval
where
    F: FnMut(FiberStep),
{
    let n = choices.len();
    let mut z = z_start;
    let mut p = 0.0f64;
    let mut ds_prod = 1.0f64;
    for m in 1..=n {
        let idx = n - m + 1;
        let x = points[idx];
        let branch = choices[idx - 1];
        if with_derivatives {
            let (du, ds) = fiber.partials_on_branch(branch, x, z);
            p = du * prefix_d[idx] + ds * p;
            ds_prod *= ds;
        }
        z = fiber.eval_on_branch(branch, x, z);
        per_step(FiberStep { m, value: z, du_dh: p, ds: ds_prod });
    }
    FiberBranchEval { value: z, du_dh: p, ds: ds_prod }
}

/// Convenience wrapper around [`fiber_walk`] for leaf contexts.
pub fn fiber_walk_ctx(
    skew: &SkewProduct,
    ctx: &LeafCtx<'_>,
    z_start: f64,
    with_derivatives: bool,
) -> FiberBranchEval {
    fiber_walk(
        &skew.fiber,
        ctx.points,
        ctx.choices,
        ctx.prefix_d,
        z_start,
        with_derivatives,
        |_| {},
    )
}

/// Evaluates `G_n(h x, z)` for a single word `h`, together with the
/// derivative products when requested (which needs a smooth fiber and a
/// `C^2` base).
pub fn fiber_over_branch(
    skew: &SkewProduct,
    word: &base::BranchWord,
    x: f64,
    z: f64,
    with_derivatives: bool,
) -> Result<FiberBranchEval> {
    if with_derivatives {
        skew.require_smooth()?;
    }
    let n = word.depth();
    let mut points = Vec::with_capacity(n + 1);
    let mut prefix_d = Vec::with_capacity(n + 1);
    let mut choices = Vec::with_capacity(n);
    points.push(x);
    prefix_d.push(1.0);
    let mut y = x;
    let mut d = 1.0;
    for &id in word.indices.iter().rev() {
        let hy = skew.base.inverse_step(id, y);
        d *= skew.base.inverse_step_d(id, y, hy);
        y = hy;
        points.push(y);
        prefix_d.push(d);
        choices.push(id);
    }
    Ok(fiber_walk(&skew.fiber, &points, &choices, &prefix_d, z, with_derivatives, |_| {}))
}

/// Uniform grid over the fiber interval, endpoints included.
pub fn z_grid(fiber: &FiberMap, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    let step = fiber.diam() / (count - 1) as f64;
    (0..count).map(|i| fiber.z_min + step * i as f64).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ContractionRow {
    pub n: usize,
    /// Max over samples of the diameter of `G_n(x, N)` (z-grid image).
    pub max_diam: f64,
    /// Max over samples of `|D_s G_n|` along forward orbits.
    pub max_ds: f64,
    /// Max over words and pairs of `|G_n(hx,z) - G_n(hx',z)| / d(x,x')`.
    pub fiber_x_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub rows: Vec<ContractionRow>,
    /// Fit of the diameter decay `c * exp(-lambda n)`.
    pub diam_fit: Option<(f64, f64, f64)>,
    /// Largest `n0`-step ratio `|G_{n0}(x,z)-G_{n0}(x,z')|/|z-z'|`.
    pub step_factor: f64,
    pub fiber_x_ratio_overall: f64,
    /// Largest diameter change when the z-grid is refined once.
    pub z_refinement_gap: f64,
    pub verdict: Verdict,
    pub violations: Vec<String>,
}

/// Contraction diagnostics: fiber-image diameters with fitted decay rate,
/// the non-expansiveness factor at the declared `n0`, `|D_s G_n|` against
/// the declared exponential bound, and the word-wise base-direction
/// sensitivity of the fiber iterates.
pub fn contraction_report(
    skew: &SkewProduct,
    n_max: usize,
    pair_samples: usize,
) -> Result<ContractionReport> {
    let margin = skew.base.boundary_margin;
    let xs = base::low_discrepancy_points(24, margin.max(1e-6));
    let zs = z_grid(&skew.fiber, 17);
    let mut violations = Vec::new();

    // (i) + (iii): forward orbits carrying the z-grid, once at the given
    // resolution and once refined; the gap between the two is reported so
    // a too-coarse grid shows up instead of silently shrinking diameters.
    let mut max_ds = vec![0.0f64; n_max + 1];
    let mut diam_pass = |grid: &[f64]| -> Vec<f64> {
        let mut pass_diam = vec![0.0f64; n_max + 1];
        for &x0 in &xs {
            let mut x = x0;
            let mut zrow = grid.to_vec();
            let mut ds = vec![1.0f64; zrow.len()];
            for n in 1..=n_max {
                let id = match skew.base.branch_of(x) {
                    Ok(id) => id,
                    Err(_) => break,
                };
                for (z, d) in zrow.iter_mut().zip(ds.iter_mut()) {
                    let (_, dsg) = skew.fiber.partials_on_branch(id, x, *z);
                    *d *= dsg;
                    *z = skew.fiber.eval_on_branch(id, x, *z);
                }
                x = skew.base.forward_on_branch(id, x);
                let lo = zrow.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                pass_diam[n] = pass_diam[n].max(hi - lo);
                let d = ds.iter().copied().map(f64::abs).fold(0.0, f64::max);
                max_ds[n] = max_ds[n].max(d);
            }
        }
        pass_diam
    };
    let coarse = diam_pass(&zs);
    let refined = diam_pass(&z_grid(&skew.fiber, 2 * zs.len() - 1));
    let mut max_diam = vec![0.0f64; n_max + 1];
    let mut refinement_gap = 0.0f64;
    for n in 1..=n_max {
        refinement_gap = refinement_gap.max((coarse[n] - refined[n]).abs());
        max_diam[n] = coarse[n].max(refined[n]);
    }
    #[allow(clippy::needless_range_loop)]
    for n in 1..=n_max {
        let bound = skew.fiber.c_lambda_s * (-skew.fiber.lambda_s * n as f64).exp();
        if max_ds[n] > bound * (1.0 + PASS_SLACK) {
            violations.push(format!(
                "|D_s G_n| = {:.6e} at n = {n} exceeds declared bound {bound:.6e}",
                max_ds[n]
            ));
        }
    }

    // (ii): non-expansiveness after n0 steps.
    let mut step_factor = 0.0f64;
    for &x in &xs {
        for w in [skew.fiber.z_min, skew.fiber.z0, skew.fiber.z_max] {
            for w2 in [skew.fiber.z_min + 0.1 * skew.fiber.diam(), skew.fiber.z_max] {
                if (w - w2).abs() < 1e-12 {
                    continue;
                }
                let a = forward_iterate(skew, FiberPoint { x, z: w }, skew.fiber.n0 as usize);
                let b = forward_iterate(skew, FiberPoint { x, z: w2 }, skew.fiber.n0 as usize);
                if let (Ok(a), Ok(b)) = (a, b) {
                    step_factor = step_factor.max((a.z - b.z).abs() / (w - w2).abs());
                }
            }
        }
    }
    if step_factor > 1.0 + PASS_SLACK {
        violations.push(format!(
            "fiber steps still expand after n0 = {}: factor {step_factor:.6e}",
            skew.fiber.n0
        ));
    }

    // (iv): base-direction sensitivity over words, same-word pairs.
    let pairs = sample_pairs(pair_samples, margin.max(1e-6));
    let mut fiber_x_ratio = vec![0.0f64; n_max + 1];
    let tail_tol = skew.base.is_countable().then_some(1e-3);
    #[allow(clippy::needless_range_loop)]
    for n in 1..=n_max {
        let (ids, _) = match skew.base.enumeration_ids(n, tail_tol) {
            Ok(v) => v,
            Err(_) => break,
        };
        if (ids.len() as u128).checked_pow(n as u32).is_none_or(|c| c > (1 << 16)) {
            break;
        }
        fiber_x_ratio[n] = fiber_x_sensitivity(skew, n, &ids, &pairs, skew.fiber.z0)?;
    }
    let overall = fiber_x_ratio.iter().copied().fold(0.0, f64::max);
    if let Some(declared) = skew.declared.fiber_x_lip {
        if overall > declared * (1.0 + PASS_SLACK) + 1e-15 {
            violations.push(format!(
                "fiber x-sensitivity {overall:.6e} exceeds declared {declared:.6e}"
            ));
        }
    }

    let ns: Vec<f64> = (1..=n_max).map(|n| n as f64).collect();
    let diam_fit = fit_decay(&ns, &max_diam[1..]);
    if let Some((_, rate, _)) = diam_fit {
        if rate <= 0.0 {
            violations.push(format!("fiber diameters do not decay (fitted rate {rate:.3e})"));
        }
    }

    let rows = (1..=n_max)
        .map(|n| ContractionRow {
            n,
            max_diam: max_diam[n],
            max_ds: max_ds[n],
            fiber_x_ratio: fiber_x_ratio[n],
        })
        .collect();
    let verdict = if violations.is_empty() { Verdict::Pass } else { Verdict::Fail };
    Ok(ContractionReport {
        rows,
        diam_fit,
        step_factor,
        fiber_x_ratio_overall: overall,
        z_refinement_gap: refinement_gap,
        verdict,
        violations,
    })
}

/// Max over all depth-`n` words and the given pairs of
/// `|G_n(hx, z) - G_n(hx', z)| / d(x, x')` — the base-direction
/// sensitivity of fiber iterates. Shared by the contraction report, the
/// Hölder suite and the verification criteria.
pub fn fiber_x_sensitivity(
    skew: &SkewProduct,
    n: usize,
    ids: &[u32],
    pairs: &[(f64, f64)],
    z: f64,
) -> Result<f64> {
    use rayon::prelude::*;
    let per_pair = |&(x, y): &(f64, f64)| -> Result<f64> {
        let d = skew.metric.distance(&skew.base, x, y)?;
        if d == 0.0 {
            return Ok(0.0);
        }
        let mut gx = Vec::with_capacity(ids.len().pow(n.min(16) as u32));
        base::for_each_word(&skew.base, x, n, ids, false, |ctx| {
            gx.push(fiber_walk_ctx(skew, ctx, z, false).value);
        })?;
        let mut slot = 0usize;
        let mut worst = 0.0f64;
        base::for_each_word(&skew.base, y, n, ids, false, |ctx| {
            let gy = fiber_walk_ctx(skew, ctx, z, false).value;
            worst = worst.max((gx[slot] - gy).abs() / d);
            slot += 1;
        })?;
        Ok(worst)
    };
    let maxima: Vec<f64> = pairs.par_iter().map(per_pair).collect::<Result<Vec<_>>>()?;
    Ok(maxima.into_iter().fold(0.0, f64::max))
}

/// Deterministic pair sample mixing dyadic separations with
/// low-discrepancy anchors.
pub fn sample_pairs(count: usize, margin: f64) -> Vec<(f64, f64)> {
    let anchors = base::low_discrepancy_points(count, margin);
    anchors
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let scale = 0.5f64.powi((i % 40) as i32 + 1);
            let y = if x + scale < 1.0 - margin { x + scale } else { x - scale };
            (x, y)
        })
        .collect()
}
