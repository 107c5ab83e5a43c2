//! Uniformly expanding base maps on `[0, 1]` with full-branch structure:
//! branch partitions, inverse-branch enumeration and calculus, expansion
//! and distortion diagnostics.

pub mod density;
pub mod metric;

use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Var};
use crate::numeric::{fit_decay, NeumaierSum};

pub use density::{DensityMethod, InvariantDensity};
pub use metric::BaseMetric;

/// Default distance kept between any sampled point and a partition
/// endpoint; the maps act on the open dense set `(0, 1)`.
pub const BOUNDARY_MARGIN: f64 = 1e-9;

/// Default cap on branch-word enumeration (`FIBERDIS_BUDGET` overrides).
pub const DEFAULT_WORD_BUDGET: u128 = 1 << 24;

/// Enumeration cap, from the `FIBERDIS_BUDGET` environment variable when
/// set, otherwise [`DEFAULT_WORD_BUDGET`].
pub fn enumeration_cap() -> u128 {
    std::env::var("FIBERDIS_BUDGET")
        .ok()
        .and_then(|s| s.parse::<u128>().ok())
        .unwrap_or(DEFAULT_WORD_BUDGET)
}

/// Smoothness class of a base map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothness {
    /// `C^{1+alpha}`: first derivative Hölder with the given exponent.
    C1Alpha(f64),
    C2,
}

/// Expansion and distortion constants declared by a map, either certified
/// by hand for the catalog or fitted empirically (flagged).
#[derive(Debug, Clone, Copy)]
pub struct DeclaredConstants {
    /// Decay exponent: depth-n inverse branches satisfy
    /// `|Dh| <= c_lambda * exp(-lambda * n)`.
    pub lambda: f64,
    pub c_lambda: f64,
    /// Hölder distortion bound for `log J_h`.
    pub c_j: f64,
    /// Bound on `sum_h ||J_h||_alpha` at every depth.
    pub c_j_prime: f64,
    /// Bound on `sum_h |DJ_h|` at every depth.
    pub c_d: f64,
    /// Certified (hand derivation) vs empirically fitted.
    pub certified: bool,
}

/// One full branch of a finite-branch map.
#[derive(Debug, Clone)]
pub struct Branch {
    pub lo: f64,
    pub hi: f64,
    pub formula: BranchFormula,
}

/// Forward formula of a branch, mapping its interval onto `(0, 1)`.
#[derive(Debug, Clone)]
pub enum BranchFormula {
    /// `F(x) = a*x + b`.
    Affine { a: f64, b: f64 },
    /// Arbitrary expression in `x`; the inverse is computed by
    /// bisection-safeguarded Newton iteration on the branch interval.
    Custom(Expr),
}

/// Branch structure: finitely many branches or a countable family.
#[derive(Debug, Clone)]
pub enum BranchSet {
    Finite(Vec<Branch>),
    Countable(CountableFamily),
}

/// Countable full-branch families with certified Jacobian tails.
#[derive(Debug, Clone)]
pub enum CountableFamily {
    /// Branches of `x -> 1/x mod 1`: branch `k >= 1` lives on
    /// `(1/(k+1), 1/k)` with inverse `h_k(y) = 1/(k+y)`.
    Gauss,
}

impl CountableFamily {
    /// Certified supremum of `J_{h_k}` over the branch.
    pub fn sup_jacobian(&self, k: u32) -> f64 {
        match self {
            // sup_y 1/(k+y)^2 = 1/k^2
            CountableFamily::Gauss => 1.0 / (k as f64 * k as f64),
        }
    }

    /// Certified bound on `sum_{k > k_max} sup J_{h_k}`.
    pub fn tail_bound(&self, k_max: u32) -> f64 {
        match self {
            // sum_{k>K} 1/k^2 < 1/K (integral comparison)
            CountableFamily::Gauss => 1.0 / k_max as f64,
        }
    }
}

/// How many words a depth-`n` enumeration over `m` indices produces.
fn word_count(m: usize, depth: usize) -> Option<u128> {
    (m as u128).checked_pow(depth as u32)
}

/// Truncation data for countable-branch enumerations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationInfo {
    /// Largest branch index kept.
    pub k_max: u32,
    /// Certified bound on the omitted sup-Jacobian mass at this depth.
    pub omitted_bound: f64,
}

/// A finite inverse-branch word. Indices are listed in composition order:
/// `[i_0, .., i_{n-1}]` denotes `h_{i_0} ∘ h_{i_1} ∘ .. ∘ h_{i_{n-1}}`, so
/// the last index acts first when the word is evaluated at a point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchWord {
    pub indices: Vec<u32>,
}

impl BranchWord {
    pub fn depth(&self) -> usize {
        self.indices.len()
    }
}

/// Result of evaluating an inverse-branch word at a point.
#[derive(Debug, Clone, Copy)]
pub struct InverseEval {
    /// `h(x)`.
    pub hx: f64,
    /// `Dh(x)` (signed).
    pub dh: f64,
    /// `J_h(x) = |Dh(x)|`.
    pub jacobian: f64,
    /// `DJ_h(x)`, present only on `C^2` maps.
    pub dj: Option<f64>,
}

/// A uniformly expanding full-branch map of the unit interval.
#[derive(Debug, Clone)]
pub struct ExpandingMap {
    pub name: String,
    pub branch_set: BranchSet,
    pub constants: DeclaredConstants,
    pub smoothness: Smoothness,
    pub boundary_margin: f64,
    /// Certified infimum of `|F'|` over all branch interiors (>= 1; strict
    /// uniform expansion may only hold at depth, through `constants`).
    pub min_slope: f64,
    /// True for the binary shift map, whose forward orbits can be carried
    /// exactly as bit registers (every f64 is dyadic and would otherwise
    /// collapse onto the endpoint fixed point after ~53 steps).
    pub exact_binary_shift: bool,
    /// Closed-form invariant density, for catalog maps that have one.
    pub known_density: Option<density::AnalyticDensity>,
}

impl ExpandingMap {
    /// Number of branches, `None` for countable families.
    pub fn finite_branch_count(&self) -> Option<usize> {
        match &self.branch_set {
            BranchSet::Finite(branches) => Some(branches.len()),
            BranchSet::Countable(_) => None,
        }
    }

    pub fn is_countable(&self) -> bool {
        matches!(self.branch_set, BranchSet::Countable(_))
    }

    pub fn require_c2(&self) -> Result<()> {
        match self.smoothness {
            Smoothness::C2 => Ok(()),
            Smoothness::C1Alpha(_) => Err(Error::InsufficientSmoothness(format!(
                "map `{}` is only C^(1+alpha); second-derivative data unavailable",
                self.name
            ))),
        }
    }

    fn check_interior(&self, x: f64) -> Result<()> {
        let m = self.boundary_margin;
        if x < m || x > 1.0 - m {
            return Err(Error::BoundaryPoint { x, margin: m });
        }
        Ok(())
    }

    /// Branch interval for an index.
    pub fn branch_interval(&self, id: u32) -> (f64, f64) {
        match &self.branch_set {
            BranchSet::Finite(branches) => {
                let b = &branches[id as usize];
                (b.lo, b.hi)
            }
            BranchSet::Countable(CountableFamily::Gauss) => {
                (1.0 / (id as f64 + 1.0), 1.0 / id as f64)
            }
        }
    }

    /// Branch containing `x`, with a margin check against the partition
    /// endpoints relevant for forward iteration.
    pub fn branch_of(&self, x: f64) -> Result<u32> {
        self.check_interior(x)?;
        let m = self.boundary_margin;
        match &self.branch_set {
            BranchSet::Finite(branches) => {
                for (i, b) in branches.iter().enumerate() {
                    if x > b.lo + m && x < b.hi - m {
                        return Ok(i as u32);
                    }
                }
                Err(Error::BoundaryPoint { x, margin: m })
            }
            BranchSet::Countable(CountableFamily::Gauss) => {
                let k = (1.0 / x).floor();
                let inv = 1.0 / x;
                if (inv - inv.round()).abs() < m {
                    return Err(Error::BoundaryPoint { x, margin: m });
                }
                Ok(k as u32)
            }
        }
    }

    /// Forward image `F(x)`, classifying the branch of `x`.
    pub fn forward(&self, x: f64) -> Result<f64> {
        match &self.branch_set {
            BranchSet::Finite(_) => {
                let id = self.branch_of(x)?;
                Ok(self.forward_on_branch(id, x))
            }
            BranchSet::Countable(CountableFamily::Gauss) => {
                self.branch_of(x)?;
                let y = (1.0 / x).fract();
                Ok(y)
            }
        }
    }

    /// Forward image when the branch of `x` is already known.
    pub fn forward_on_branch(&self, id: u32, x: f64) -> f64 {
        match &self.branch_set {
            BranchSet::Finite(branches) => match &branches[id as usize].formula {
                BranchFormula::Affine { a, b } => a * x + b,
                BranchFormula::Custom(e) => e
                    .eval(&Bindings::x_only(x))
                    .expect("custom branch formula failed inside its own interval"),
            },
            BranchSet::Countable(CountableFamily::Gauss) => 1.0 / x - id as f64,
        }
    }

    /// `|F'(x)|` on a known branch.
    pub fn forward_d1_on_branch(&self, id: u32, x: f64) -> f64 {
        match &self.branch_set {
            BranchSet::Finite(branches) => match &branches[id as usize].formula {
                BranchFormula::Affine { a, .. } => *a,
                BranchFormula::Custom(e) => {
                    let (_, d, _) = e
                        .taylor2(Var::X, &Bindings::x_only(x))
                        .expect("custom branch derivative failed inside its own interval");
                    d
                }
            },
            BranchSet::Countable(CountableFamily::Gauss) => -1.0 / (x * x),
        }
    }

    /// Single inverse-branch step `h_id(y)` for `y` in `(0, 1)`.
    pub fn inverse_step(&self, id: u32, y: f64) -> f64 {
        match &self.branch_set {
            BranchSet::Finite(branches) => {
                let b = &branches[id as usize];
                match &b.formula {
                    BranchFormula::Affine { a, b: off } => (y - off) / a,
                    BranchFormula::Custom(e) => newton_inverse(e, b.lo, b.hi, y),
                }
            }
            BranchSet::Countable(CountableFamily::Gauss) => 1.0 / (id as f64 + y),
        }
    }

    /// `Dh_id(y) = 1 / F'(h_id(y))`, signed.
    pub fn inverse_step_d(&self, id: u32, y: f64, hy: f64) -> f64 {
        match &self.branch_set {
            BranchSet::Finite(branches) => match &branches[id as usize].formula {
                BranchFormula::Affine { a, .. } => 1.0 / a,
                BranchFormula::Custom(_) => {
                    let _ = y;
                    1.0 / self.forward_d1_on_branch(id, hy)
                }
            },
            BranchSet::Countable(CountableFamily::Gauss) => -hy * hy,
        }
    }

    /// `d/dy log J_{h_id}(y)`; requires a `C^2` map.
    pub fn inverse_step_dlogj(&self, id: u32, _y: f64, hy: f64, dh: f64) -> Result<f64> {
        self.require_c2()?;
        match &self.branch_set {
            BranchSet::Finite(branches) => match &branches[id as usize].formula {
                BranchFormula::Affine { .. } => Ok(0.0),
                BranchFormula::Custom(e) => {
                    let (_, d1, d2) = e.taylor2(Var::X, &Bindings::x_only(hy))?;
                    // log J(y) = -log|F'(h(y))|; derivative = -F''(h) h' / F'(h)
                    Ok(-d2 * dh / d1)
                }
            },
            // J(y) = 1/(k+y)^2, dlogJ/dy = -2/(k+y) = -2 h(y) / 1 ... = -2/(k+y)
            BranchSet::Countable(CountableFamily::Gauss) => Ok(-2.0 * hy),
        }
    }

    /// Index set used for depth-`depth` enumerations: every branch for
    /// finite maps; for countable families the smallest truncation level
    /// whose certified omitted sup-Jacobian mass at this depth is at most
    /// `tail_tol`.
    pub fn enumeration_ids(
        &self,
        depth: usize,
        tail_tol: Option<f64>,
    ) -> Result<(Vec<u32>, Option<TruncationInfo>)> {
        match &self.branch_set {
            BranchSet::Finite(branches) => {
                Ok(((0..branches.len() as u32).collect(), None))
            }
            BranchSet::Countable(family) => {
                let tol = tail_tol.ok_or_else(|| {
                    Error::Config("countable-branch map requires a tail tolerance".into())
                })?;
                if tol <= 0.0 {
                    return Err(Error::Config("tail tolerance must be positive".into()));
                }
                let (k_max, omitted) = truncation_level(family, depth, tol)?;
                Ok((
                    (1..=k_max).collect(),
                    Some(TruncationInfo { k_max, omitted_bound: omitted }),
                ))
            }
        }
    }
}

/// Smallest `K` whose certified depth-`depth` omitted mass
/// `S_up^depth - S_K^depth` (with `S_up = S_K + tail_bound(K)`) is at most
/// `tail_tol`. The bound is monotone non-increasing in `K`.
fn truncation_level(
    family: &CountableFamily,
    depth: usize,
    tail_tol: f64,
) -> Result<(u32, f64)> {
    let mut partial = NeumaierSum::new();
    let mut k = 0u32;
    loop {
        k += 1;
        partial.add(family.sup_jacobian(k));
        let omitted = omitted_mass(partial.value(), family.tail_bound(k), depth);
        if omitted <= tail_tol {
            return Ok((k, omitted));
        }
        if k > 100_000_000 {
            return Err(Error::Config(format!(
                "truncation level for tail tolerance {tail_tol} exceeds 1e8 branches"
            )));
        }
    }
}

/// `(s + tail)^depth - s^depth` in the factored form
/// `tail * sum_i (s + tail)^i s^(depth-1-i)`, which avoids the cancellation
/// of the naive difference.
fn omitted_mass(s: f64, tail: f64, depth: usize) -> f64 {
    let s_up = s + tail;
    let mut sum = 0.0;
    for i in 0..depth {
        sum += s_up.powi(i as i32) * s.powi((depth - 1 - i) as i32);
    }
    tail * sum
}

/// Enumerated word collection. Words are yielded lazily; `count` is exact.
#[derive(Debug, Clone)]
pub struct BranchWords {
    pub depth: usize,
    pub ids: Vec<u32>,
    pub count: u128,
    pub truncation: Option<TruncationInfo>,
}

impl BranchWords {
    pub fn iter(&self) -> impl Iterator<Item = BranchWord> + '_ {
        let m = self.ids.len();
        let depth = self.depth;
        let total = if m == 0 { 0 } else { self.count as usize };
        (0..total).map(move |mut code| {
            let mut indices = vec![0u32; depth];
            for slot in (0..depth).rev() {
                indices[slot] = self.ids[code % m];
                code /= m;
            }
            BranchWord { indices }
        })
    }
}

/// All depth-`n` inverse-branch words of `map`.
///
/// For countable maps the index set is truncated to the certified level for
/// `tail_tol`, and the omitted-mass bound is reported. Enumerations larger
/// than [`enumeration_cap`] are refused.
pub fn branch_words(map: &ExpandingMap, n: usize, tail_tol: Option<f64>) -> Result<BranchWords> {
    assert!(n >= 1, "word depth must be at least 1");
    let (ids, truncation) = map.enumeration_ids(n, tail_tol)?;
    let cap = enumeration_cap();
    let count = word_count(ids.len(), n).filter(|&c| c <= cap).ok_or({
        Error::EnumerationBudget { depth: n, needed: u128::MAX, cap }
    })?;
    if count > cap {
        return Err(Error::EnumerationBudget { depth: n, needed: count, cap });
    }
    Ok(BranchWords { depth: n, ids, count, truncation })
}

/// Evaluate an inverse-branch word at `x`: point, derivative, Jacobian and
/// (on `C^2` maps) the Jacobian derivative.
pub fn inverse_eval(map: &ExpandingMap, word: &BranchWord, x: f64) -> Result<InverseEval> {
    map.check_interior(x)?;
    let want_dj = matches!(map.smoothness, Smoothness::C2);
    let mut y = x;
    let mut dh = 1.0;
    let mut dj_sum = 0.0;
    // Indices are in composition order; the last one acts first.
    for &id in word.indices.iter().rev() {
        let hy = map.inverse_step(id, y);
        let step_d = map.inverse_step_d(id, y, hy);
        if want_dj {
            let dlogj = map.inverse_step_dlogj(id, y, hy, step_d)?;
            dj_sum += dlogj * dh;
        }
        dh *= step_d;
        y = hy;
    }
    let jacobian = dh.abs();
    Ok(InverseEval {
        hx: y,
        dh,
        jacobian,
        dj: if want_dj { Some(jacobian * dj_sum) } else { None },
    })
}

/// Per-leaf view handed to [`for_each_word`] callbacks.
///
/// `points[d]` is the image of `x` under the last-applied `d` steps (so
/// `points[depth]` is `h(x)`); `prefix_d[d]` is the derivative at `x` of
/// that partial word, and `choices[d]` is the branch applied at step `d+1`
/// (`points[d+1]` lies inside that branch). The full word in composition
/// order is `choices` reversed.
pub struct LeafCtx<'a> {
    pub points: &'a [f64],
    pub prefix_d: &'a [f64],
    pub choices: &'a [u32],
    pub dj_sums: Option<&'a [f64]>,
}

impl LeafCtx<'_> {
    pub fn depth(&self) -> usize {
        self.choices.len()
    }

    /// `h(x)`.
    pub fn hx(&self) -> f64 {
        self.points[self.depth()]
    }

    /// `Dh(x)`.
    pub fn dh(&self) -> f64 {
        self.prefix_d[self.depth()]
    }

    /// `J_h(x)`.
    pub fn jacobian(&self) -> f64 {
        self.dh().abs()
    }

    /// `DJ_h(x)` when the walk tracks second-order data.
    pub fn dj(&self) -> Option<f64> {
        self.dj_sums.map(|s| self.jacobian() * s[self.depth()])
    }

    pub fn word(&self) -> BranchWord {
        BranchWord { indices: self.choices.iter().rev().copied().collect() }
    }
}

/// Depth-first walk over every depth-`depth` inverse word of `map`,
/// evaluated at `x`, invoking `leaf` once per word in a fixed order.
///
/// The walk shares partial inverse orbits between words, and the leaf
/// callback sees the whole backward orbit, so fiber iterations and
/// derivative recursions run in `O(depth)` per word.
pub fn for_each_word<F>(
    map: &ExpandingMap,
    x: f64,
    depth: usize,
    ids: &[u32],
    with_dj: bool,
    mut leaf: F,
) -> Result<()>
where
    F: FnMut(&LeafCtx<'_>),
{
    map.check_interior(x)?;
    if with_dj {
        map.require_c2()?;
    }
    let mut points = vec![0.0; depth + 1];
    let mut prefix_d = vec![0.0; depth + 1];
    let mut dj_sums = vec![0.0; depth + 1];
    let mut choices = vec![0u32; depth];
    points[0] = x;
    prefix_d[0] = 1.0;
    dj_sums[0] = 0.0;

    // Explicit stack: slot d holds the position within `ids` tried at depth d.
    let mut cursor = vec![0usize; depth];
    let mut d = 0usize;
    loop {
        if d == depth {
            let ctx = LeafCtx {
                points: &points,
                prefix_d: &prefix_d,
                choices: &choices,
                dj_sums: if with_dj { Some(&dj_sums) } else { None },
            };
            leaf(&ctx);
            // Backtrack to the deepest level with an untried branch.
            loop {
                if d == 0 {
                    return Ok(());
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < ids.len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
        let id = ids[cursor[d]];
        let y = points[d];
        let hy = map.inverse_step(id, y);
        let step_d = map.inverse_step_d(id, y, hy);
        if with_dj {
            let dlogj = map.inverse_step_dlogj(id, y, hy, step_d)?;
            dj_sums[d + 1] = dj_sums[d] + dlogj * prefix_d[d];
        }
        points[d + 1] = hy;
        prefix_d[d + 1] = prefix_d[d] * step_d;
        choices[d] = id;
        d += 1;
    }
}

fn newton_inverse(forward: &Expr, lo: f64, hi: f64, target: f64) -> f64 {
    // The branch maps (lo, hi) monotonically onto (0, 1); bisection keeps
    // Newton inside the bracket.
    let eval = |x: f64| forward.eval(&Bindings::x_only(x)).unwrap_or(f64::NAN);
    let f_lo = eval(lo + 1e-14);
    let f_hi = eval(hi - 1e-14);
    let increasing = f_hi > f_lo;
    let (mut a, mut b) = (lo, hi);
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let (v, d, _) = forward
            .taylor2(Var::X, &Bindings::x_only(x))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let err = v - target;
        if err.abs() < 1e-15 {
            return x;
        }
        let err_is_high = if increasing { err > 0.0 } else { err < 0.0 };
        if err_is_high {
            b = x;
        } else {
            a = x;
        }
        let step = err / d;
        let candidate = x - step;
        x = if candidate > a && candidate < b { candidate } else { 0.5 * (a + b) };
        if b - a < 1e-16 {
            return x;
        }
    }
    x
}

/// One row of an expansion report.
#[derive(Debug, Clone, Copy)]
pub struct ExpansionRow {
    pub n: usize,
    /// Max over words and sample points of `|Dh|` (an empirical lower
    /// bound of the true supremum).
    pub max_dh: f64,
    /// Max over sample points of `sum_h |DJ_h|`; `None` on `C^{1+alpha}` maps.
    pub sum_dj: Option<f64>,
    /// Empirical Hölder distortion of `log J_h` over sampled pairs.
    pub distortion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone)]
pub struct ExpansionReport {
    pub rows: Vec<ExpansionRow>,
    /// `(c, lambda, ci)` fit of `max_dh ~ c * exp(-lambda n)`.
    pub fitted: Option<(f64, f64, f64)>,
    pub verdict: Verdict,
    pub violations: Vec<String>,
    pub truncation: Option<TruncationInfo>,
    pub constants_certified: bool,
    pub sample_count: usize,
}

/// Slack applied to every declared-bound comparison: empirical suprema are
/// lower bounds, so `measured <= declared * (1 + PASS_SLACK)` is the safe
/// direction.
pub const PASS_SLACK: f64 = 1e-6;

/// Measures `max |Dh|`, `sum |DJ_h|` and the `log J` distortion constant
/// for each depth up to `n_max`, against the map's declared constants.
pub fn expansion_report(
    map: &ExpandingMap,
    n_max: usize,
    sample_count: usize,
) -> Result<ExpansionReport> {
    assert!(n_max >= 1);
    let alpha = match map.smoothness {
        Smoothness::C1Alpha(a) => a,
        Smoothness::C2 => 1.0,
    };
    let want_dj = matches!(map.smoothness, Smoothness::C2);
    let samples = low_discrepancy_points(sample_count, map.boundary_margin);
    let mut rows = Vec::new();
    let mut violations: Vec<String> = Vec::new();
    let mut truncation = None;

    for n in 1..=n_max {
        // Truncation for countable maps: largest level that keeps the walk
        // affordable; measured maxima stay valid lower bounds and the
        // omitted mass is recorded.
        let (ids, info) = enumeration_ids_for_report(map, n)?;
        if info.is_some() {
            truncation = info;
        }
        let mut max_dh = 0.0f64;
        let mut max_sum_dj = 0.0f64;
        let mut distortion = 0.0f64;
        let mut prev_logj: Vec<f64> = Vec::new();
        let mut prev_x = f64::NAN;
        for &x in &samples {
            let mut sum_dj = NeumaierSum::new();
            let mut logj: Vec<f64> = Vec::with_capacity(ids.len().pow(n as u32));
            for_each_word(map, x, n, &ids, want_dj, |ctx| {
                let dh = ctx.dh().abs();
                if dh > max_dh {
                    max_dh = dh;
                }
                if let Some(dj) = ctx.dj() {
                    sum_dj.add(dj.abs());
                }
                logj.push(ctx.jacobian().ln());
            })?;
            if want_dj && sum_dj.value() > max_sum_dj {
                max_sum_dj = sum_dj.value();
            }
            if !prev_logj.is_empty() {
                let denom = (x - prev_x).abs().powf(alpha);
                for (a, b) in logj.iter().zip(&prev_logj) {
                    let q = (a - b).abs() / denom;
                    if q > distortion {
                        distortion = q;
                    }
                }
            }
            prev_logj = logj;
            prev_x = x;
        }
        let declared_dh = map.constants.c_lambda * (-map.constants.lambda * n as f64).exp();
        if max_dh > declared_dh * (1.0 + PASS_SLACK) {
            violations.push(format!(
                "max |Dh| = {max_dh:.6e} at depth {n} exceeds c_lambda*exp(-lambda*n) = {declared_dh:.6e}"
            ));
        }
        if want_dj && max_sum_dj > map.constants.c_d * (1.0 + PASS_SLACK) {
            violations.push(format!(
                "sum |DJ_h| = {max_sum_dj:.6e} at depth {n} exceeds c_d = {:.6e}",
                map.constants.c_d
            ));
        }
        if distortion > map.constants.c_j * (1.0 + PASS_SLACK) {
            violations.push(format!(
                "log-Jacobian distortion {distortion:.6e} at depth {n} exceeds c_j = {:.6e}",
                map.constants.c_j
            ));
        }
        rows.push(ExpansionRow {
            n,
            max_dh,
            sum_dj: want_dj.then_some(max_sum_dj),
            distortion,
        });
    }

    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let vals: Vec<f64> = rows.iter().map(|r| r.max_dh).collect();
    let fitted = fit_decay(&ns, &vals);
    if let Some((_, lambda_fit, _)) = fitted {
        if lambda_fit <= 0.0 {
            violations.push(format!("fitted decay exponent {lambda_fit:.3e} is not positive"));
        }
    }
    let verdict = if violations.is_empty() { Verdict::Pass } else { Verdict::Fail };
    Ok(ExpansionReport {
        rows,
        fitted,
        verdict,
        violations,
        truncation,
        constants_certified: map.constants.certified,
        sample_count: samples.len(),
    })
}

fn enumeration_ids_for_report(
    map: &ExpandingMap,
    depth: usize,
) -> Result<(Vec<u32>, Option<TruncationInfo>)> {
    match &map.branch_set {
        BranchSet::Finite(_) => map.enumeration_ids(depth, None),
        BranchSet::Countable(family) => {
            let budget: u128 = 1 << 18;
            let mut k_max = 1u32;
            while word_count(k_max as usize + 1, depth).is_some_and(|c| c <= budget) {
                k_max += 1;
            }
            let mut partial = NeumaierSum::new();
            for k in 1..=k_max {
                partial.add(family.sup_jacobian(k));
            }
            let omitted = omitted_mass(partial.value(), family.tail_bound(k_max), depth);
            Ok((
                (1..=k_max).collect(),
                Some(TruncationInfo { k_max, omitted_bound: omitted }),
            ))
        }
    }
}

/// Midpoint nodes `(i + 1/2)/resolution`, strictly inside the interval.
pub fn midpoints(resolution: usize) -> Vec<f64> {
    crate::numeric::midpoint_nodes(resolution).collect()
}

/// Errors when a depth-`depth` enumeration over `m` indices exceeds the
/// word budget.
pub fn check_budget(m: usize, depth: usize) -> Result<()> {
    let cap = enumeration_cap();
    match word_count(m, depth) {
        Some(c) if c <= cap => Ok(()),
        Some(c) => Err(Error::EnumerationBudget { depth, needed: c, cap }),
        None => Err(Error::EnumerationBudget { depth, needed: u128::MAX, cap }),
    }
}

/// Deterministic low-discrepancy interior points (golden-ratio rotation),
/// kept away from the boundary by `margin`.
pub fn low_discrepancy_points(count: usize, margin: f64) -> Vec<f64> {
    let phi_inv = 0.618_033_988_749_894_9_f64;
    (0..count)
        .map(|j| {
            let t = (0.5 + phi_inv * (j as f64 + 1.0)).fract();
            margin + t * (1.0 - 2.0 * margin)
        })
        .collect()
}

/// Forward orbit values and branch ids for `n` steps.
///
/// For the binary shift map the orbit is carried exactly in a bit register
/// seeded with the mantissa of `x0` extended by pseudo-random tail bits
/// (seeded, recorded); any bare f64 is a dyadic rational whose true orbit
/// collapses onto the endpoint fixed point after at most ~53 steps, so long
/// orbits follow a generic perturbation of `x0` within one ulp.
pub fn forward_orbit(
    map: &ExpandingMap,
    x0: f64,
    n: usize,
    tail_seed: u64,
) -> Result<Vec<(f64, u32)>> {
    if map.exact_binary_shift && n > 40 {
        let mut orbit = BitOrbit::new(x0, n + 80, tail_seed);
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let x = orbit.frac();
            if !(map.boundary_margin..=1.0 - map.boundary_margin).contains(&x) {
                return Err(Error::OrbitDiscontinuity { x, step });
            }
            let id = if orbit.top_bit() { 1 } else { 0 };
            out.push((x, id));
            orbit.step();
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(n);
    let mut x = x0;
    for step in 0..n {
        let id = map.branch_of(x).map_err(|_| Error::OrbitDiscontinuity { x, step })?;
        out.push((x, id));
        x = map.forward_on_branch(id, x);
        x = x.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Exact fixed-point fraction register for the binary shift map.
pub struct BitOrbit {
    limbs: Vec<u64>,
}

impl BitOrbit {
    /// Register holding `x0`'s binary expansion followed by `extra_bits`
    /// seeded pseudo-random bits.
    pub fn new(x0: f64, extra_bits: usize, seed: u64) -> Self {
        use rand::{RngCore, SeedableRng};
        let total_bits = 64 + extra_bits;
        let n_limbs = total_bits.div_ceil(64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut limbs: Vec<u64> = (0..n_limbs).map(|_| rng.next_u64()).collect();
        // Overwrite the leading bits with x0's expansion.
        let frac = x0.fract().abs();
        let lead = (frac * (u64::MAX as f64 + 1.0)) as u64;
        limbs[0] = lead | (limbs[0] & 0x7FF);
        BitOrbit { limbs }
    }

    /// Doubling modulo one: shift the register left by one bit.
    pub fn step(&mut self) {
        let mut carry = 0u64;
        for limb in self.limbs.iter_mut().rev() {
            let new_carry = *limb >> 63;
            *limb = (*limb << 1) | carry;
            carry = new_carry;
        }
    }

    /// Leading 53 bits as an f64 in `[0, 1)`.
    pub fn frac(&self) -> f64 {
        self.limbs[0] as f64 / (u64::MAX as f64 + 1.0)
    }

    pub fn top_bit(&self) -> bool {
        self.limbs[0] >> 63 == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    #[test]
    fn doubling_word_counts() {
        let map = catalog::doubling_map();
        let words = branch_words(&map, 2, None).unwrap();
        assert_eq!(words.count, 4);
        let all: Vec<Vec<u32>> = words.iter().map(|w| w.indices).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);

        let words = branch_words(&map, 20, None).unwrap();
        assert_eq!(words.count, 1 << 20);
    }

    #[test]
    fn budget_is_enforced() {
        let map = catalog::doubling_map();
        match branch_words(&map, 30, None) {
            Err(Error::EnumerationBudget { cap, .. }) => assert_eq!(cap, enumeration_cap()),
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn gauss_truncation_level_matches_tail_bound() {
        let map = catalog::gauss_map();
        let words = branch_words(&map, 1, Some(2e-2)).unwrap();
        let info = words.truncation.unwrap();
        assert_eq!(info.k_max, 50);
        assert!(info.omitted_bound <= 0.02 + 1e-15);
        assert_eq!(words.count, 50);
    }

    #[test]
    fn monotone_tail_bound() {
        let family = CountableFamily::Gauss;
        let mut prev = f64::INFINITY;
        let mut partial = NeumaierSum::new();
        for k in 1..200u32 {
            partial.add(family.sup_jacobian(k));
            let omitted = omitted_mass(partial.value(), family.tail_bound(k), 3);
            assert!(omitted <= prev + 1e-18, "tail bound not monotone at K={k}");
            prev = omitted;
        }
    }

    #[test]
    fn inverse_eval_doubling_single_step() {
        let map = catalog::doubling_map();
        let word = BranchWord { indices: vec![0] };
        let r = inverse_eval(&map, &word, 0.5).unwrap();
        assert_eq!(r.hx, 0.25);
        assert_eq!(r.dh, 0.5);
        assert_eq!(r.jacobian, 0.5);
        assert_eq!(r.dj, Some(0.0));
    }

    #[test]
    fn inverse_eval_doubling_two_steps() {
        // Word [0, 1] is h_0 ∘ h_1: x -> (x+1)/2 -> x/4 + 1/4.
        let map = catalog::doubling_map();
        let word = BranchWord { indices: vec![0, 1] };
        let x = 1e-6;
        let r = inverse_eval(&map, &word, x).unwrap();
        assert!((r.hx - (x / 4.0 + 0.25)).abs() < 1e-15);
        assert_eq!(r.dh, 0.25);
        assert_eq!(r.jacobian, 0.25);
        assert_eq!(r.dj, Some(0.0));
        // The boundary itself is rejected.
        assert!(matches!(
            inverse_eval(&map, &word, 0.0),
            Err(Error::BoundaryPoint { .. })
        ));
    }

    #[test]
    fn inverse_eval_gauss_branch() {
        let map = catalog::gauss_map();
        for k in [1u32, 2, 7] {
            let x = 0.37;
            let word = BranchWord { indices: vec![k] };
            let r = inverse_eval(&map, &word, x).unwrap();
            let kf = k as f64;
            assert!((r.hx - 1.0 / (kf + x)).abs() < 1e-15);
            assert!((r.dh + 1.0 / (kf + x).powi(2)).abs() < 1e-15);
            assert!((r.jacobian - 1.0 / (kf + x).powi(2)).abs() < 1e-15);
            let dj = r.dj.unwrap();
            assert!(
                (dj.abs() - 2.0 / (kf + x).powi(3)).abs() < 1e-15,
                "for k={k}: dj = {dj}"
            );
            assert!(dj < 0.0, "J decreases in x");
        }
    }

    #[test]
    fn word_suffix_identity() {
        // F^{len(w1)} ∘ h_{w1 || w2} = h_{w2} on samples: applying the
        // forward map len(w1) times strips the outermost part of the word.
        let map = catalog::doubling_map();
        let w1 = BranchWord { indices: vec![1, 0] };
        let w2 = BranchWord { indices: vec![0, 1, 1] };
        let concat = BranchWord {
            indices: w1.indices.iter().chain(&w2.indices).copied().collect(),
        };
        for x in low_discrepancy_points(25, 1e-6) {
            let full = inverse_eval(&map, &concat, x).unwrap().hx;
            let mut y = full;
            for _ in 0..w1.depth() {
                y = map.forward(y).unwrap();
            }
            let suffix = inverse_eval(&map, &w2, x).unwrap().hx;
            assert!((y - suffix).abs() < 1e-12, "x={x}: {y} vs {suffix}");
        }
    }

    #[test]
    fn jacobian_chain_rule() {
        let map = catalog::gauss_map();
        let word = BranchWord { indices: vec![2, 1, 3] };
        for x in low_discrepancy_points(10, 1e-6) {
            let whole = inverse_eval(&map, &word, x).unwrap();
            // Single steps applied innermost-first.
            let mut y = x;
            let mut j = 1.0;
            for &id in word.indices.iter().rev() {
                let single = inverse_eval(&map, &BranchWord { indices: vec![id] }, y).unwrap();
                j *= single.jacobian;
                y = single.hx;
            }
            assert!(
                (whole.jacobian - j).abs() <= 1e-12 * j,
                "chain rule broke at x={x}"
            );
            assert!((whole.hx - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dj_matches_finite_differences_on_gauss_words() {
        let map = catalog::gauss_map();
        let word = BranchWord { indices: vec![1, 2, 1] };
        for x in [0.21, 0.47, 0.83] {
            let h = 1e-6;
            let plus = inverse_eval(&map, &word, x + h).unwrap().jacobian;
            let minus = inverse_eval(&map, &word, x - h).unwrap().jacobian;
            let fd = (plus - minus) / (2.0 * h);
            let dj = inverse_eval(&map, &word, x).unwrap().dj.unwrap();
            assert!((fd - dj).abs() < 1e-6 * dj.abs().max(1.0), "x={x}: fd {fd} vs {dj}");
        }
    }

    #[test]
    fn expansion_report_doubling_exact() {
        let map = catalog::doubling_map();
        let report = expansion_report(&map, 12, 24).unwrap();
        assert_eq!(report.verdict, Verdict::Pass);
        for row in &report.rows {
            assert!((row.max_dh - 0.5f64.powi(row.n as i32)).abs() < 1e-15);
            assert_eq!(row.sum_dj, Some(0.0));
            assert_eq!(row.distortion, 0.0);
        }
        let (c, lambda, ci) = report.fitted.unwrap();
        assert!((c - 1.0).abs() < 1e-10);
        assert!((lambda - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ci < 1e-10);
    }

    #[test]
    fn expansion_report_gauss_positive_rate() {
        let map = catalog::gauss_map();
        let report = expansion_report(&map, 3, 16).unwrap();
        assert_eq!(report.verdict, Verdict::Pass, "violations: {:?}", report.violations);
        // Least expansion runs along the all-ones words: fitted decay is at
        // least twice the log of the golden ratio per two steps.
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        let (_, lambda_fit, _) = report.fitted.unwrap();
        assert!(lambda_fit >= golden.ln(), "fitted {lambda_fit}");
        // Depth-1 maximum |Dh| = sup 1/(1+x)^2 over the sampled points.
        assert!(report.rows[0].max_dh > 0.85 && report.rows[0].max_dh <= 1.0);
    }

    #[test]
    fn expansion_report_flags_overdeclared_rate() {
        let mut map = catalog::doubling_map();
        map.constants.lambda = 3.0f64.ln(); // claims |Dh| <= 3^-n, false
        let report = expansion_report(&map, 4, 8).unwrap();
        assert_eq!(report.verdict, Verdict::Fail);
        assert!(report.violations[0].contains("max |Dh|"));
    }

    #[test]
    fn transfer_weight_normalization_depth_words() {
        // sum_h J_h(x) phi(h x) / phi(x) = 1 for Lebesgue-invariant doubling.
        let map = catalog::doubling_map();
        for n in 1..=10usize {
            let (ids, _) = map.enumeration_ids(n, None).unwrap();
            for x in low_discrepancy_points(7, 1e-6) {
                let mut acc = NeumaierSum::new();
                for_each_word(&map, x, n, &ids, false, |ctx| acc.add(ctx.jacobian())).unwrap();
                assert!((acc.value() - 1.0).abs() < 1e-10, "n={n} x={x}");
            }
        }
    }

    #[test]
    fn bit_orbit_matches_f64_for_short_runs() {
        // The register's seeded tail bits sit below bit 53, so the first
        // ~20 doubling steps agree with plain f64 iteration to 2^(k-53).
        let map = catalog::doubling_map();
        let x0 = 0.3;
        let exact = forward_orbit(&map, x0, 45, 7).unwrap();
        let mut x = x0;
        for (step, &(ox, oid)) in exact.iter().enumerate().take(20) {
            assert!((ox - x).abs() < 1e-9, "step {step}: {ox} vs {x}");
            let id = map.branch_of(x).unwrap();
            assert_eq!(oid, id, "branch mismatch at step {step}");
            x = map.forward_on_branch(id, x);
        }
    }

    #[test]
    fn long_bit_orbit_stays_interior() {
        let map = catalog::doubling_map();
        let orbit = forward_orbit(&map, 0.3, 2000, 7).unwrap();
        assert_eq!(orbit.len(), 2000);
        for &(x, _) in &orbit {
            assert!(x > 1e-9 && x < 1.0 - 1e-9);
        }
    }
}
