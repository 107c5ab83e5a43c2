//! Compensated summation, deterministic parallel reductions, midpoint
//! quadrature and decay-rate fitting.
//!
//! Every reduction in this crate goes through [`NeumaierSum`] or one of the
//! helpers here, in a fixed traversal order, so results are bitwise
//! reproducible no matter how many worker threads are active.

use rayon::prelude::*;

/// Neumaier (improved Kahan) compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self { sum: 0.0, comp: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a sequence, in iteration order.
pub fn sum_compensated<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut acc = NeumaierSum::new();
    for v in iter {
        acc.add(v);
    }
    acc.value()
}

/// Evaluates `f` at indices `0..n` in parallel and reduces with a
/// compensated sum taken in index order. The parallel stage only fills a
/// vector, so the result does not depend on the thread count.
pub fn par_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let values: Vec<f64> = (0..n).into_par_iter().map(&f).collect();
    sum_compensated(values)
}

/// Like [`par_sum_by`] but the per-index evaluation can fail; the first
/// error (by index) wins.
pub fn par_try_sum_by<F, E>(n: usize, f: F) -> Result<f64, E>
where
    F: Fn(usize) -> Result<f64, E> + Sync,
    E: Send,
{
    let values: Vec<Result<f64, E>> = (0..n).into_par_iter().map(&f).collect();
    let mut acc = NeumaierSum::new();
    for v in values {
        acc.add(v?);
    }
    Ok(acc.value())
}

/// Midpoint nodes `(i + 1/2) / resolution` of the unit interval.
pub fn midpoint_nodes(resolution: usize) -> impl Iterator<Item = f64> {
    let r = resolution as f64;
    (0..resolution).map(move |i| (i as f64 + 0.5) / r)
}

/// Composite midpoint rule on `[0, 1]`.
pub fn midpoint_integral<F>(resolution: usize, f: F) -> f64
where
    F: Fn(f64) -> f64 + Sync,
{
    let r = resolution as f64;
    par_sum_by(resolution, |i| f((i as f64 + 0.5) / r)) / r
}

/// Least-squares fit of `log(values) = log(c) - lambda * n`.
///
/// Returns `(c, lambda, ci)` where `ci` is a 95% half-width for the decay
/// exponent. Entries with a non-positive value are skipped.
pub fn fit_decay(ns: &[f64], values: &[f64]) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&n, &v)| (n, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let sx = sum_compensated(pts.iter().map(|p| p.0));
    let sy = sum_compensated(pts.iter().map(|p| p.1));
    let xbar = sx / m;
    let ybar = sy / m;
    let sxx = sum_compensated(pts.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)));
    if sxx == 0.0 {
        return None;
    }
    let sxy = sum_compensated(pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)));
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ci = if pts.len() > 2 {
        let rss = sum_compensated(
            pts.iter()
                .map(|p| {
                    let e = p.1 - (intercept + slope * p.0);
                    e * e
                })
                .collect::<Vec<_>>(),
        );
        let se = (rss / (m - 2.0) / sxx).sqrt();
        1.96 * se
    } else {
        0.0
    };
    Some((intercept.exp(), -slope, ci))
}

/// Relative difference `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        // 1 followed by many tiny values that naive summation drops.
        let tiny = 1e-17;
        let n = 1_000_000;
        let mut values = vec![1.0];
        values.extend(std::iter::repeat_n(tiny, n));
        let exact = 1.0 + tiny * n as f64;
        assert!((sum_compensated(values.iter().copied()) - exact).abs() < 1e-15);
    }

    #[test]
    fn par_sum_matches_sequential_bitwise() {
        let f = |i: usize| ((i as f64) * 0.7).sin() / (i as f64 + 1.0);
        let seq = sum_compensated((0..10_000).map(f));
        let par = par_sum_by(10_000, f);
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn midpoint_rule_on_polynomial() {
        // Midpoint rule is exact for linear functions.
        let val = midpoint_integral(128, |x| 3.0 * x - 1.0);
        assert!((val - 0.5).abs() < 1e-14);
    }

    #[test]
    fn decay_fit_recovers_exact_rate() {
        let ns: Vec<f64> = (1..=10).map(|n| n as f64).collect();
        let values: Vec<f64> = ns.iter().map(|&n| 3.0 * (-0.5 * n).exp()).collect();
        let (c, lambda, ci) = fit_decay(&ns, &values).unwrap();
        assert!((c - 3.0).abs() < 1e-10);
        assert!((lambda - 0.5).abs() < 1e-12);
        assert!(ci < 1e-10);
    }
}
