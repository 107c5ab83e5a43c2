//! Metrics on the base interval: the euclidean distance and the symbolic
//! metric `d(x, x') = theta^{s(x, x')}` driven by the separation time of
//! forward orbits relative to the branch partition.

use super::ExpandingMap;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseMetric {
    Euclidean,
    /// `d(x, x') = theta^s` with `s` the first iterate whose orbit points
    /// land in different branch elements; separation times are capped.
    Symbolic { theta: f64, cap: u32 },
}

impl BaseMetric {
    pub fn distance(&self, map: &ExpandingMap, x: f64, y: f64) -> Result<f64> {
        match self {
            BaseMetric::Euclidean => Ok((x - y).abs()),
            BaseMetric::Symbolic { theta, cap } => {
                let s = separation_time(map, x, y, *cap)?;
                Ok(theta.powi(s as i32))
            }
        }
    }
}

/// First iterate at which the orbits of `x` and `y` land in different
/// branch elements; `cap` if they stay together that long.
pub fn separation_time(map: &ExpandingMap, x: f64, y: f64, cap: u32) -> Result<u32> {
    let mut a = x;
    let mut b = y;
    for s in 0..cap {
        let ia = map.branch_of(a)?;
        let ib = map.branch_of(b)?;
        if ia != ib {
            return Ok(s);
        }
        a = map.forward_on_branch(ia, a);
        b = map.forward_on_branch(ib, b);
    }
    Ok(cap)
}

/// Sampled comparability constants between the euclidean norm and a
/// metric: `c1` is the largest observed `|x - x'| / d(x, x')`, and
/// `reverse` the largest observed `d(x, x') / |x - x'|`. Only the forward
/// constant is assumed by the estimates; the reverse one is recorded
/// because nothing guarantees it is finite.
#[derive(Debug, Clone, Copy)]
pub struct ComparabilityReport {
    pub c1: f64,
    pub reverse: f64,
    pub pairs: usize,
}

pub fn comparability_report(
    map: &ExpandingMap,
    metric: &BaseMetric,
    pair_count: usize,
) -> Result<ComparabilityReport> {
    let points = super::low_discrepancy_points(2 * pair_count, 1e-6);
    let mut c1 = 0.0f64;
    let mut reverse = 0.0f64;
    let mut pairs = 0usize;
    for chunk in points.chunks_exact(2) {
        let (x, y) = (chunk[0], chunk[1]);
        let d = match metric.distance(map, x, y) {
            Ok(d) => d,
            Err(_) => continue,
        };
        if d == 0.0 {
            continue;
        }
        let e = (x - y).abs();
        c1 = c1.max(e / d);
        if e > 0.0 {
            reverse = reverse.max(d / e);
        }
        pairs += 1;
    }
    Ok(ComparabilityReport { c1, reverse, pairs })
}
