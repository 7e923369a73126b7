//! Agreement between streamline sets: point-set Hausdorff distance and
//! nearest-rank percentile summaries.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Vec3;

/// A cropped polyline in world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Vec3>,
}

impl Streamline {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("streamline has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("streamline point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of segment lengths.
    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// The first `n` points (at least one).
    pub fn truncated(&self, n: usize) -> Streamline {
        Streamline {
            points: self.points[..n.clamp(1, self.points.len())].to_vec(),
        }
    }
}

#[inline]
fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
fn dist(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

/// Largest distance from a point of `a` to its nearest point of `b`.
pub fn directed_hausdorff(a: &Streamline, b: &Streamline) -> f64 {
    let mut worst = 0.0f64;
    for &p in &a.points {
        let mut best = f64::INFINITY;
        for &q in &b.points {
            let d = dist2(p, q);
            if d < best {
                best = d;
                // p can no longer raise the running maximum
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

pub fn hausdorff(a: &Streamline, b: &Streamline) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

/// Hausdorff distance of each index-aligned pair, computed in parallel.
pub fn pairwise_hausdorff(a: &[Streamline], b: &[Streamline]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.par_iter().zip(b.par_iter()).map(|(x, y)| hausdorff(x, y)).collect())
}

/// Ranks reported by [`percentile_report`] by default.
pub const DEFAULT_RANKS: [u32; 4] = [10, 50, 95, 99];

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub pair_distances: Vec<f64>,
    pub percentiles: BTreeMap<u32, f64>,
    /// Pairs closer than one millimetre.
    pub below_1mm: usize,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], p: u32) -> f64 {
    let n = sorted.len();
    let rank = (p as usize * n).div_ceil(100);
    sorted[rank.clamp(1, n) - 1]
}

pub fn percentile_report(distances: &[f64], ranks: &[u32]) -> Result<DistanceReport> {
    if distances.is_empty() {
        return Err(Error::InvalidInput("no distances to summarize".into()));
    }
    if let Some(d) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidInput(format!("invalid distance {d}")));
    }
    if let Some(p) = ranks.iter().find(|&&p| p > 100) {
        return Err(Error::InvalidParameter(format!("percentile {p} exceeds 100")));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let percentiles = ranks.iter().map(|&p| (p, nearest_rank(&sorted, p))).collect();
    Ok(DistanceReport {
        pair_distances: distances.to_vec(),
        percentiles,
        below_1mm: distances.iter().filter(|&&d| d < 1.0).count(),
    })
}
