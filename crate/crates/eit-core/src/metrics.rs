//! Quantitative comparison of reconstructed and ground-truth conductivity
//! fields: pointwise errors, correlation, centroid displacement of the
//! inclusion mass, and background flatness.
//!
//! All statistics run over masked grid nodes only. Centroid and background
//! metrics are asymmetric in (reconstruction, ground truth) by design: the
//! ground truth decides which nodes count as background and where inclusion
//! mass should sit. Only `rmse` and `rel_l2`'s numerator are symmetric under
//! swapping the two fields.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::geometry::GridSpec;
use crate::phantom::Phantom;

// --- report ---

/// Summary statistics for one reconstructed case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Root mean square error over masked nodes.
    pub rmse: f64,
    /// ||rec − gt||₂ / ||gt||₂ over masked nodes.
    pub rel_l2: f64,
    /// Pearson correlation; absent when the ground truth is constant.
    pub pearson: Option<f64>,
    /// Distance between the (σ−1)-weighted centroids of the two fields;
    /// absent when either field carries no net weight (homogeneous case).
    pub centroid_error: Option<f64>,
    /// Centroid displacement per ground-truth inclusion, in disk units.
    /// Each masked node is assigned to its nearest inclusion; within each
    /// cell of that partition the |σ−1|-weighted centroids of both fields
    /// are compared. An inclusion the reconstruction misses entirely
    /// (no weight in its cell) reports the disk diameter 2.0.
    pub per_inclusion_centroid_errors: Vec<f64>,
    /// Mean |σ_rec − 1| over masked nodes lying inside no inclusion.
    pub background_mad: f64,
    /// Wall-clock seconds for the reconstruction; filled in by the caller.
    pub runtime_seconds: Option<f64>,
}

// --- helpers ---

/// Pearson correlation of two equal-length slices. `None` when either
/// side has (numerically) zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = (sxx * syy).sqrt();
    if denom < 1e-30 {
        None
    } else {
        Some((sxy / denom).clamp(-1.0, 1.0))
    }
}

/// Weighted centroid of points; `None` when the total weight is negligible
/// relative to the node count (no signal to locate).
fn weighted_centroid(points: &[(f64, f64)], weights: &[f64]) -> Option<(f64, f64)> {
    let total: f64 = weights.iter().sum();
    if total.abs() < 1e-9 * points.len().max(1) as f64 {
        return None;
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for (&(x, y), &w) in points.iter().zip(weights) {
        cx += w * x;
        cy += w * y;
    }
    Some((cx / total, cy / total))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Reported when the reconstruction leaves an inclusion's cell of the
/// partition empty: the disk diameter, the largest possible displacement.
const MISSED_INCLUSION_ERROR: f64 = 2.0;

// --- computation ---

/// Compare a reconstructed conductivity field against the ground truth.
/// Both fields are n×n node grids aligned with `grid`; `phantom` supplies
/// the inclusion geometry for the per-inclusion and background metrics.
/// `runtime_seconds` is left `None` for the caller to fill.
pub fn compute_metrics(
    rec: &Array2<f64>,
    gt: &Array2<f64>,
    grid: &GridSpec,
    phantom: &Phantom,
) -> Result<MetricReport> {
    let n = grid.n;
    if rec.dim() != (n, n) || gt.dim() != (n, n) {
        return Err(EitError::InvalidArgument(format!(
            "field shapes {:?} / {:?} do not match grid {}x{}",
            rec.dim(),
            gt.dim(),
            n,
            n
        )));
    }

    let mut points = Vec::new();
    let mut rv = Vec::new();
    let mut gv = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if grid.is_masked(i, j) {
                points.push((grid.coord(i), grid.coord(j)));
                rv.push(rec[[i, j]]);
                gv.push(gt[[i, j]]);
            }
        }
    }
    if points.is_empty() {
        return Err(EitError::InvalidArgument("grid mask is empty".into()));
    }
    let m = points.len() as f64;

    let mut sq_diff = 0.0;
    let mut sq_gt = 0.0;
    for (&r, &g) in rv.iter().zip(&gv) {
        sq_diff += (r - g) * (r - g);
        sq_gt += g * g;
    }
    let rmse = (sq_diff / m).sqrt();
    let rel_l2 = if sq_gt > 0.0 {
        (sq_diff / sq_gt).sqrt()
    } else {
        f64::INFINITY
    };

    let pearson_r = pearson(&rv, &gv);

    // Global inclusion-mass displacement: signed (σ−1) weights.
    let w_rec: Vec<f64> = rv.iter().map(|&v| v - 1.0).collect();
    let w_gt: Vec<f64> = gv.iter().map(|&v| v - 1.0).collect();
    let centroid_error = match (
        weighted_centroid(&points, &w_rec),
        weighted_centroid(&points, &w_gt),
    ) {
        (Some(a), Some(b)) => Some(dist(a, b)),
        _ => None,
    };

    // Partition masked nodes by nearest inclusion reference point, then
    // compare |σ−1|-weighted centroids within each cell.
    let refs: Vec<(f64, f64)> = phantom
        .inclusions
        .iter()
        .map(|inc| {
            let (c, _) = inc.shape.bounding();
            (c[0], c[1])
        })
        .collect();
    let mut per_inclusion_centroid_errors = Vec::with_capacity(refs.len());
    if !refs.is_empty() {
        let mut owner = vec![0usize; points.len()];
        for (k, &p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (idx, &r) in refs.iter().enumerate() {
                let d = dist(p, r);
                if d < best_d {
                    best_d = d;
                    best = idx;
                }
            }
            owner[k] = best;
        }
        for idx in 0..refs.len() {
            let cell: Vec<usize> = (0..points.len()).filter(|&k| owner[k] == idx).collect();
            let pts: Vec<(f64, f64)> = cell.iter().map(|&k| points[k]).collect();
            let wr: Vec<f64> = cell.iter().map(|&k| (rv[k] - 1.0).abs()).collect();
            let wg: Vec<f64> = cell.iter().map(|&k| (gv[k] - 1.0).abs()).collect();
            let err = match (weighted_centroid(&pts, &wr), weighted_centroid(&pts, &wg)) {
                (Some(a), Some(b)) => dist(a, b),
                _ => MISSED_INCLUSION_ERROR,
            };
            per_inclusion_centroid_errors.push(err);
        }
    }

    // Background flatness: nodes inside no inclusion should sit at 1.
    let mut bg_sum = 0.0;
    let mut bg_count = 0usize;
    for (k, &p) in points.iter().enumerate() {
        let inside = phantom
            .inclusions
            .iter()
            .any(|inc| inc.shape.contains([p.0, p.1]));
        if !inside {
            bg_sum += (rv[k] - 1.0).abs();
            bg_count += 1;
        }
    }
    let background_mad = if bg_count > 0 {
        bg_sum / bg_count as f64
    } else {
        0.0
    };

    Ok(MetricReport {
        rmse,
        rel_l2,
        pearson: pearson_r,
        centroid_error,
        per_inclusion_centroid_errors,
        background_mad,
        runtime_seconds: None,
    })
}

// --- tests ---
