//! Finite-difference calculus on the masked grid.
//!
//! Derivatives are taken only at nodes whose full 8-neighborhood lies inside
//! the disk, so no stencil ever crosses the mask edge; the boundary normal
//! derivative is recovered by extending the interior gradient fields
//! outward, which is exact for linear potentials and avoids one-sided
//! stencils entirely.

use crate::error::{EitError, Result};
use crate::geometry::{GridSpec, PotentialField};

/// First and second derivatives on `interior_ids`, and the outward normal
/// derivative at the ring points.
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    pub du_dx: Vec<f64>,
    pub du_dy: Vec<f64>,
    pub d2u_dxx: Vec<f64>,
    pub d2u_dyy: Vec<f64>,
    pub dn_u: Vec<f64>,
}

/// Central differences of a masked grid field.
pub fn fd_derivatives(u: &PotentialField, grid: &GridSpec) -> Result<DerivativeBundle> {
    let n = grid.n;
    if u.values.dim() != (n, n) {
        return Err(EitError::InvalidArgument(format!(
            "field shape {:?} does not match grid {n}x{n}",
            u.values.dim()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            if grid.is_masked(i, j) && !u.values[[i, j]].is_finite() {
                return Err(EitError::InvalidArgument(format!(
                    "field has a non-finite value at node ({i}, {j})"
                )));
            }
        }
    }
    let h = grid.h;
    let m = grid.interior_ids.len();
    let mut du_dx = Vec::with_capacity(m);
    let mut du_dy = Vec::with_capacity(m);
    let mut d2u_dxx = Vec::with_capacity(m);
    let mut d2u_dyy = Vec::with_capacity(m);
    for &id in &grid.interior_ids {
        let (i, j) = (id / n, id % n);
        let c = u.values[[i, j]];
        let (xe, xw) = (u.values[[i + 1, j]], u.values[[i - 1, j]]);
        let (yn, ys) = (u.values[[i, j + 1]], u.values[[i, j - 1]]);
        du_dx.push((xe - xw) / (2.0 * h));
        du_dy.push((yn - ys) / (2.0 * h));
        d2u_dxx.push((xe - 2.0 * c + xw) / (h * h));
        d2u_dyy.push((yn - 2.0 * c + ys) / (h * h));
    }

    let lookup = interior_lookup(grid);
    let mut dn_u = Vec::with_capacity(grid.ring_points.len());
    for p in &grid.ring_points {
        let (gx, gy) = ring_gradient(grid, &lookup, &du_dx, &du_dy, [p.x, p.y])?;
        dn_u.push(gx * p.x + gy * p.y);
    }
    Ok(DerivativeBundle {
        du_dx,
        du_dy,
        d2u_dxx,
        d2u_dyy,
        dn_u,
    })
}

/// Flat node id -> index into the interior-aligned vectors.
fn interior_lookup(grid: &GridSpec) -> Vec<Option<u32>> {
    let mut lookup = vec![None; grid.n * grid.n];
    for (k, &id) in grid.interior_ids.iter().enumerate() {
        lookup[id] = Some(k as u32);
    }
    lookup
}

/// Gradient at a rim point: walk inward along the radius to the first grid
/// cell whose four corners are all interior, then evaluate that cell's
/// bilinear form at the rim point itself (extension, exact on linears).
fn ring_gradient(
    grid: &GridSpec,
    lookup: &[Option<u32>],
    du_dx: &[f64],
    du_dy: &[f64],
    p: [f64; 2],
) -> Result<(f64, f64)> {
    let n = grid.n;
    let h = grid.h;
    for step in 1..n {
        let scale = 1.0 - step as f64 * h;
        if scale <= 0.0 {
            break;
        }
        let q = [p[0] * scale, p[1] * scale];
        let fi = (q[0] + 1.0) / h;
        let fj = (q[1] + 1.0) / h;
        let (i0, j0) = (fi.floor() as isize, fj.floor() as isize);
        if i0 < 0 || j0 < 0 || i0 + 1 >= n as isize || j0 + 1 >= n as isize {
            continue;
        }
        let (i0, j0) = (i0 as usize, j0 as usize);
        let corner = |di: usize, dj: usize| lookup[(i0 + di) * n + (j0 + dj)];
        let (Some(c00), Some(c10), Some(c01), Some(c11)) =
            (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1))
        else {
            continue;
        };
        // Bilinear weights at the rim point relative to this cell; the point
        // lies outside the cell, so s and t exceed [0, 1] — the bilinear
        // form extends linearly, which is what makes linear fields exact.
        let s = (p[0] - grid.coord(i0)) / h;
        let t = (p[1] - grid.coord(j0)) / h;
        let blend = |f: &[f64]| -> f64 {
            let (f00, f10, f01, f11) = (
                f[c00 as usize],
                f[c10 as usize],
                f[c01 as usize],
                f[c11 as usize],
            );
            (1.0 - s) * (1.0 - t) * f00 + s * (1.0 - t) * f10 + (1.0 - s) * t * f01 + s * t * f11
        };
        return Ok((blend(du_dx), blend(du_dy)));
    }
    Err(EitError::Geometry(format!(
        "no interior cell found inward of rim point ({}, {})",
        p[0], p[1]
    )))
}

/// Pointwise conduction residual `grad(sigma)·grad(u) + sigma·lap(u)` on the
/// interior nodes.
pub fn divergence_term(
    sigma: &[f64],
    dsigma_dx: &[f64],
    dsigma_dy: &[f64],
    bundle: &DerivativeBundle,
) -> Result<Vec<f64>> {
    let m = bundle.du_dx.len();
    if sigma.len() != m || dsigma_dx.len() != m || dsigma_dy.len() != m {
        return Err(EitError::InvalidArgument(format!(
            "field lengths {}/{}/{} do not match bundle length {m}",
            sigma.len(),
            dsigma_dx.len(),
            dsigma_dy.len()
        )));
    }
    Ok((0..m)
        .map(|k| {
            dsigma_dx[k] * bundle.du_dx[k]
                + dsigma_dy[k] * bundle.du_dy[k]
                + sigma[k] * (bundle.d2u_dxx[k] + bundle.d2u_dyy[k])
        })
        .collect())
}
