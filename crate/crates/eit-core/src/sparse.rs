//! Symmetric sparse matrices and a conjugate-gradient solver.
//!
//! The finite-element systems assembled here are symmetric positive
//! semidefinite with a known one-dimensional nullspace (constant shift of the
//! potential). The solver deflates that direction explicitly instead of
//! pinning a node, which preserves symmetry and keeps solutions exactly
//! mean-free in the chosen gauge.

use crate::error::{EitError, Result};

/// Compressed sparse row matrix built from (row, col, value) triplets.
#[derive(Debug, Clone)]
pub struct SparseCsr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

/// Accumulates stiffness contributions before compression.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(n: usize) -> Self {
        TripletBuilder {
            n,
            entries: Vec::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        if val != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    /// Compress to CSR, summing duplicate coordinates.
    pub fn build(mut self) -> SparseCsr {
        self.entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        let mut it = self.entries.into_iter().peekable();
        for row in 0..self.n {
            while let Some(&(r, c, _)) = it.peek() {
                if r != row {
                    break;
                }
                let mut sum = 0.0;
                while let Some(&(r2, c2, v2)) = it.peek() {
                    if r2 == row && c2 == c {
                        sum += v2;
                        it.next();
                    } else {
                        break;
                    }
                }
                col_idx.push(c);
                vals.push(sum);
            }
            row_ptr[row + 1] = col_idx.len();
        }
        SparseCsr {
            n: self.n,
            row_ptr,
            col_idx,
            vals,
        }
    }
}

impl SparseCsr {
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for row in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            out[row] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for row in 0..self.n {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                if self.col_idx[k] == row {
                    d[row] = self.vals[k];
                }
            }
        }
        d
    }

    /// Largest relative asymmetry |a_ij - a_ji| / max|a|; zero for exactly
    /// symmetric assembly.
    pub fn asymmetry(&self) -> f64 {
        let mut max_abs = 0.0f64;
        for &v in &self.vals {
            max_abs = max_abs.max(v.abs());
        }
        if max_abs == 0.0 {
            return 0.0;
        }
        let get = |r: usize, c: usize| -> f64 {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == c {
                    return self.vals[k];
                }
            }
            0.0
        };
        let mut worst = 0.0f64;
        for row in 0..self.n {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                let col = self.col_idx[k];
                worst = worst.max((self.vals[k] - get(col, row)).abs());
            }
        }
        worst / max_abs
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite banded
/// matrix. Row `i` stores entries for columns `i-bandwidth ..= i`.
///
/// The mesh numbers nodes ring by ring, so stiffness matrices have a band
/// proportional to the outer ring size; a banded direct factorization is then
/// both fast and deterministic to machine precision, which the measurement
/// reciprocity bounds rely on.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    /// Row-major, `n x (bandwidth + 1)`; entry `(i, b)` holds column
    /// `i - bandwidth + b`.
    data: Vec<f64>,
}

impl BandedCholesky {
    /// Factor `a`, which must be symmetric positive definite.
    pub fn factor(a: &SparseCsr) -> Result<BandedCholesky> {
        let n = a.n;
        let mut bandwidth = 0usize;
        for row in 0..n {
            for k in a.row_ptr[row]..a.row_ptr[row + 1] {
                let col = a.col_idx[k];
                bandwidth = bandwidth.max(row.abs_diff(col));
            }
        }
        let w = bandwidth + 1;
        let mut data = vec![0.0f64; n * w];
        for row in 0..n {
            for k in a.row_ptr[row]..a.row_ptr[row + 1] {
                let col = a.col_idx[k];
                if col <= row {
                    data[row * w + (bandwidth - (row - col))] = a.vals[k];
                }
            }
        }
        // In-place banded Cholesky: L[i][j] over j in [i-bandwidth, i].
        for i in 0..n {
            let j_min = i.saturating_sub(bandwidth);
            for j in j_min..i {
                let mut sum = data[i * w + (bandwidth - (i - j))];
                let k_min = j_min.max(j.saturating_sub(bandwidth));
                for k in k_min..j {
                    sum -= data[i * w + (bandwidth - (i - k))] * data[j * w + (bandwidth - (j - k))];
                }
                data[i * w + (bandwidth - (i - j))] = sum / data[j * w + bandwidth];
            }
            let mut diag = data[i * w + bandwidth];
            for k in j_min..i {
                let l = data[i * w + (bandwidth - (i - k))];
                diag -= l * l;
            }
            if diag <= 0.0 {
                return Err(EitError::Solver(format!(
                    "matrix is not positive definite: pivot {diag:e} at row {i}"
                )));
            }
            data[i * w + bandwidth] = diag.sqrt();
        }
        Ok(BandedCholesky { n, bandwidth, data })
    }

    /// Solve `L L' x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bandwidth, self.bandwidth + 1);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut sum = x[i];
            for k in i.saturating_sub(bw)..i {
                sum -= self.data[i * w + (bw - (i - k))] * x[k];
            }
            x[i] = sum / self.data[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for k in i + 1..(i + bw + 1).min(n) {
                sum -= self.data[k * w + (bw - (k - i))] * x[k];
            }
            x[i] = sum / self.data[i * w + bw];
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Remove the component of `v` along the (normalized) deflation direction.
fn project_out(v: &mut [f64], dir: &[f64]) {
    let c = dot(v, dir);
    for (x, d) in v.iter_mut().zip(dir) {
        *x -= c * d;
    }
}

/// Solve `a x = b` by preconditioned conjugate gradients.
///
/// `nullspace`, when given, is a basis vector of the matrix nullspace; the
/// right-hand side and every iterate are kept orthogonal to it, which makes
/// the singular-but-consistent systems from pure Neumann problems well posed.
/// Converges when the residual drops below `tol * max(||b||, tiny)`.
pub fn cg_solve(
    a: &SparseCsr,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    nullspace: Option<&[f64]>,
) -> Result<(Vec<f64>, usize)> {
    let n = a.n;
    if b.len() != n {
        return Err(EitError::InvalidArgument(format!(
            "rhs length {} does not match matrix size {n}",
            b.len()
        )));
    }
    let dir = nullspace.map(|v| {
        let norm = dot(v, v).sqrt();
        v.iter().map(|x| x / norm).collect::<Vec<f64>>()
    });

    let orig_norm = dot(b, b).sqrt();
    let mut rhs = b.to_vec();
    if let Some(d) = &dir {
        project_out(&mut rhs, d);
    }
    let b_norm = dot(&rhs, &rhs).sqrt();
    // A right-hand side that lies (numerically) in the nullspace has the
    // zero solution; iterating on the projection residue would divide by ~0.
    if b_norm <= 1e-14 * orig_norm || b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let target = tol * b_norm;

    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = rhs;
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    if let Some(d) = &dir {
        project_out(&mut z, d);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for it in 0..max_iter {
        let r_norm = dot(&r, &r).sqrt();
        if r_norm <= target {
            return Ok((x, it));
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(EitError::Solver(format!(
                "conjugate gradients broke down at iteration {it}: p'Ap = {pap:e}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if let Some(d) = &dir {
            project_out(&mut z, d);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let r_norm = dot(&r, &r).sqrt();
    if r_norm <= target {
        return Ok((x, max_iter));
    }
    Err(EitError::Solver(format!(
        "conjugate gradients did not reach tolerance {tol:e} in {max_iter} iterations \
         (residual {:.3e} of {:.3e})",
        r_norm, b_norm
    )))
}
