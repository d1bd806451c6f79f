//! Forward solves for the conduction equation on the unit disk.
//!
//! Two flavors: a continuum Neumann solve under a smooth trigonometric
//! boundary current (used for ground-truth internal potentials), and a
//! complete electrode model with contact impedances under pair drives (used
//! for the boundary voltage measurements). Linear triangular elements, with
//! a banded direct factorization so repeated solves are deterministic and
//! accurate to near machine precision.

use std::f64::consts::PI;

use crate::error::{EitError, Result};
use crate::geometry::{ElectrodeLayout, GridSpec, PotentialField, TriMesh};
use crate::sparse::{BandedCholesky, SparseCsr, TripletBuilder};

/// Boundary excitation: a smooth current density around the rim, or a unit
/// current pushed between one electrode pair.
#[derive(Debug, Clone, PartialEq)]
pub enum CurrentPattern {
    Trig {
        amplitude: f64,
        /// Full periods around the boundary.
        cycles: f64,
        phase: f64,
    },
    PairDrive {
        source: usize,
        sink: usize,
        current: f64,
    },
}

impl CurrentPattern {
    /// The default smooth pattern: one cycle of `sin` at amplitude
    /// `1/sqrt(2*pi)`.
    pub fn trig_default() -> Self {
        CurrentPattern::Trig {
            amplitude: 1.0 / (2.0 * PI).sqrt(),
            cycles: 1.0,
            phase: 0.0,
        }
    }

    pub fn pair(source: usize, sink: usize) -> Self {
        CurrentPattern::PairDrive {
            source,
            sink,
            current: 1.0,
        }
    }

    /// Current density at boundary angle `theta` (trig patterns only).
    pub fn boundary_value(&self, theta: f64) -> f64 {
        match self {
            CurrentPattern::Trig {
                amplitude,
                cycles,
                phase,
            } => amplitude * (cycles * theta + phase).sin(),
            CurrentPattern::PairDrive { .. } => {
                panic!("pair drives have no pointwise boundary density")
            }
        }
    }
}

/// Which mean-zero constraint fixed the additive constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    NodalMeanZero,
    ElectrodeMeanZero,
}

#[derive(Debug, Clone)]
pub struct FemSolution {
    /// Potential per mesh node.
    pub u: Vec<f64>,
    /// Electrode potentials (electrode-model solves only).
    pub electrode_u: Option<Vec<f64>>,
    pub gauge: Gauge,
}

/// Boundary voltage sweep: drives step around the ring, and for each drive
/// the 13 adjacent electrode-pair voltages away from the drive are recorded.
#[derive(Debug, Clone)]
pub struct MeasurementFrame {
    pub values: Vec<f64>,
}

impl MeasurementFrame {
    pub const PROTOCOL: &'static str = "adjacent_drive_adjacent_measure";

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Measurement count for a given electrode count: each drive pair excludes
/// itself and its two overlapping pairs.
pub fn frame_len(electrodes: usize) -> usize {
    electrodes * (electrodes - 3)
}

// --- assembly ---------------------------------------------------------------

fn validate_sigma(mesh: &TriMesh, sigma: &[f64]) -> Result<()> {
    if sigma.len() != mesh.node_count() {
        return Err(EitError::InvalidArgument(format!(
            "conductivity has {} entries but mesh has {} nodes",
            sigma.len(),
            mesh.node_count()
        )));
    }
    if let Some(bad) = sigma.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(EitError::InvalidArgument(format!(
            "conductivity must be finite and positive, found {bad}"
        )));
    }
    Ok(())
}

/// Per-element conductivity: mean of the three nodal values, which is the
/// exact element average when the nodal field is linear on the element.
#[inline]
fn element_sigma(sigma: &[f64], tri: &[usize; 3]) -> f64 {
    (sigma[tri[0]] + sigma[tri[1]] + sigma[tri[2]]) / 3.0
}

/// Add the conduction stiffness of every element to `t`.
fn assemble_stiffness(mesh: &TriMesh, sigma: &[f64], t: &mut TripletBuilder) {
    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
        let two_area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let area = 0.5 * two_area;
        // Gradient of the hat function at node i: perpendicular of the
        // opposite edge over twice the area.
        let bx = [pb[1] - pc[1], pc[1] - pa[1], pa[1] - pb[1]];
        let by = [pc[0] - pb[0], pa[0] - pc[0], pb[0] - pa[0]];
        let s = element_sigma(sigma, tri);
        let scale = s / (4.0 * area);
        let ids = [a, b, c];
        for i in 0..3 {
            for j in 0..3 {
                t.add(ids[i], ids[j], scale * (bx[i] * bx[j] + by[i] * by[j]));
            }
        }
    }
}

/// Boundary load vector for a smooth pattern: hat functions are linear in
/// angle along each rim edge, integrated with two-point Gauss quadrature.
fn trig_load(mesh: &TriMesh, pattern: &CurrentPattern) -> Vec<f64> {
    let mut rhs = vec![0.0; mesh.node_count()];
    let gauss = 1.0 / 3.0f64.sqrt();
    for e in &mesh.boundary_edges {
        let [ta, tb] = e.angles;
        let half = 0.5 * (tb - ta);
        let mid = 0.5 * (ta + tb);
        for gp in [-gauss, gauss] {
            let theta = mid + half * gp;
            let g = pattern.boundary_value(theta);
            let w = half; // quadrature weight times arc length element
            let lam = (tb - theta) / (tb - ta);
            rhs[e.nodes[0]] += w * g * lam;
            rhs[e.nodes[1]] += w * g * (1.0 - lam);
        }
    }
    rhs
}

// --- continuum solve --------------------------------------------------------

/// Solve the conduction equation with a smooth boundary current density and
/// mean-zero nodal gauge.
pub fn solve_continuum(
    mesh: &TriMesh,
    sigma: &[f64],
    pattern: &CurrentPattern,
) -> Result<FemSolution> {
    validate_sigma(mesh, sigma)?;
    if !matches!(pattern, CurrentPattern::Trig { .. }) {
        return Err(EitError::InvalidArgument(
            "continuum solves take a smooth boundary pattern, not an electrode drive".into(),
        ));
    }
    let n = mesh.node_count();
    let rhs = trig_load(mesh, pattern);
    let total: f64 = rhs.iter().sum();
    let scale: f64 = rhs.iter().map(|v| v.abs()).sum();
    if total.abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(EitError::InvalidArgument(format!(
            "boundary pattern is incompatible: net injected current {total:e}"
        )));
    }

    let mut t = TripletBuilder::new(n);
    assemble_stiffness(mesh, sigma, &mut t);
    let k = t.build();

    // The pure-Neumann matrix is singular along constants; ground the last
    // node, solve the reduced SPD system, then shift to the mean-zero gauge.
    let reduced = drop_last_row_col(&k);
    let factor = BandedCholesky::factor(&reduced)?;
    let mut u = factor.solve(&rhs[..n - 1]);
    u.push(0.0);
    let mean = u.iter().sum::<f64>() / n as f64;
    for v in &mut u {
        *v -= mean;
    }
    Ok(FemSolution {
        u,
        electrode_u: None,
        gauge: Gauge::NodalMeanZero,
    })
}

fn drop_last_row_col(a: &SparseCsr) -> SparseCsr {
    let n = a.n - 1;
    let mut t = TripletBuilder::new(n);
    for row in 0..n {
        for k in a.row_ptr[row]..a.row_ptr[row + 1] {
            let col = a.col_idx[k];
            if col < n {
                t.add(row, col, a.vals[k]);
            }
        }
    }
    t.build()
}

// --- electrode-model solve --------------------------------------------------

/// Factored electrode-model system for one conductivity: the node block is
/// eliminated once, leaving a dense electrode-level system each drive reuses.
pub struct CemSystem {
    electrodes: usize,
    /// Node-electrode coupling, column-major `n x electrodes`.
    coupling: Vec<f64>,
    /// Cholesky factor of the (regularized) electrode Schur complement.
    schur_chol: Vec<f64>,
    /// `factor^{-1} * coupling`, column-major.
    lifted: Vec<f64>,
    n: usize,
}

impl CemSystem {
    pub fn assemble(mesh: &TriMesh, sigma: &[f64], layout: &ElectrodeLayout) -> Result<CemSystem> {
        validate_sigma(mesh, sigma)?;
        if let Some(z) = layout.contact_impedance.iter().find(|z| **z <= 0.0) {
            return Err(EitError::InvalidArgument(format!(
                "contact impedance must be positive, got {z}"
            )));
        }
        let n = mesh.node_count();
        let l_count = layout.count;

        let mut t = TripletBuilder::new(n);
        assemble_stiffness(mesh, sigma, &mut t);
        let mut coupling = vec![0.0f64; n * l_count];
        let mut arc_over_z = vec![0.0f64; l_count];
        for e in &mesh.boundary_edges {
            let Some(l) = e.electrode else { continue };
            let z = layout.contact_impedance[l];
            let len = e.angles[1] - e.angles[0];
            let (a, b) = (e.nodes[0], e.nodes[1]);
            // Contact term: (1/z) * integral over the arc of (u - U_l)^2.
            t.add(a, a, len / (3.0 * z));
            t.add(b, b, len / (3.0 * z));
            t.add(a, b, len / (6.0 * z));
            t.add(b, a, len / (6.0 * z));
            coupling[l * n + a] -= len / (2.0 * z);
            coupling[l * n + b] -= len / (2.0 * z);
            arc_over_z[l] += len / z;
        }
        let a_uu = t.build();
        let factor = BandedCholesky::factor(&a_uu)?;

        // Eliminate the node block: lifted = A_uu^{-1} A_uU.
        let mut lifted = vec![0.0f64; n * l_count];
        for l in 0..l_count {
            let col = factor.solve(&coupling[l * n..(l + 1) * n]);
            lifted[l * n..(l + 1) * n].copy_from_slice(&col);
        }

        // Electrode Schur complement S = A_UU - A_Uu A_uu^{-1} A_uU. Its
        // nullspace is the constant shift; adding the rank-one ones matrix
        // makes it definite while leaving zero-sum solutions untouched.
        let mut schur = vec![0.0f64; l_count * l_count];
        for l in 0..l_count {
            for m in 0..l_count {
                let mut v = if l == m { arc_over_z[l] } else { 0.0 };
                for i in 0..n {
                    v -= coupling[l * n + i] * lifted[m * n + i];
                }
                schur[l * l_count + m] = v + 1.0 / l_count as f64;
            }
        }
        let schur_chol = dense_cholesky(&schur, l_count)?;
        Ok(CemSystem {
            electrodes: l_count,
            coupling,
            schur_chol,
            lifted,
            n,
        })
    }

    /// Electrode potentials for given net electrode currents (zero-sum).
    pub fn electrode_potentials(&self, currents: &[f64]) -> Result<Vec<f64>> {
        if currents.len() != self.electrodes {
            return Err(EitError::InvalidArgument(format!(
                "expected {} electrode currents, got {}",
                self.electrodes,
                currents.len()
            )));
        }
        let total: f64 = currents.iter().sum();
        let scale: f64 = currents.iter().map(|v| v.abs()).sum();
        if total.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(EitError::InvalidArgument(format!(
                "electrode currents must sum to zero, got {total:e}"
            )));
        }
        Ok(dense_cholesky_solve(
            &self.schur_chol,
            self.electrodes,
            currents,
        ))
    }

    /// Full solution (nodal + electrode potentials) for one drive.
    pub fn solve(&self, currents: &[f64]) -> Result<FemSolution> {
        let eu = self.electrode_potentials(currents)?;
        let mut u = vec![0.0f64; self.n];
        for l in 0..self.electrodes {
            let ul = eu[l];
            if ul != 0.0 {
                for i in 0..self.n {
                    u[i] -= self.lifted[l * self.n + i] * ul;
                }
            }
        }
        Ok(FemSolution {
            u,
            electrode_u: Some(eu),
            gauge: Gauge::ElectrodeMeanZero,
        })
    }

    /// Residual of the full block system for a solution, relative to the
    /// drive scale; used by tests to confirm the elimination is faithful.
    pub fn residual(&self, mesh: &TriMesh, sigma: &[f64], layout: &ElectrodeLayout,
                    sol: &FemSolution, currents: &[f64]) -> f64 {
        let n = self.n;
        let mut t = TripletBuilder::new(n);
        assemble_stiffness(mesh, sigma, &mut t);
        for e in &mesh.boundary_edges {
            let Some(l) = e.electrode else { continue };
            let z = layout.contact_impedance[l];
            let len = e.angles[1] - e.angles[0];
            let (a, b) = (e.nodes[0], e.nodes[1]);
            t.add(a, a, len / (3.0 * z));
            t.add(b, b, len / (3.0 * z));
            t.add(a, b, len / (6.0 * z));
            t.add(b, a, len / (6.0 * z));
        }
        let a_uu = t.build();
        let eu = sol.electrode_u.as_ref().expect("electrode solution");
        let mut r = vec![0.0f64; n + self.electrodes];
        a_uu.matvec(&sol.u, &mut r[..n]);
        for l in 0..self.electrodes {
            for i in 0..n {
                r[i] += self.coupling[l * n + i] * eu[l];
            }
            let mut row = 0.0;
            for i in 0..n {
                row += self.coupling[l * n + i] * sol.u[i];
            }
            let arc_over_z: f64 = mesh
                .boundary_edges
                .iter()
                .filter(|e| e.electrode == Some(l))
                .map(|e| (e.angles[1] - e.angles[0]) / layout.contact_impedance[l])
                .sum();
            row += arc_over_z * eu[l];
            r[n + l] = row - currents[l];
        }
        let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn: f64 = currents.iter().map(|v| v * v).sum::<f64>().sqrt();
        rn / bn
    }
}

/// Solve the complete electrode model for one pair drive.
pub fn solve_cem(
    mesh: &TriMesh,
    sigma: &[f64],
    layout: &ElectrodeLayout,
    drive: &CurrentPattern,
) -> Result<FemSolution> {
    let CurrentPattern::PairDrive {
        source,
        sink,
        current,
    } = drive
    else {
        return Err(EitError::InvalidArgument(
            "electrode-model solves need a pair drive".into(),
        ));
    };
    if *source >= layout.count || *sink >= layout.count || source == sink {
        return Err(EitError::InvalidArgument(format!(
            "bad drive pair ({source}, {sink}) for {} electrodes",
            layout.count
        )));
    }
    if *current == 0.0 {
        return Err(EitError::InvalidArgument("drive current must be nonzero".into()));
    }
    let sys = CemSystem::assemble(mesh, sigma, layout)?;
    let mut currents = vec![0.0; layout.count];
    currents[*source] = *current;
    currents[*sink] = -*current;
    sys.solve(&currents)
}

/// Sweep all adjacent drive pairs and record the adjacent measurement-pair
/// voltages that do not touch the drive, drive-major, ascending pair index.
pub fn measure_protocol(
    mesh: &TriMesh,
    sigma: &[f64],
    layout: &ElectrodeLayout,
) -> Result<MeasurementFrame> {
    let sys = CemSystem::assemble(mesh, sigma, layout)?;
    let count = layout.count;
    let mut values = Vec::with_capacity(frame_len(count));
    let mut currents = vec![0.0f64; count];
    for drive in 0..count {
        let (src, snk) = (drive, (drive + 1) % count);
        currents.fill(0.0);
        currents[src] = 1.0;
        currents[snk] = -1.0;
        let eu = sys.electrode_potentials(&currents)?;
        // Measurement pairs are enumerated counterclockwise starting just
        // past the drive, so rotating the drive rotates the frame as a whole.
        for ofs in 2..count - 1 {
            let m = (drive + ofs) % count;
            values.push(eu[m] - eu[(m + 1) % count]);
        }
    }
    debug_assert_eq!(values.len(), frame_len(count));
    Ok(MeasurementFrame { values })
}

// --- dense helpers for the electrode block ----------------------------------

fn dense_cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(EitError::Solver(format!(
                        "electrode system is not positive definite (pivot {sum:e})"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn dense_cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut sum = x[i];
        for k in 0..i {
            sum -= l[i * n + k] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = x[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

// --- energy and interpolation ----------------------------------------------

/// Conduction energy of a nodal potential, summed over elements.
pub fn dissipated_energy(mesh: &TriMesh, sigma: &[f64], u: &[f64]) -> f64 {
    let mut total = 0.0;
    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let (pa, pb, pc) = (mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]);
        let two_area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let area = 0.5 * two_area;
        let bx = [pb[1] - pc[1], pc[1] - pa[1], pa[1] - pb[1]];
        let by = [pc[0] - pb[0], pa[0] - pc[0], pb[0] - pa[0]];
        let (mut gx, mut gy) = (0.0, 0.0);
        for (i, &id) in tri.iter().enumerate() {
            gx += u[id] * bx[i];
            gy += u[id] * by[i];
        }
        gx /= two_area;
        gy /= two_area;
        total += element_sigma(sigma, tri) * (gx * gx + gy * gy) * area;
    }
    total
}

/// Work done by the boundary pattern on a solution, for energy-balance checks.
pub fn boundary_work(mesh: &TriMesh, pattern: &CurrentPattern, u: &[f64]) -> f64 {
    trig_load(mesh, pattern).iter().zip(u).map(|(f, v)| f * v).sum()
}

struct TriLocator<'m> {
    mesh: &'m TriMesh,
    bins: usize,
    tri_by_bin: Vec<Vec<u32>>,
}

impl<'m> TriLocator<'m> {
    fn new(mesh: &'m TriMesh) -> Self {
        let bins = ((1.0 / mesh.target_h).ceil() as usize).clamp(8, 256);
        let mut tri_by_bin = vec![Vec::new(); bins * bins];
        let to_bin = |v: f64| -> usize {
            (((v + 1.0) / 2.0 * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
        };
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let xs = tri.map(|i| mesh.nodes[i][0]);
            let ys = tri.map(|i| mesh.nodes[i][1]);
            let (x0, x1) = (
                xs.iter().cloned().fold(f64::MAX, f64::min),
                xs.iter().cloned().fold(f64::MIN, f64::max),
            );
            let (y0, y1) = (
                ys.iter().cloned().fold(f64::MAX, f64::min),
                ys.iter().cloned().fold(f64::MIN, f64::max),
            );
            for bi in to_bin(x0)..=to_bin(x1) {
                for bj in to_bin(y0)..=to_bin(y1) {
                    tri_by_bin[bi * bins + bj].push(t as u32);
                }
            }
        }
        TriLocator {
            mesh,
            bins,
            tri_by_bin,
        }
    }

    fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.mesh.triangles[t];
        let (pa, pb, pc) = (self.mesh.nodes[a], self.mesh.nodes[b], self.mesh.nodes[c]);
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let l1 = ((p[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (p[1] - pa[1])) / det;
        let l2 = ((pb[0] - pa[0]) * (p[1] - pa[1]) - (p[0] - pa[0]) * (pb[1] - pa[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Containing triangle if any, else the least-violating triangle seen
    /// anywhere (linear extension); the bool reports containment.
    fn locate(&self, p: [f64; 2]) -> (usize, [f64; 3], bool) {
        let bins = self.bins;
        let to_bin = |v: f64| -> isize { (((v + 1.0) / 2.0 * bins as f64) as isize).clamp(0, bins as isize - 1) };
        let (bi, bj) = (to_bin(p[0]), to_bin(p[1]));
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for radius in 0..bins as isize {
            let mut any_bin = false;
            for di in -radius..=radius {
                for dj in -radius..=radius {
                    if di.abs() != radius && dj.abs() != radius {
                        continue; // only the ring at this radius
                    }
                    let (i, j) = (bi + di, bj + dj);
                    if i < 0 || j < 0 || i >= bins as isize || j >= bins as isize {
                        continue;
                    }
                    any_bin = true;
                    for &t in &self.tri_by_bin[i as usize * bins + j as usize] {
                        let lam = self.barycentric(t as usize, p);
                        let min = lam[0].min(lam[1]).min(lam[2]);
                        if min >= -1e-12 {
                            return (t as usize, lam, true);
                        }
                        if best.map_or(true, |(_, _, m)| min > m) {
                            best = Some((t as usize, lam, min));
                        }
                    }
                }
            }
            // Once something plausible is in hand, one extra ring suffices:
            // the containing triangle of a point inside the disk is never
            // farther than a bin away from a near-miss.
            if best.is_some() && radius >= 2 {
                break;
            }
            if !any_bin && radius > 0 {
                break;
            }
        }
        let (t, lam, _) = best.expect("mesh has triangles");
        (t, lam, false)
    }
}

/// Sample a nodal mesh field onto the masked grid by barycentric
/// interpolation. Grid nodes outside the mask are zero; nodes the mesh does
/// not cover (thin sliver between the polygonal rim and the true circle) get
/// the linear extension of the nearest triangle and are counted in
/// `interp_fallbacks`.
pub fn interpolate_to_grid(mesh: &TriMesh, u: &[f64], grid: &GridSpec) -> Result<PotentialField> {
    if u.len() != mesh.node_count() {
        return Err(EitError::InvalidArgument(format!(
            "field has {} entries but mesh has {} nodes",
            u.len(),
            mesh.node_count()
        )));
    }
    let locator = TriLocator::new(mesh);
    let mut field = PotentialField::zeros(grid.n);
    for i in 0..grid.n {
        for j in 0..grid.n {
            if !grid.is_masked(i, j) {
                continue;
            }
            let p = [grid.coord(i), grid.coord(j)];
            let (t, lam, contained) = locator.locate(p);
            let tri = mesh.triangles[t];
            field.values[[i, j]] =
                lam[0] * u[tri[0]] + lam[1] * u[tri[1]] + lam[2] * u[tri[2]];
            if !contained {
                field.interp_fallbacks += 1;
            }
        }
    }
    Ok(field)
}
