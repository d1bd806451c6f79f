//! Unit-disk domain: electrode layout, masked Cartesian grid, triangular mesh.
//!
//! The mesh generator is a structured disk triangulation built from one
//! mirror-symmetric sector template copied around the circle. Node placement
//! and connectivity are therefore exactly invariant under rotation by one
//! electrode pitch and under reflection across electrode axes, which keeps
//! discrete solutions symmetric to solver tolerance rather than to O(h^2).

use std::f64::consts::PI;

use crate::error::{EitError, Result};
use ndarray::Array2;

/// Evenly spaced electrode arcs on the unit circle.
#[derive(Debug, Clone)]
pub struct ElectrodeLayout {
    pub count: usize,
    /// Arc center angles, `2*pi*l/count`, strictly increasing in `[0, 2*pi)`.
    pub center_angles: Vec<f64>,
    /// Half the angular width of each arc.
    pub arc_half_width: f64,
    /// Per-electrode contact impedance, all positive.
    pub contact_impedance: Vec<f64>,
}

impl ElectrodeLayout {
    /// Arc of electrode `l` as `(start, end)` angles; `start` may be negative
    /// for the arc straddling angle zero.
    pub fn arc_of(&self, l: usize) -> (f64, f64) {
        let c = self.center_angles[l];
        (c - self.arc_half_width, c + self.arc_half_width)
    }

    /// Whether `theta` (any real angle) lies on electrode `l`'s arc.
    pub fn arc_contains(&self, l: usize, theta: f64) -> bool {
        let c = self.center_angles[l];
        let mut d = (theta - c) % (2.0 * PI);
        if d > PI {
            d -= 2.0 * PI;
        }
        if d < -PI {
            d += 2.0 * PI;
        }
        d.abs() <= self.arc_half_width + 1e-12
    }
}

/// Build a layout of `count` evenly spaced electrodes covering `coverage`
/// of the boundary, with uniform contact impedance `z`.
pub fn electrode_layout(count: usize, coverage: f64, z: f64) -> Result<ElectrodeLayout> {
    if count < 4 || count % 2 != 0 {
        return Err(EitError::InvalidArgument(format!(
            "electrode count must be even and >= 4, got {count}"
        )));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(EitError::InvalidArgument(format!(
            "coverage must lie in (0, 1), got {coverage}"
        )));
    }
    if z <= 0.0 {
        return Err(EitError::InvalidArgument(format!(
            "contact impedance must be positive, got {z}"
        )));
    }
    let center_angles = (0..count).map(|l| 2.0 * PI * l as f64 / count as f64).collect();
    Ok(ElectrodeLayout {
        count,
        center_angles,
        arc_half_width: coverage * PI / count as f64,
        contact_impedance: vec![z; count],
    })
}

/// A point on the unit circle where boundary quantities are sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingPoint {
    pub angle: f64,
    pub x: f64,
    pub y: f64,
}

/// Cartesian `n x n` grid over `[-1,1]^2` with a unit-disk mask.
///
/// `interior_ids` are the masked nodes whose full 8-neighborhood is masked,
/// so every finite-difference stencil stays inside the disk. `ring_points`
/// are `4n` uniform samples exactly on the unit circle used for boundary
/// terms.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub n: usize,
    /// Node spacing `2/(n-1)`.
    pub h: f64,
    /// Row-major over `(i, j) = (x index, y index)`: true iff inside the disk.
    pub mask: Vec<bool>,
    /// Flat ids of nodes with all 8 neighbors masked.
    pub interior_ids: Vec<usize>,
    pub ring_points: Vec<RingPoint>,
}

impl GridSpec {
    #[inline]
    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    /// Coordinate of index `k` along one axis. Exactly antisymmetric:
    /// `coord(n-1-k) == -coord(k)`.
    #[inline]
    pub fn coord(&self, k: usize) -> f64 {
        (2.0 * k as f64 - (self.n as f64 - 1.0)) / (self.n as f64 - 1.0)
    }

    #[inline]
    pub fn node_xy(&self, id: usize) -> (f64, f64) {
        (self.coord(id / self.n), self.coord(id % self.n))
    }

    #[inline]
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.mask[self.flat(i, j)]
    }

    pub fn masked_ids(&self) -> Vec<usize> {
        (0..self.n * self.n).filter(|&k| self.mask[k]).collect()
    }

    /// Coordinates of all interior nodes, in `interior_ids` order.
    pub fn interior_xy(&self) -> Vec<(f64, f64)> {
        self.interior_ids.iter().map(|&id| self.node_xy(id)).collect()
    }
}

/// Build the reconstruction grid. Ring sample count defaults to `4n`.
pub fn build_grid(n: usize) -> Result<GridSpec> {
    if n < 16 {
        return Err(EitError::InvalidArgument(format!(
            "grid resolution must be >= 16, got {n}"
        )));
    }
    let h = 2.0 / (n as f64 - 1.0);
    let coord = |k: usize| (2.0 * k as f64 - (n as f64 - 1.0)) / (n as f64 - 1.0);
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (coord(i), coord(j));
            mask[i * n + j] = x * x + y * y <= 1.0;
        }
    }
    let mut interior_ids = Vec::new();
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let all = (i - 1..=i + 1).all(|a| (j - 1..=j + 1).all(|b| mask[a * n + b]));
            if all {
                interior_ids.push(i * n + j);
            }
        }
    }
    let p = 4 * n;
    let ring_points = (0..p)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / p as f64;
            RingPoint {
                angle,
                x: angle.cos(),
                y: angle.sin(),
            }
        })
        .collect();
    Ok(GridSpec {
        n,
        h,
        mask,
        interior_ids,
        ring_points,
    })
}

/// A scalar field on the reconstruction grid.
///
/// `values` is indexed `[i, j]` matching `GridSpec` axes; entries outside the
/// mask are zero. `interp_fallbacks` counts grid nodes that fell outside
/// every mesh triangle during interpolation and were filled from the nearest
/// triangle's linear extension.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub values: Array2<f64>,
    pub interp_fallbacks: usize,
}

impl PotentialField {
    pub fn zeros(n: usize) -> Self {
        PotentialField {
            values: Array2::zeros((n, n)),
            interp_fallbacks: 0,
        }
    }

    /// Subtract the mean over masked nodes, leaving exterior entries at zero.
    pub fn regauge(&mut self, grid: &GridSpec) {
        let n = grid.n;
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            for j in 0..n {
                if grid.mask[i * n + j] {
                    sum += self.values[[i, j]];
                    cnt += 1;
                }
            }
        }
        let mean = sum / cnt as f64;
        for i in 0..n {
            for j in 0..n {
                if grid.mask[i * n + j] {
                    self.values[[i, j]] -= mean;
                } else {
                    self.values[[i, j]] = 0.0;
                }
            }
        }
    }
}

/// Directed boundary edge on the outer mesh ring.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub angles: [f64; 2],
    pub electrode: Option<usize>,
}

/// Triangular mesh of the unit disk.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub nodes: Vec<[f64; 2]>,
    /// Positively oriented, no duplicates.
    pub triangles: Vec<[usize; 3]>,
    /// Counterclockwise closed loop on the outer ring.
    pub boundary_edges: Vec<BoundaryEdge>,
    /// The `target_h` the mesh was built for.
    pub target_h: f64,
}

impl TriMesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut m = 0.0f64;
        for tri in &self.triangles {
            for e in 0..3 {
                let a = self.nodes[tri[e]];
                let b = self.nodes[tri[(e + 1) % 3]];
                m = m.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        m
    }
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Angles of one ring restricted to the half sector `[0, sector/2]`,
/// inclusive of both endpoints.
fn half_sector_angles(intervals: usize, sector: f64) -> Vec<f64> {
    (0..=intervals / 2).map(|j| sector * j as f64 / intervals as f64).collect()
}

/// Insert the electrode arc endpoint at `w` into the outer ring's half-sector
/// list, snapping the nearest uniform node onto it when they nearly coincide.
fn align_to_electrode(half: &mut Vec<f64>, w: f64) {
    let spacing = half[1] - half[0];
    let tol = 0.25 * spacing;
    if let Some(v) = half.iter_mut().find(|v| (**v - w).abs() <= tol) {
        *v = w;
        return;
    }
    match half.binary_search_by(|v| v.partial_cmp(&w).unwrap()) {
        Ok(_) => {}
        Err(pos) => half.insert(pos, w),
    }
}

/// Mirror-symmetric strip triangulation between two rings, one half sector at
/// a time. Local indices count node slots from the sector start; the second
/// half is produced by the mirror map `i -> intervals - i`.
struct SectorStrip {
    /// Triangles as (ring offset 0|1, local index) triples.
    tris: Vec<[(usize, usize); 3]>,
}

fn half_strip(inner: &[f64], outer: &[f64]) -> SectorStrip {
    let (last_i, last_j) = (inner.len() - 1, outer.len() - 1);
    let (mut i, mut j) = (0usize, 0usize);
    let mut tris = Vec::new();
    while i < last_i || j < last_j {
        let advance_inner = if i == last_i {
            false
        } else if j == last_j {
            true
        } else {
            // Advance whichever ring's next node comes first; ties go outward.
            inner[i + 1] < outer[j + 1] - 1e-15
        };
        if advance_inner {
            tris.push([(0, i), (1, j), (0, i + 1)]);
            i += 1;
        } else {
            tris.push([(0, i), (1, j + 1), (1, j)]);
            j += 1;
        }
    }
    SectorStrip { tris }
}

/// Structured, deterministic triangulation of the unit disk.
///
/// Concentric rings at radii `k/K`, each ring split into the same
/// even number of intervals per electrode sector, with the outer ring snapped
/// to the electrode arc endpoints. The whole mesh is generated from one
/// half-sector template, so it is exactly invariant under the dihedral
/// symmetries of the electrode layout.
pub fn build_trimesh(target_h: f64, layout: &ElectrodeLayout) -> Result<TriMesh> {
    if !(target_h > 0.0 && target_h < 0.2) {
        return Err(EitError::InvalidArgument(format!(
            "target_h must lie in (0, 0.2), got {target_h}"
        )));
    }
    let sectors = layout.count;
    let sector = 2.0 * PI / sectors as f64;
    let rings = (1.0 / target_h).ceil() as usize;

    // Even interval count per sector, sized so azimuthal spacing tracks the
    // radial spacing 1/rings: ideal count is sector * k, rounded to even.
    let intervals_at = |k: usize| -> usize { 2 * ((sector * k as f64 / 2.0).round() as usize).max(1) };

    // Per-ring half-sector angle lists.
    let mut halves: Vec<Vec<f64>> = Vec::with_capacity(rings + 1);
    halves.push(vec![0.0]); // ring 0: the center, placeholder
    for k in 1..=rings {
        let mut half = half_sector_angles(intervals_at(k), sector);
        if k == rings {
            let w = layout.arc_half_width;
            if w < sector / 2.0 - 1e-12 {
                align_to_electrode(&mut half, w);
            }
            // w == sector/2 means adjacent arcs meet exactly at the half-sector
            // boundary, which is already a node.
        }
        halves.push(half);
    }

    // Full-sector local angle lists: template plus its mirror image.
    // full[i] for i in 0..m, where m = 2*(half.len()-1).
    let full_list = |half: &[f64]| -> Vec<f64> {
        let h = half.len() - 1;
        let mut full = half.to_vec();
        for t in 1..=h {
            if t < h {
                full.push(sector - half[h - t]);
            }
        }
        full
    };

    // Create nodes ring by ring, sector by sector.
    let mut nodes: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let mut ring_start: Vec<usize> = vec![0; rings + 1];
    let mut ring_count: Vec<usize> = vec![1; rings + 1];
    let mut ring_angles: Vec<Vec<f64>> = vec![vec![0.0]];
    for k in 1..=rings {
        let full = full_list(&halves[k]);
        let m = full.len();
        ring_start[k] = nodes.len();
        ring_count[k] = sectors * m;
        let r = k as f64 / rings as f64;
        let mut angles = Vec::with_capacity(sectors * m);
        for s in 0..sectors {
            for a in &full {
                let theta = s as f64 * sector + a;
                angles.push(theta);
                nodes.push([r * theta.cos(), r * theta.sin()]);
            }
        }
        ring_angles.push(angles);
    }

    let node_id = |k: usize, global_local: usize| -> usize {
        if k == 0 {
            0
        } else {
            ring_start[k] + global_local % ring_count[k]
        }
    };

    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut push_tri = |nodes: &[[f64; 2]], a: usize, b: usize, c: usize| {
        if signed_area(nodes[a], nodes[b], nodes[c]) > 0.0 {
            triangles.push([a, b, c]);
        } else {
            triangles.push([a, c, b]);
        }
    };

    // Center fan.
    for t in 0..ring_count[1] {
        push_tri(&nodes, 0, node_id(1, t), node_id(1, t + 1));
    }

    // Ring-to-ring strips from the half-sector template and its mirror.
    for k in 1..rings {
        let inner_half = &halves[k];
        let outer_half = &halves[k + 1];
        let strip = half_strip(inner_half, outer_half);
        let m_in = 2 * (inner_half.len() - 1);
        let m_out = 2 * (outer_half.len() - 1);
        let mirror = |ring_off: usize, local: usize| -> usize {
            let m = if ring_off == 0 { m_in } else { m_out };
            m - local
        };
        for s in 0..sectors {
            for tri in &strip.tris {
                let ids: Vec<usize> = tri
                    .iter()
                    .map(|&(off, local)| {
                        let k_ring = k + off;
                        let m = if off == 0 { m_in } else { m_out };
                        node_id(k_ring, s * m + local)
                    })
                    .collect();
                push_tri(&nodes, ids[0], ids[1], ids[2]);
                let ids_m: Vec<usize> = tri
                    .iter()
                    .map(|&(off, local)| {
                        let k_ring = k + off;
                        let m = if off == 0 { m_in } else { m_out };
                        node_id(k_ring, s * m + mirror(off, local))
                    })
                    .collect();
                // Skip mirror duplicates of triangles that sit exactly on the
                // midline (possible only if all three nodes are fixed points).
                if ids_m != ids {
                    push_tri(&nodes, ids_m[0], ids_m[1], ids_m[2]);
                }
            }
        }
    }

    // Boundary loop and electrode tagging.
    let m_b = ring_count[rings];
    let mut boundary_edges = Vec::with_capacity(m_b);
    for t in 0..m_b {
        let a = node_id(rings, t);
        let b = node_id(rings, t + 1);
        let th_a = ring_angles[rings][t];
        let th_b = if t + 1 == m_b {
            ring_angles[rings][0] + 2.0 * PI
        } else {
            ring_angles[rings][t + 1]
        };
        let mid = 0.5 * (th_a + th_b);
        let electrode = (0..layout.count).find(|&l| layout.arc_contains(l, mid));
        boundary_edges.push(BoundaryEdge {
            nodes: [a, b],
            angles: [th_a, th_b],
            electrode,
        });
    }

    let mesh = TriMesh {
        nodes,
        triangles,
        boundary_edges,
        target_h,
    };

    let max_edge = mesh.max_edge_length();
    if max_edge > 2.0 * target_h {
        return Err(EitError::Geometry(format!(
            "meshing failed for target_h={target_h}: max edge {max_edge:.4} exceeds {:.4}",
            2.0 * target_h
        )));
    }
    for l in 0..layout.count {
        let covered = mesh
            .boundary_edges
            .iter()
            .filter(|e| e.electrode == Some(l))
            .count();
        if covered < 2 {
            return Err(EitError::Geometry(format!(
                "meshing failed for target_h={target_h}: electrode {l} covered by {covered} edges"
            )));
        }
    }
    Ok(mesh)
}
