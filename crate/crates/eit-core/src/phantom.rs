//! Random conductivity scenes: inclusions on a unit background.

use std::f64::consts::PI;

use crate::error::{EitError, Result};
use crate::geometry::{GridSpec, TriMesh};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometric support of one inclusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    /// Counterclockwise vertices.
    Triangle {
        vertices: [[f64; 2]; 3],
    },
}

impl Shape {
    /// Center and radius of a circumscribing circle, for conservative
    /// overlap and margin checks.
    pub fn bounding(&self) -> ([f64; 2], f64) {
        match self {
            Shape::Circle { center, radius } => (*center, *radius),
            Shape::Triangle { vertices } => {
                let cx = (vertices[0][0] + vertices[1][0] + vertices[2][0]) / 3.0;
                let cy = (vertices[0][1] + vertices[1][1] + vertices[2][1]) / 3.0;
                let r = vertices
                    .iter()
                    .map(|v| ((v[0] - cx).powi(2) + (v[1] - cy).powi(2)).sqrt())
                    .fold(0.0f64, f64::max);
                ([cx, cy], r)
            }
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape::Circle { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy <= radius * radius
            }
            Shape::Triangle { vertices } => {
                // Half-plane test against each CCW edge, boundary inclusive.
                for e in 0..3 {
                    let a = vertices[e];
                    let b = vertices[(e + 1) % 3];
                    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Shape,
    /// Conductivity relative to the unit background.
    pub value: f64,
}

/// Scene category, fixed by the number and kind of inclusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OneCircle,
    TwoCircles,
    CircleTriangle,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::OneCircle, Family::TwoCircles, Family::CircleTriangle];

    pub fn tag(&self) -> &'static str {
        match self {
            Family::OneCircle => "one_circle",
            Family::TwoCircles => "two_circles",
            Family::CircleTriangle => "circle_triangle",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = EitError;
    fn from_str(s: &str) -> Result<Family> {
        match s {
            "one_circle" => Ok(Family::OneCircle),
            "two_circles" => Ok(Family::TwoCircles),
            "circle_triangle" => Ok(Family::CircleTriangle),
            other => Err(EitError::InvalidArgument(format!(
                "unknown phantom family '{other}' (expected one_circle, two_circles, or circle_triangle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub family: Family,
    pub inclusions: Vec<Inclusion>,
    /// Always 1; kept explicit because downstream losses assume it.
    pub background: f64,
}

/// Sampling bounds for random phantoms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomLimits {
    /// Circle radius / triangle circumradius range.
    pub radius_range: (f64, f64),
    /// Inclusion conductivity range.
    pub value_range: (f64, f64),
    /// Inclusions must fit inside this radius.
    pub max_extent: f64,
    /// Minimum clearance between bounding circles.
    pub separation: f64,
}

impl Default for PhantomLimits {
    fn default() -> Self {
        PhantomLimits {
            radius_range: (0.15, 0.35),
            value_range: (2.0, 6.0),
            max_extent: 0.9,
            separation: 0.02,
        }
    }
}

const MAX_REJECTIONS: usize = 1000;

fn sample_circle(rng: &mut ChaCha8Rng, limits: &PhantomLimits) -> Shape {
    let radius = rng.gen_range(limits.radius_range.0..=limits.radius_range.1);
    let r_max = (limits.max_extent - radius).max(0.0);
    let rho = r_max * rng.gen_range(0.0..=1.0f64).sqrt();
    let theta = rng.gen_range(0.0..2.0 * PI);
    Shape::Circle {
        center: [rho * theta.cos(), rho * theta.sin()],
        radius,
    }
}

fn sample_triangle(rng: &mut ChaCha8Rng, limits: &PhantomLimits) -> Shape {
    let circumradius = rng.gen_range(limits.radius_range.0..=limits.radius_range.1);
    let r_max = (limits.max_extent - circumradius).max(0.0);
    let rho = r_max * rng.gen_range(0.0..=1.0f64).sqrt();
    let theta = rng.gen_range(0.0..2.0 * PI);
    let rot = rng.gen_range(0.0..2.0 * PI);
    let c = [rho * theta.cos(), rho * theta.sin()];
    let mut vertices = [[0.0; 2]; 3];
    for (k, v) in vertices.iter_mut().enumerate() {
        let a = rot + 2.0 * PI * k as f64 / 3.0;
        *v = [c[0] + circumradius * a.cos(), c[1] + circumradius * a.sin()];
    }
    Shape::Triangle { vertices }
}

fn clear_of(existing: &[Inclusion], candidate: &Shape, separation: f64) -> bool {
    let (c, r) = candidate.bounding();
    existing.iter().all(|inc| {
        let (c2, r2) = inc.shape.bounding();
        let d = ((c[0] - c2[0]).powi(2) + (c[1] - c2[1]).powi(2)).sqrt();
        d >= r + r2 + separation
    })
}

/// Draw a random phantom of the given family. Deterministic in `seed`.
pub fn sample_phantom(seed: u64, family: Family, limits: &PhantomLimits) -> Result<Phantom> {
    if limits.radius_range.0 <= 0.0 || limits.radius_range.1 < limits.radius_range.0 {
        return Err(EitError::InvalidArgument(format!(
            "bad radius range {:?}",
            limits.radius_range
        )));
    }
    if limits.radius_range.1 >= limits.max_extent {
        return Err(EitError::InvalidArgument(format!(
            "radius range {:?} cannot fit inside extent {}",
            limits.radius_range, limits.max_extent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: &[fn(&mut ChaCha8Rng, &PhantomLimits) -> Shape] = match family {
        Family::OneCircle => &[sample_circle],
        Family::TwoCircles => &[sample_circle, sample_circle],
        Family::CircleTriangle => &[sample_circle, sample_triangle],
    };
    let mut inclusions: Vec<Inclusion> = Vec::with_capacity(plan.len());
    let mut rejections = 0usize;
    for sampler in plan {
        loop {
            let shape = sampler(&mut rng, limits);
            if clear_of(&inclusions, &shape, limits.separation) {
                let value = rng.gen_range(limits.value_range.0..=limits.value_range.1);
                inclusions.push(Inclusion { shape, value });
                break;
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(EitError::InvalidArgument(format!(
                    "phantom sampling for {} gave up after {MAX_REJECTIONS} rejections; \
                     limits leave no room for non-overlapping inclusions",
                    family.tag()
                )));
            }
        }
    }
    Ok(Phantom {
        family,
        inclusions,
        background: 1.0,
    })
}

/// Conductivity at a point: first containing inclusion's value, else 1.
pub fn sigma_at(phantom: &Phantom, p: [f64; 2]) -> f64 {
    for inc in &phantom.inclusions {
        if inc.shape.contains(p) {
            return inc.value;
        }
    }
    phantom.background
}

/// Nodewise conductivity on the reconstruction grid. Nodes outside the disk
/// mask carry the background value.
pub fn rasterize(phantom: &Phantom, grid: &GridSpec) -> Array2<f64> {
    let n = grid.n;
    let mut field = Array2::from_elem((n, n), phantom.background);
    for i in 0..n {
        for j in 0..n {
            if grid.mask[i * n + j] {
                field[[i, j]] = sigma_at(phantom, [grid.coord(i), grid.coord(j)]);
            }
        }
    }
    field
}

/// Nodewise conductivity on a triangular mesh.
pub fn sigma_on_mesh(phantom: &Phantom, mesh: &TriMesh) -> Vec<f64> {
    mesh.nodes.iter().map(|&[x, y]| sigma_at(phantom, [x, y])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;

    fn limits() -> PhantomLimits {
        PhantomLimits::default()
    }

    #[test]
    fn one_circle_family_shape_and_value() {
        for seed in 0..20 {
            let p = sample_phantom(seed, Family::OneCircle, &limits()).unwrap();
            assert_eq!(p.inclusions.len(), 1);
            assert!(matches!(p.inclusions[0].shape, Shape::Circle { .. }));
            let v = p.inclusions[0].value;
            assert!((2.0..=6.0).contains(&v), "value {v}");
            assert_eq!(p.background, 1.0);
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        for family in Family::ALL {
            let a = sample_phantom(7, family, &limits()).unwrap();
            let b = sample_phantom(7, family, &limits()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_circles_never_overlap() {
        for seed in 0..200 {
            let p = sample_phantom(seed, Family::TwoCircles, &limits()).unwrap();
            let (c1, r1) = p.inclusions[0].shape.bounding();
            let (c2, r2) = p.inclusions[1].shape.bounding();
            let d = ((c1[0] - c2[0]).powi(2) + (c1[1] - c2[1]).powi(2)).sqrt();
            assert!(d >= r1 + r2, "seed {seed}: distance {d} < {}", r1 + r2);
        }
    }

    #[test]
    fn inclusions_stay_inside_margin() {
        for family in Family::ALL {
            for seed in 0..50 {
                let p = sample_phantom(seed, family, &limits()).unwrap();
                for inc in &p.inclusions {
                    let (c, r) = inc.shape.bounding();
                    let extent = (c[0] * c[0] + c[1] * c[1]).sqrt() + r;
                    assert!(extent <= 0.9 + 1e-12, "extent {extent}");
                }
            }
        }
    }

    #[test]
    fn infeasible_limits_reported() {
        let l = PhantomLimits {
            radius_range: (0.44, 0.44),
            ..limits()
        };
        let err = sample_phantom(0, Family::TwoCircles, &l).unwrap_err();
        assert!(matches!(err, EitError::InvalidArgument(_)));
    }

    #[test]
    fn sigma_background_and_center() {
        let empty = Phantom {
            family: Family::OneCircle,
            inclusions: vec![],
            background: 1.0,
        };
        assert_eq!(sigma_at(&empty, [0.3, -0.2]), 1.0);

        let p = Phantom {
            family: Family::OneCircle,
            inclusions: vec![Inclusion {
                shape: Shape::Circle {
                    center: [0.0, 0.0],
                    radius: 0.3,
                },
                value: 4.0,
            }],
            background: 1.0,
        };
        assert_eq!(sigma_at(&p, [0.0, 0.0]), 4.0);
        assert_eq!(sigma_at(&p, [0.31, 0.0]), 1.0);
    }

    #[test]
    fn sigma_triangle_half_plane() {
        // Independent containment oracle: signed distances to the three
        // supporting lines of a CCW triangle are all nonnegative inside.
        let verts = [[0.0, 0.0], [0.4, 0.0], [0.0, 0.4]];
        let p = Phantom {
            family: Family::CircleTriangle,
            inclusions: vec![Inclusion {
                shape: Shape::Triangle { vertices: verts },
                value: 3.0,
            }],
            background: 1.0,
        };
        let inside = |q: [f64; 2]| -> bool {
            (0..3).all(|e| {
                let a = verts[e];
                let b = verts[(e + 1) % 3];
                (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0.0
            })
        };
        for q in [[0.1, 0.1], [0.39, 0.0], [0.2, 0.21], [0.5, 0.5], [-0.01, 0.1]] {
            let expect = if inside(q) { 3.0 } else { 1.0 };
            assert_eq!(sigma_at(&p, q), expect, "point {q:?}");
        }
        assert_eq!(sigma_at(&p, [0.1, 0.1]), 3.0);
    }

    #[test]
    fn rasterize_empty_is_all_ones() {
        let grid = build_grid(32).unwrap();
        let empty = Phantom {
            family: Family::OneCircle,
            inclusions: vec![],
            background: 1.0,
        };
        let f = rasterize(&empty, &grid);
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rasterize_area_fraction_matches_circle() {
        let grid = build_grid(64).unwrap();
        let p = Phantom {
            family: Family::OneCircle,
            inclusions: vec![Inclusion {
                shape: Shape::Circle {
                    center: [0.0, 0.0],
                    radius: 0.3,
                },
                value: 4.0,
            }],
            background: 1.0,
        };
        let f = rasterize(&p, &grid);
        let mut masked = 0usize;
        let mut inside = 0usize;
        for i in 0..64 {
            for j in 0..64 {
                if grid.mask[i * 64 + j] {
                    masked += 1;
                    if f[[i, j]] > 1.0 {
                        inside += 1;
                    }
                }
            }
        }
        let frac = inside as f64 / masked as f64;
        assert!((frac / 0.09 - 1.0).abs() < 0.10, "fraction {frac}");
    }

    #[test]
    fn rasterize_agrees_with_pointwise() {
        let grid = build_grid(48).unwrap();
        let p = sample_phantom(3, Family::CircleTriangle, &limits()).unwrap();
        let f = rasterize(&p, &grid);
        for i in 0..48 {
            for j in 0..48 {
                if grid.mask[i * 48 + j] {
                    assert_eq!(f[[i, j]], sigma_at(&p, [grid.coord(i), grid.coord(j)]));
                }
            }
        }
    }

    #[test]
    fn sampled_sigma_never_below_background() {
        let grid = build_grid(32).unwrap();
        for family in Family::ALL {
            for seed in 0..30 {
                let p = sample_phantom(seed, family, &limits()).unwrap();
                for i in 0..32 {
                    for j in 0..32 {
                        assert!(sigma_at(&p, [grid.coord(i), grid.coord(j)]) >= 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn centered_circle_rasterization_rotates_onto_itself() {
        let grid = build_grid(64).unwrap();
        let p = Phantom {
            family: Family::OneCircle,
            inclusions: vec![Inclusion {
                shape: Shape::Circle {
                    center: [0.0, 0.0],
                    radius: 0.37,
                },
                value: 2.5,
            }],
            background: 1.0,
        };
        let f = rasterize(&p, &grid);
        let n = 64;
        // Quarter-turn (x,y) -> (-y,x) maps index (i,j) to (n-1-j, i).
        for i in 0..n {
            for j in 0..n {
                assert_eq!(f[[i, j]], f[[n - 1 - j, i]]);
            }
        }
    }

    #[test]
    fn phantom_json_round_trip() {
        let p = sample_phantom(11, Family::CircleTriangle, &limits()).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: Phantom = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }
}
