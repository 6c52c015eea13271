use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::geometry::Vec3;

const MIN_SIZE: f64 = 0.02;
const MAX_SIZE: f64 = 0.20;
pub const MIN_MODEL_POINTS: usize = 100;

/// Spacing of the dense sample used by the renderer, meters.
pub const RENDER_SPACING: f64 = 0.0015;

/// Parametric solid. All sizes in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Full edge lengths along x, y, z.
    Box { x: f64, y: f64, z: f64 },
    /// L-shaped prism: outer extents `a` (x) and `b` (y), arm thickness `arm`,
    /// extruded by `depth` along z.
    LShape { a: f64, b: f64, arm: f64, depth: f64 },
    /// Axis along z.
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Box { .. } => "box",
            Shape::LShape { .. } => "lshape",
            Shape::Cylinder { .. } => "cylinder",
            Shape::Sphere { .. } => "sphere",
        }
    }

    pub fn symmetric(&self) -> bool {
        matches!(self, Shape::Cylinder { .. } | Shape::Sphere { .. })
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Box { x, y, z } => vec![x, y, z],
            Shape::LShape { a, b, arm, depth } => vec![a, b, arm, depth],
            Shape::Cylinder { radius, height } => vec![radius, height],
            Shape::Sphere { radius } => vec![radius],
        }
    }
}

/// Serializable request for [`make_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub id: u32,
    /// One of `box`, `lshape`, `cylinder`, `sphere`.
    pub kind: String,
    /// Box: `[x, y, z]`; lshape: `[a, b, arm, depth]`; cylinder: `[radius, height]`;
    /// sphere: `[radius]`.
    pub dims: Vec<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_points() -> usize {
    500
}

impl ShapeSpec {
    pub fn new(id: u32, kind: &str, dims: &[f64], seed: u64) -> Self {
        Self {
            id,
            kind: kind.to_string(),
            dims: dims.to_vec(),
            points: default_points(),
            seed,
        }
    }

    pub fn shape(&self) -> Result<Shape, DataError> {
        let need = match self.kind.as_str() {
            "box" => 3,
            "lshape" => 4,
            "cylinder" => 2,
            "sphere" => 1,
            other => return Err(DataError::UnknownShape(other.to_string())),
        };
        if self.dims.len() != need {
            return Err(DataError::DegenerateSize(format!(
                "{} needs {} dimensions, got {}",
                self.kind,
                need,
                self.dims.len()
            )));
        }
        if let Some(d) = self.dims.iter().find(|d| !(**d >= MIN_SIZE && **d <= MAX_SIZE)) {
            return Err(DataError::DegenerateSize(format!(
                "{} dimension {} outside [{}, {}] m",
                self.kind, d, MIN_SIZE, MAX_SIZE
            )));
        }
        let d = &self.dims;
        Ok(match self.kind.as_str() {
            "box" => Shape::Box { x: d[0], y: d[1], z: d[2] },
            "lshape" => {
                if d[2] >= d[0] || d[2] >= d[1] {
                    return Err(DataError::DegenerateSize(format!(
                        "lshape arm {} must be thinner than both extents {} and {}",
                        d[2], d[0], d[1]
                    )));
                }
                Shape::LShape { a: d[0], b: d[1], arm: d[2], depth: d[3] }
            }
            "cylinder" => Shape::Cylinder { radius: d[0], height: d[1] },
            _ => Shape::Sphere { radius: d[0] },
        })
    }
}

/// A rigid object: sampled surface points in its own frame (centroid at the
/// origin), per-point colors and whether the shape has a continuous symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: u32,
    pub shape: Shape,
    pub surface_points: Vec<Vec3>,
    pub point_colors: Vec<[f64; 3]>,
    pub symmetric: bool,
    /// Shift applied to the analytic solid so the sampled centroid is zero.
    offset: Vec3,
    diameter: f64,
    radius: f64,
    render_points: Vec<Vec3>,
    render_colors: Vec<[f64; 3]>,
    render_normals: Vec<Vec3>,
}

impl ObjectModel {
    /// Largest distance between two surface points.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Largest distance of a surface point from the origin.
    pub fn bounding_radius(&self) -> f64 {
        self.radius
    }

    pub fn num_points(&self) -> usize {
        self.surface_points.len()
    }

    /// Dense surface sample (about [`RENDER_SPACING`] apart) used for splatting.
    pub fn render_points(&self) -> (&[Vec3], &[[f64; 3]]) {
        (&self.render_points, &self.render_colors)
    }

    /// Unit surface normals of the dense sample, sign unspecified.
    pub fn render_normals(&self) -> &[Vec3] {
        &self.render_normals
    }

    pub fn points_as_arrays(&self) -> Vec<[f64; 3]> {
        self.surface_points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    /// `count` model points drawn without replacement (all of them when
    /// `count >= M`), deterministic in `seed`.
    pub fn subsample(&self, count: usize, seed: u64) -> Vec<[f64; 3]> {
        let pts = self.points_as_arrays();
        if count >= pts.len() {
            return pts;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, pts.len(), count)
            .into_iter()
            .map(|i| pts[i])
            .collect()
    }

    /// Surface area of the analytic solid, m².
    pub fn surface_area(&self) -> f64 {
        faces(&self.shape).iter().map(Face::area).sum()
    }
}

const FACE_COLORS: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.85],
    [0.90, 0.80, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.80],
];

#[derive(Debug, Clone, Copy)]
enum Face {
    /// origin + s·u + t·v for s, t in [0, 1].
    Rect { origin: Vec3, u: Vec3, v: Vec3, color: [f64; 3] },
    /// Disk at height z with the given radius.
    Disk { z: f64, radius: f64, color: [f64; 3] },
    /// Lateral surface of a z-axis cylinder.
    Tube { radius: f64, height: f64 },
    Ball { radius: f64 },
}

impl Face {
    fn area(&self) -> f64 {
        match *self {
            Face::Rect { u, v, .. } => u.cross(&v).norm(),
            Face::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
            Face::Tube { radius, height } => 2.0 * std::f64::consts::PI * radius * height,
            Face::Ball { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    /// A uniform point on the face with its color and unit normal.
    fn sample(&self, rng: &mut impl Rng) -> Sample {
        match *self {
            Face::Rect { origin, u, v, color } => {
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                (origin + u * s + v * t, color, u.cross(&v).normalize())
            }
            Face::Disk { z, radius, color } => {
                let r = radius * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                (Vec3::new(r * th.cos(), r * th.sin(), z), color, Vec3::z())
            }
            Face::Tube { radius, height } => {
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(-0.5..0.5) * height;
                let n = Vec3::new(th.cos(), th.sin(), 0.0);
                (Vec3::new(radius * n.x, radius * n.y, z), tube_color(z, height), n)
            }
            Face::Ball { radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                let n = Vec3::new(r * th.cos(), r * th.sin(), z);
                (n * radius, BALL_COLOR, n)
            }
        }
    }
}

type Sample = (Vec3, [f64; 3], Vec3);

const BALL_COLOR: [f64; 3] = [0.75, 0.45, 0.20];

fn tube_color(z: f64, height: f64) -> [f64; 3] {
    let s = (z / height + 0.5).clamp(0.0, 1.0);
    [0.2 + 0.6 * s, 0.3, 0.8 - 0.5 * s]
}

fn box_faces(x: f64, y: f64, z: f64) -> Vec<Face> {
    let (hx, hy, hz) = (x / 2.0, y / 2.0, z / 2.0);
    let ex = Vec3::new(x, 0.0, 0.0);
    let ey = Vec3::new(0.0, y, 0.0);
    let ez = Vec3::new(0.0, 0.0, z);
    vec![
        Face::Rect { origin: Vec3::new(hx, -hy, -hz), u: ey, v: ez, color: FACE_COLORS[0] },
        Face::Rect { origin: Vec3::new(-hx, -hy, -hz), u: ey, v: ez, color: FACE_COLORS[1] },
        Face::Rect { origin: Vec3::new(-hx, hy, -hz), u: ex, v: ez, color: FACE_COLORS[2] },
        Face::Rect { origin: Vec3::new(-hx, -hy, -hz), u: ex, v: ez, color: FACE_COLORS[3] },
        Face::Rect { origin: Vec3::new(-hx, -hy, hz), u: ex, v: ey, color: FACE_COLORS[4] },
        Face::Rect { origin: Vec3::new(-hx, -hy, -hz), u: ex, v: ey, color: FACE_COLORS[5] },
    ]
}

fn lshape_faces(a: f64, b: f64, arm: f64, depth: f64) -> Vec<Face> {
    // L outline in the xy-plane, counter-clockwise, extruded over z in [0, depth].
    let outline = [
        (0.0, 0.0),
        (a, 0.0),
        (a, arm),
        (arm, arm),
        (arm, b),
        (0.0, b),
    ];
    let ez = Vec3::new(0.0, 0.0, depth);
    let mut faces = Vec::new();
    for (k, i) in (0..outline.len()).enumerate() {
        let p = outline[i];
        let q = outline[(i + 1) % outline.len()];
        let origin = Vec3::new(p.0, p.1, 0.0);
        let u = Vec3::new(q.0 - p.0, q.1 - p.1, 0.0);
        faces.push(Face::Rect { origin, u, v: ez, color: FACE_COLORS[k % 4] });
    }
    for (z, color) in [(0.0, FACE_COLORS[4]), (depth, FACE_COLORS[5])] {
        faces.push(Face::Rect {
            origin: Vec3::new(0.0, 0.0, z),
            u: Vec3::new(a, 0.0, 0.0),
            v: Vec3::new(0.0, arm, 0.0),
            color,
        });
        faces.push(Face::Rect {
            origin: Vec3::new(0.0, arm, z),
            u: Vec3::new(arm, 0.0, 0.0),
            v: Vec3::new(0.0, b - arm, 0.0),
            color,
        });
    }
    faces
}

fn faces(shape: &Shape) -> Vec<Face> {
    match *shape {
        Shape::Box { x, y, z } => box_faces(x, y, z),
        Shape::LShape { a, b, arm, depth } => lshape_faces(a, b, arm, depth),
        Shape::Cylinder { radius, height } => vec![
            Face::Tube { radius, height },
            Face::Disk { z: height / 2.0, radius, color: [0.9, 0.9, 0.9] },
            Face::Disk { z: -height / 2.0, radius, color: [0.25, 0.25, 0.25] },
        ],
        Shape::Sphere { radius } => vec![Face::Ball { radius }],
    }
}

/// Color of the surface at `p`, which must lie on a centrally symmetric shape.
fn color_at(shape: &Shape, p: &Vec3) -> [f64; 3] {
    match *shape {
        Shape::Box { x, y, z } => {
            let r = [p.x.abs() / x, p.y.abs() / y, p.z.abs() / z];
            let axis = (0..3).max_by(|&i, &j| r[i].total_cmp(&r[j])).unwrap();
            let positive = p[axis] > 0.0;
            FACE_COLORS[axis * 2 + usize::from(!positive)]
        }
        Shape::Cylinder { radius, height } => {
            let radial = (p.x * p.x + p.y * p.y).sqrt();
            let on_cap = (p.z.abs() - height / 2.0).abs() < 1e-12 && radial < radius * (1.0 - 1e-12);
            if on_cap {
                if p.z > 0.0 {
                    [0.9, 0.9, 0.9]
                } else {
                    [0.25, 0.25, 0.25]
                }
            } else {
                tube_color(p.z, height)
            }
        }
        Shape::Sphere { .. } => BALL_COLOR,
        Shape::LShape { .. } => unreachable!("lshape is not centrally symmetric"),
    }
}

fn sample_faces(faces: &[Face], n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < faces.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            faces[k].sample(rng)
        })
        .collect()
}

// Draws `n` points whose centroid is exactly zero: mirrored pairs for
// centrally symmetric solids, otherwise a mean shift returned as the offset.
fn centered_sample(shape: &Shape, n: usize, rng: &mut impl Rng, offset: Option<Vec3>) -> (Vec<Sample>, Vec3) {
    let fs = faces(shape);
    match shape {
        Shape::LShape { .. } => {
            let raw = sample_faces(&fs, n, rng);
            let shift = offset.unwrap_or_else(|| {
                -(raw.iter().map(|(p, _, _)| *p).sum::<Vec3>() / n as f64)
            });
            (raw.into_iter().map(|(p, c, nrm)| (p + shift, c, nrm)).collect(), shift)
        }
        _ => {
            let half = sample_faces(&fs, n.div_ceil(2), rng);
            let mut out = Vec::with_capacity(n);
            for (p, c, nrm) in &half {
                out.push((*p, *c, *nrm));
                if out.len() < n {
                    out.push((-p, color_at(shape, &-p), -nrm));
                }
            }
            (out, Vec3::zeros())
        }
    }
}

/// Samples a model uniformly over the surface of the requested solid.
pub fn make_model(spec: &ShapeSpec) -> Result<ObjectModel, DataError> {
    let shape = spec.shape()?;
    if spec.points < MIN_MODEL_POINTS {
        return Err(DataError::DegenerateSize(format!(
            "{} model points requested, at least {} required",
            spec.points, MIN_MODEL_POINTS
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (sampled, offset) = centered_sample(&shape, spec.points, &mut rng, None);
    let (surface_points, point_colors): (Vec<Vec3>, Vec<[f64; 3]>) = sampled.into_iter().map(|(p, c, _)| (p, c)).unzip();

    let area: f64 = faces(&shape).iter().map(Face::area).sum();
    let dense_n = (area / (RENDER_SPACING * RENDER_SPACING)).ceil() as usize;
    let mut dense_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f5a_1a7e);
    let (dense, _) = centered_sample(&shape, dense_n, &mut dense_rng, Some(offset));
    let mut render_points = Vec::with_capacity(dense.len());
    let mut render_colors = Vec::with_capacity(dense.len());
    let mut render_normals = Vec::with_capacity(dense.len());
    for (p, c, nrm) in dense {
        render_points.push(p);
        render_colors.push(c);
        render_normals.push(nrm);
    }

    let mut diameter: f64 = 0.0;
    for (i, p) in surface_points.iter().enumerate() {
        for q in &surface_points[i + 1..] {
            diameter = diameter.max((p - q).norm_squared());
        }
    }
    let radius = surface_points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    Ok(ObjectModel {
        id: spec.id,
        shape,
        surface_points,
        point_colors,
        symmetric: shape.symmetric(),
        offset,
        diameter: diameter.sqrt(),
        radius,
        render_points,
        render_colors,
        render_normals,
    })
}

impl ObjectModel {
    /// Shift between the analytic solid's construction frame and the model frame.
    pub fn offset(&self) -> Vec3 {
        self.offset
    }

    pub fn dims(&self) -> Vec<f64> {
        self.shape.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_on_radius() {
        let m = make_model(&ShapeSpec::new(0, "sphere", &[0.05], 1)).unwrap();
        assert!(m.symmetric);
        for p in &m.surface_points {
            assert!((p.norm() - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn box_extent() {
        let m = make_model(&ShapeSpec::new(0, "box", &[0.1, 0.1, 0.1], 2)).unwrap();
        let max = m.surface_points.iter().flat_map(|p| [p.x.abs(), p.y.abs(), p.z.abs()]).fold(0.0, f64::max);
        assert!(max <= 0.05 + 1e-12 && max > 0.0499);
        assert!(!m.symmetric);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ShapeSpec::new(3, "lshape", &[0.12, 0.08, 0.03, 0.04], 9);
        assert_eq!(make_model(&spec).unwrap(), make_model(&spec).unwrap());
        let other = ShapeSpec { seed: 10, ..spec.clone() };
        assert_ne!(make_model(&spec).unwrap().surface_points, make_model(&other).unwrap().surface_points);
    }

    #[test]
    fn centroid_at_origin() {
        for spec in [
            ShapeSpec::new(0, "box", &[0.1, 0.06, 0.04], 1),
            ShapeSpec::new(1, "lshape", &[0.12, 0.08, 0.03, 0.04], 1),
            ShapeSpec::new(2, "cylinder", &[0.03, 0.12], 1),
            ShapeSpec::new(3, "sphere", &[0.04], 1),
        ] {
            let m = make_model(&spec).unwrap();
            let c = m.surface_points.iter().sum::<Vec3>() / m.num_points() as f64;
            assert!(c.norm() < 1e-6, "{}: {}", spec.kind, c.norm());
            assert!(m.surface_points.iter().all(|p| p.norm() <= m.bounding_radius() + 1e-12));
            assert_eq!(m.point_colors.len(), m.num_points());
        }
    }

    #[test]
    fn mirrored_box_colors_follow_faces() {
        let m = make_model(&ShapeSpec::new(0, "box", &[0.1, 0.06, 0.04], 4)).unwrap();
        for (p, c) in m.surface_points.iter().zip(&m.point_colors) {
            assert_eq!(*c, color_at(&m.shape, p));
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(make_model(&ShapeSpec::new(0, "torus", &[0.1], 0)), Err(DataError::UnknownShape(_))));
        assert!(matches!(make_model(&ShapeSpec::new(0, "box", &[0.1, 0.1, 0.5], 0)), Err(DataError::DegenerateSize(_))));
        assert!(matches!(make_model(&ShapeSpec::new(0, "box", &[0.1, 0.1], 0)), Err(DataError::DegenerateSize(_))));
        assert!(make_model(&ShapeSpec::new(0, "lshape", &[0.05, 0.08, 0.06, 0.04], 0)).is_err());
        let few = ShapeSpec { points: 50, ..ShapeSpec::new(0, "box", &[0.1, 0.1, 0.1], 0) };
        assert!(make_model(&few).is_err());
    }

    #[test]
    fn diameter_of_box() {
        let m = make_model(&ShapeSpec::new(0, "box", &[0.1, 0.1, 0.1], 2)).unwrap();
        let exact = (3.0f64).sqrt() * 0.1;
        assert!(m.diameter() <= exact + 1e-12 && m.diameter() > 0.9 * exact);
    }
}
