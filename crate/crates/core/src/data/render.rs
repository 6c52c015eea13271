//! Z-buffer point splatting of posed object models over a textured
//! background plane, with an optional per-object occluder.
//!
//! Each dense model point is splatted as a small disk in its tangent plane.
//! A pixel takes the depth where its center ray crosses the nearest disk, so
//! depth stays on the surface instead of snapping to the point's own z.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Mask, ObjectModel, RENDER_SPACING};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};

/// An RGB-D frame with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub intrinsics: CameraIntrinsics,
    /// `H×W×3`, unit RGB.
    pub rgb: Vec<f64>,
    /// `H×W` meters, 0 where the sensor has no return.
    pub depth: Vec<f64>,
    pub object_ids: Vec<u32>,
    pub symmetric: Vec<bool>,
    pub masks: Vec<Mask>,
    pub gt_poses: Vec<Pose>,
    /// Occluder coverage requested when the frame was rendered.
    pub occluder_fraction: f64,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width() + col]
    }

    pub fn rgb_at(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width() + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn num_objects(&self) -> usize {
        self.object_ids.len()
    }

    /// Position of `id` among the scene's objects.
    pub fn object_index(&self, id: u32) -> Option<usize> {
        self.object_ids.iter().position(|&o| o == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise: f64,
    /// Probability that a pixel loses its depth return.
    pub dropout: f64,
    /// Standard deviation of additive color noise.
    pub color_noise: f64,
    /// Draw the textured background plane behind the objects.
    pub background: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            depth_noise: 0.001,
            dropout: 0.01,
            color_noise: 0.01,
            background: true,
        }
    }
}

impl RenderOptions {
    /// No noise, no dropout, no background.
    pub fn clean() -> Self {
        Self {
            depth_noise: 0.0,
            dropout: 0.0,
            color_noise: 0.0,
            background: false,
        }
    }
}

const NO_LABEL: u16 = u16::MAX;

/// Splat disk radius. Wide enough that a pixel center almost never misses
/// every disk of a visible face at the dense sampling density.
const SPLAT_RADIUS: f64 = 1.75 * RENDER_SPACING;

struct Frame {
    k: CameraIntrinsics,
    z: Vec<f64>,
    rgb: Vec<f64>,
    label: Vec<u16>,
}

impl Frame {
    fn write(&mut self, idx: usize, z: f64, color: [f64; 3], label: u16) {
        if z < self.z[idx] {
            self.z[idx] = z;
            self.rgb[idx * 3..idx * 3 + 3].copy_from_slice(&color);
            self.label[idx] = label;
        }
    }
}

// Writes the disk centered at `p` with normal `n` into every pixel whose
// center ray passes through it.
fn splat(frame: &mut Frame, p: &Vec3, n: &Vec3, color: [f64; 3], label: u16) {
    let k = frame.k;
    if p.z <= SPLAT_RADIUS {
        return;
    }
    let (u, v) = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
    let reach_u = k.fx * SPLAT_RADIUS / (p.z - SPLAT_RADIUS);
    let reach_v = k.fy * SPLAT_RADIUS / (p.z - SPLAT_RADIUS);
    let c0 = (u - reach_u).ceil().max(0.0);
    let c1 = (u + reach_u).floor().min(k.width as f64 - 1.0);
    let r0 = (v - reach_v).ceil().max(0.0);
    let r1 = (v + reach_v).floor().min(k.height as f64 - 1.0);
    if c0 > c1 || r0 > r1 {
        return;
    }
    let along = n.dot(p);
    for row in r0 as usize..=r1 as usize {
        for col in c0 as usize..=c1 as usize {
            let ray = Vec3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
            let denom = n.dot(&ray);
            if denom.abs() < 1e-9 {
                continue;
            }
            let z = along / denom;
            if z > 0.0 && (ray * z - p).norm() <= SPLAT_RADIUS {
                frame.write(row * k.width + col, z, color, label);
            }
        }
    }
}

fn background(frame: &mut Frame, far: f64, rng: &mut impl Rng) {
    // plane tilted like a table top receding from the camera
    let n = Vec3::new(0.0, -0.35, 1.0).normalize();
    let d = far * n.z;
    let base = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
    let (fa, fb) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let k = frame.k;
    for row in 0..k.height {
        for col in 0..k.width {
            let ray = Vec3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
            let denom = n.dot(&ray);
            if denom <= 1e-6 {
                continue;
            }
            let z = d / denom;
            let p = ray * z;
            let tex = 0.08 * ((p.x * fa * 300.0).sin() + (p.y * fb * 300.0).cos());
            let color = [
                (base[0] + tex).clamp(0.0, 1.0),
                (base[1] + tex).clamp(0.0, 1.0),
                (base[2] - tex).clamp(0.0, 1.0),
            ];
            frame.write(row * k.width + col, z, color, NO_LABEL);
        }
    }
}

/// Renders `models` at `poses`. For every object an occluding slab, placed
/// 5 cm in front of the object's nearest visible point, hides approximately
/// `occluder_fraction` of its otherwise visible pixels.
pub fn render_scene(
    models: &[ObjectModel],
    poses: &[Pose],
    intrinsics: &CameraIntrinsics,
    occluder_fraction: f64,
    seed: u64,
    opts: &RenderOptions,
) -> Result<Scene, DataError> {
    if models.len() != poses.len() {
        return Err(DataError::Invalid(format!("{} models but {} poses", models.len(), poses.len())));
    }
    intrinsics.validate()?;
    let k = *intrinsics;
    let npx = k.width * k.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = Frame {
        k,
        z: vec![f64::INFINITY; npx],
        rgb: vec![0.0; npx * 3],
        label: vec![NO_LABEL; npx],
    };

    let mut camera_points = Vec::with_capacity(models.len());
    for (m, pose) in models.iter().zip(poses) {
        let (pts, _) = m.render_points();
        let moved: Vec<Vec3> = pts.iter().map(|p| pose.apply(p)).collect();
        if let Some(bad) = moved.iter().find(|p| p.z <= 0.0) {
            return Err(DataError::ObjectBehindCamera { id: m.id, depth: bad.z });
        }
        camera_points.push(moved);
    }

    if opts.background {
        let far = camera_points
            .iter()
            .flat_map(|c| c.iter().map(|p| p.z))
            .fold(0.0, f64::max)
            + 0.15;
        background(&mut frame, far, &mut rng);
    }

    for (o, ((m, pose), pts)) in models.iter().zip(poses).zip(&camera_points).enumerate() {
        let (_, colors) = m.render_points();
        for ((p, c), n) in pts.iter().zip(colors).zip(m.render_normals()) {
            splat(&mut frame, p, &pose.rotation().transform_vector(n), *c, o as u16);
        }
    }

    let fraction = occluder_fraction.clamp(0.0, 1.0);
    if fraction > 0.0 {
        for o in 0..models.len() {
            occlude(&mut frame, o as u16, fraction, &mut rng);
        }
    }

    let mut masks = vec![Mask::empty(k.width, k.height); models.len()];
    for (i, &l) in frame.label.iter().enumerate() {
        if (l as usize) < models.len() {
            masks[l as usize].data[i] = 1;
        }
    }

    let noise = (opts.depth_noise > 0.0).then(|| Normal::new(0.0, opts.depth_noise).unwrap());
    let cnoise = (opts.color_noise > 0.0).then(|| Normal::new(0.0, opts.color_noise).unwrap());
    let mut depth = vec![0.0; npx];
    for i in 0..npx {
        let z = frame.z[i];
        if z.is_finite() {
            let mut zz = z;
            if let Some(n) = &noise {
                zz += n.sample(&mut rng);
            }
            let dropped = opts.dropout > 0.0 && rng.random::<f64>() < opts.dropout;
            depth[i] = if dropped || zz <= 0.0 { 0.0 } else { zz };
        }
        if let Some(n) = &cnoise {
            for c in 0..3 {
                frame.rgb[i * 3 + c] = (frame.rgb[i * 3 + c] + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Scene {
        intrinsics: k,
        rgb: frame.rgb,
        depth,
        object_ids: models.iter().map(|m| m.id).collect(),
        symmetric: models.iter().map(|m| m.symmetric).collect(),
        masks,
        gt_poses: poses.to_vec(),
        occluder_fraction: fraction,
    })
}

// Covers the `fraction` of object `o`'s visible pixels lying furthest along a
// random image direction with a flat slab, extended over the object's bbox.
fn occlude(frame: &mut Frame, o: u16, fraction: f64, rng: &mut impl Rng) {
    let k = frame.k;
    let visible: Vec<usize> = (0..frame.label.len()).filter(|&i| frame.label[i] == o).collect();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let color = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    if visible.is_empty() {
        return;
    }
    let proj = |i: usize| {
        let (r, c) = ((i / k.width) as f64, (i % k.width) as f64);
        theta.cos() * c + theta.sin() * r
    };
    let mut s: Vec<f64> = visible.iter().map(|&i| proj(i)).collect();
    s.sort_by(f64::total_cmp);
    let cover = (fraction * visible.len() as f64).round() as usize;
    if cover == 0 {
        return;
    }
    let threshold = s[visible.len() - cover];
    let zmin = visible.iter().map(|&i| frame.z[i]).fold(f64::INFINITY, f64::min);
    let zocc = (zmin - 0.05).max(0.05);
    let rows = visible.iter().map(|&i| i / k.width);
    let cols = visible.iter().map(|&i| i % k.width);
    let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
    let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
    let pad = 2;
    for r in r0.saturating_sub(pad)..=(r1 + pad).min(k.height - 1) {
        for c in c0.saturating_sub(pad)..=(c1 + pad).min(k.width - 1) {
            let i = r * k.width + c;
            if proj(i) >= threshold {
                frame.write(i, zocc, color, NO_LABEL);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_model, ShapeSpec};

    fn sphere() -> ObjectModel {
        make_model(&ShapeSpec::new(1, "sphere", &[0.05], 3)).unwrap()
    }

    #[test]
    fn sphere_depth_matches_surface() {
        let k = CameraIntrinsics::default();
        let center = Vec3::new(0.02, -0.01, 0.5);
        let pose = Pose::from_translation([center.x, center.y, center.z]);
        let scene = render_scene(&[sphere()], &[pose], &k, 0.0, 1, &RenderOptions::clean()).unwrap();
        let mask = &scene.masks[0];
        assert!(mask.count() > 100);
        for (r, c) in mask.pixels() {
            let d = scene.depth_at(r, c);
            let p = k.backproject(c as f64, r as f64, d).unwrap();
            // two pixels of reprojection at this depth
            let tol = 2.0 * d / k.fx;
            assert!(((p - center).norm() - 0.05).abs() <= tol, "pixel ({r},{c})");
        }
    }

    #[test]
    fn few_holes_at_half_meter() {
        let k = CameraIntrinsics::default();
        let m = make_model(&ShapeSpec::new(1, "box", &[0.1, 0.1, 0.1], 3)).unwrap();
        let pose = Pose::from_axis_angle([1.0, 1.0, 0.0], 0.6, [0.0, 0.0, 0.5]);
        let scene = render_scene(&[m], &[pose], &k, 0.0, 1, &RenderOptions::clean()).unwrap();
        let mask = &scene.masks[0];
        // holes: unset pixels whose four neighbors are all set
        let mut holes = 0;
        for r in 1..k.height - 1 {
            for c in 1..k.width - 1 {
                if !mask.get(r, c)
                    && mask.get(r - 1, c)
                    && mask.get(r + 1, c)
                    && mask.get(r, c - 1)
                    && mask.get(r, c + 1)
                {
                    holes += 1;
                }
            }
        }
        assert!((holes as f64) < 0.05 * mask.count() as f64, "{holes} holes of {}", mask.count());
    }

    #[test]
    fn occluder_halves_visible_pixels() {
        let k = CameraIntrinsics::default();
        let m = make_model(&ShapeSpec::new(1, "box", &[0.1, 0.08, 0.06], 3)).unwrap();
        let pose = Pose::from_axis_angle([0.3, 1.0, 0.2], 0.8, [0.01, 0.0, 0.6]);
        let opts = RenderOptions::default();
        let full = render_scene(&[m.clone()], &[pose], &k, 0.0, 5, &opts).unwrap();
        let half = render_scene(&[m], &[pose], &k, 0.5, 5, &opts).unwrap();
        let ratio = half.masks[0].count() as f64 / full.masks[0].count() as f64;
        assert!((ratio - 0.5).abs() <= 0.1, "ratio {ratio}");
    }

    // Entry distance along `ray` (z = 1) into an axis-aligned box or a sphere.
    fn ray_box(ray: &Vec3, center: &Vec3, half: f64) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for i in 0..3 {
            let (a, b) = ((center[i] - half) / ray[i], (center[i] + half) / ray[i]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some(t0)
    }

    fn ray_sphere(ray: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
        let a = ray.norm_squared();
        let b = ray.dot(center);
        let disc = b * b - a * (center.norm_squared() - radius * radius);
        (disc >= 0.0).then(|| (b - disc.sqrt()) / a)
    }

    #[test]
    fn nearer_object_wins_each_pixel() {
        let k = CameraIntrinsics::default();
        let a = make_model(&ShapeSpec::new(1, "box", &[0.1, 0.1, 0.1], 3)).unwrap();
        let b = make_model(&ShapeSpec::new(2, "sphere", &[0.06], 4)).unwrap();
        let (ca, cb) = (Vec3::new(0.0, 0.0, 0.7), Vec3::new(0.03, 0.01, 0.55));
        let pa = Pose::from_translation([ca.x, ca.y, ca.z]);
        let pb = Pose::from_translation([cb.x, cb.y, cb.z]);
        let scene = render_scene(&[a, b], &[pa, pb], &k, 0.0, 2, &RenderOptions::clean()).unwrap();
        // analytic ray casting through every pixel center
        let want: Vec<Option<(usize, f64)>> = (0..k.width * k.height)
            .map(|i| {
                let ray = Vec3::new(((i % k.width) as f64 - k.cx) / k.fx, ((i / k.width) as f64 - k.cy) / k.fy, 1.0);
                let hits = [ray_box(&ray, &ca, 0.05), ray_sphere(&ray, &cb, 0.06)];
                (0..2).filter_map(|o| hits[o].map(|z| (o, z))).min_by(|x, y| x.1.total_cmp(&y.1))
            })
            .collect();
        let label = |i: usize| want[i].map(|w| w.0);
        let mut checked = 0;
        for i in 0..want.len() {
            let (r, c) = (i / k.width, i % k.width);
            if r == 0 || c == 0 || r + 1 == k.height || c + 1 == k.width {
                continue;
            }
            // splat disks may spill one pixel across a silhouette
            let w = k.width;
            if [i - 1, i + 1, i - w, i + w, i - w - 1, i - w + 1, i + w - 1, i + w + 1].iter().any(|&j| label(j) != label(i)) {
                continue;
            }
            let got = (0..2).find(|&m| scene.masks[m].data[i] != 0);
            assert_eq!(got, label(i), "pixel ({r},{c}) depth {} want {:?}", scene.depth[i], want[i]);
            if let Some((_, z)) = want[i] {
                assert!((scene.depth[i] - z).abs() < 5e-4, "pixel {i}: {} vs {z}", scene.depth[i]);
                checked += 1;
            }
        }
        assert!(checked > 500);
        let overlap = (0..want.len()).filter(|&i| scene.masks[0].data[i] != 0 && scene.masks[1].data[i] != 0).count();
        assert_eq!(overlap, 0);
        assert!(scene.masks[0].count() > 0 && scene.masks[1].count() > 0);
    }

    #[test]
    fn deterministic_and_behind_camera() {
        let k = CameraIntrinsics::default();
        let m = sphere();
        let pose = Pose::from_translation([0.0, 0.0, 0.8]);
        let opts = RenderOptions::default();
        let a = render_scene(&[m.clone()], &[pose], &k, 0.3, 11, &opts).unwrap();
        let b = render_scene(&[m.clone()], &[pose], &k, 0.3, 11, &opts).unwrap();
        assert_eq!(a, b);
        let behind = Pose::from_translation([0.0, 0.0, -0.5]);
        assert!(matches!(
            render_scene(&[m], &[behind], &k, 0.0, 1, &opts),
            Err(DataError::ObjectBehindCamera { .. })
        ));
    }
}
