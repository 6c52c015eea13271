//! Random scene layouts for the synthetic train and test splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{render_scene, DataError, ObjectModel, RenderOptions, Scene, ShapeSpec};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub objects: Vec<ShapeSpec>,
    pub train_scenes: usize,
    /// Held-out scenes for the validation loss.
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Object center depth range, meters.
    pub depth_range: [f64; 2],
    /// Largest rotation away from the model frame; 180 samples all of SO(3).
    pub max_rotation_deg: f64,
    /// Occluder coverage drawn uniformly from this range per scene.
    pub occluder_range: [f64; 2],
    /// Test scenes cycle through evenly spaced occluder levels on `[0, sweep_max]`
    /// instead of drawing from `occluder_range`.
    pub occlusion_sweep: bool,
    pub sweep_max: f64,
    pub sweep_levels: usize,
    /// A layout is redrawn until every object keeps this many valid pixels.
    pub min_visible_px: usize,
    pub render: RenderOptions,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            objects: vec![
                ShapeSpec::new(1, "box", &[0.10, 0.07, 0.05], 11),
                ShapeSpec::new(2, "lshape", &[0.10, 0.08, 0.035, 0.05], 12),
                ShapeSpec::new(3, "cylinder", &[0.035, 0.11], 13),
            ],
            train_scenes: 500,
            val_scenes: 50,
            test_scenes: 100,
            depth_range: [0.5, 0.9],
            max_rotation_deg: 180.0,
            occluder_range: [0.0, 0.4],
            occlusion_sweep: false,
            sweep_max: 0.8,
            sweep_levels: 5,
            min_visible_px: 40,
            render: RenderOptions::default(),
            intrinsics: CameraIntrinsics::default(),
            seed: 7,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rotation about a random axis by an angle up to `max_deg`, uniform over
/// SO(3) when `max_deg >= 180`.
pub fn random_pose(rng: &mut impl Rng, max_deg: f64, translation: Vec3) -> Pose {
    if max_deg >= 180.0 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        return Pose::new(q, translation.into()).unwrap_or_else(|_| Pose::from_translation(translation.into()));
    }
    let axis: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let angle = rng.random_range(0.0..=max_deg.max(0.0)).to_radians();
    Pose::from_axis_angle(axis, angle, translation.into())
}

fn layout(spec: &DatasetSpec, models: &[ObjectModel], rng: &mut impl Rng) -> Vec<Pose> {
    let k = &spec.intrinsics;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut poses = Vec::with_capacity(models.len());
    for m in models {
        let mut best = None;
        for _ in 0..100 {
            let z = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
            let r = k.fx * m.bounding_radius() / z;
            let span = |size: usize| {
                let lo = (r + 2.0).min(size as f64 / 2.0);
                (lo, (size as f64 - r - 2.0).max(lo))
            };
            let (u0, u1) = span(k.width);
            let (v0, v1) = span(k.height);
            let u = rng.random_range(u0..=u1);
            let v = rng.random_range(v0..=v1);
            best = Some((u, v, z, r));
            // allow partial overlap only
            if placed
                .iter()
                .all(|&(pu, pv, pr)| ((u - pu).powi(2) + (v - pv).powi(2)).sqrt() >= 0.7 * (r + pr))
            {
                break;
            }
        }
        let (u, v, z, r) = best.expect("at least one attempt");
        placed.push((u, v, r));
        let t = Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        poses.push(random_pose(rng, spec.max_rotation_deg, t));
    }
    poses
}

/// Seed of scene `index` in `split`, stable across runs.
pub fn scene_seed(base: u64, split: &str, index: usize) -> u64 {
    let tag = split.bytes().fold(0u64, |h, b| mix(h ^ b as u64));
    mix(mix(base ^ tag) ^ index as u64)
}

pub fn generate_scene(
    spec: &DatasetSpec,
    models: &[ObjectModel],
    split: &str,
    index: usize,
) -> Result<Scene, DataError> {
    let seed = scene_seed(spec.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fraction = if spec.occlusion_sweep && split == "test" {
        let levels = spec.sweep_levels.max(2);
        spec.sweep_max * (index % levels) as f64 / (levels - 1) as f64
    } else {
        let [lo, hi] = spec.occluder_range;
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let mut last = None;
    for attempt in 0..20u64 {
        let poses = layout(spec, models, &mut rng);
        let scene = render_scene(models, &poses, &spec.intrinsics, fraction, mix(seed ^ attempt), &spec.render)?;
        let ok = scene.masks.iter().all(|m| {
            m.data
                .iter()
                .zip(&scene.depth)
                .filter(|(&b, &d)| b != 0 && d > 0.0)
                .count()
                >= spec.min_visible_px
        });
        if ok {
            return Ok(scene);
        }
        last = Some(scene);
    }
    last.ok_or_else(|| DataError::Invalid("no layout attempted".into()))
}

/// Scenes `0..count` of `split`.
pub fn generate_split(
    spec: &DatasetSpec,
    models: &[ObjectModel],
    split: &str,
    count: usize,
) -> Result<Vec<Scene>, DataError> {
    (0..count).map(|i| generate_scene(spec, models, split, i)).collect()
}
