//! Pose accuracy metrics, occlusion measure and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ObjectModel, Scene};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty distance list")]
    EmptyList,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no model for object {0}")]
    MissingModel(u32),
    #[error("estimator failed on scene {scene}, object {object}: {reason}")]
    Estimator { scene: usize, object: u32, reason: String },
}

/// Mean distance between corresponding points under `gt` and `est`.
pub fn add_points(points: &[Vec3], gt: &Pose, est: &Pose) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sum: f64 = points.iter().map(|p| (gt.apply(p) - est.apply(p)).norm()).sum();
    sum / points.len() as f64
}

/// Mean distance from each `est`-placed point to the closest `gt`-placed point.
pub fn adds_points(points: &[Vec3], gt: &Pose, est: &Pose) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let g: Vec<Vec3> = points.iter().map(|p| gt.apply(p)).collect();
    let mut sum = 0.0;
    for p in points {
        let e = est.apply(p);
        let best = g.iter().map(|q| (q - e).norm_squared()).fold(f64::INFINITY, f64::min);
        sum += best.sqrt();
    }
    sum / points.len() as f64
}

pub fn add_metric(model: &ObjectModel, gt: &Pose, est: &Pose) -> f64 {
    add_points(&model.surface_points, gt, est)
}

pub fn adds_metric(model: &ObjectModel, gt: &Pose, est: &Pose) -> f64 {
    adds_points(&model.surface_points, gt, est)
}

/// Area under the accuracy-threshold curve on `[0, max_threshold]`, divided
/// by `max_threshold`. For the empirical step curve this is exactly the mean
/// of `max(0, 1 − d / max_threshold)`.
pub fn auc(distances: &[f64], max_threshold: f64) -> Result<f64, MetricsError> {
    if distances.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let sum: f64 = distances.iter().map(|&d| (1.0 - d / max_threshold).max(0.0)).sum();
    Ok(sum / distances.len() as f64)
}

/// Percentage of distances strictly below `threshold`.
pub fn pct_below(distances: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if distances.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = distances.iter().filter(|&&d| d < threshold).count();
    Ok(100.0 * n as f64 / distances.len() as f64)
}

/// Percentage of model points that the depth map does not confirm: points
/// projecting outside the image, onto a pixel with no return, or whose depth
/// differs from the measured one by more than `margin`.
pub fn invisible_surface_pct(
    points: &[Vec3],
    gt: &Pose,
    depth: &[f64],
    intrinsics: &CameraIntrinsics,
    margin: f64,
) -> f64 {
    if points.is_empty() {
        return 100.0;
    }
    let k = intrinsics;
    let hidden = points
        .iter()
        .filter(|p| {
            let q = gt.apply(p);
            match k.pixel_of(&q) {
                Some((r, c)) => {
                    let d = depth[r * k.width + c];
                    d <= 0.0 || (q.z - d).abs() > margin
                }
                None => true,
            }
        })
        .count();
    100.0 * hidden as f64 / points.len() as f64
}

/// Wall-clock seconds per stage for one object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub segmentation: f64,
    pub estimation: f64,
    pub refinement: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.segmentation + self.estimation + self.refinement
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: usize,
    pub object_id: u32,
    pub add: f64,
    pub adds: f64,
    pub invisible_pct: f64,
    /// Accuracy threshold this instance is scored against, meters.
    pub threshold: f64,
    pub timings: StageTimings,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.adds < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub auc_max: f64,
    /// Accuracy threshold, meters, or a fraction of the object diameter when `relative_threshold`.
    pub threshold: f64,
    pub relative_threshold: bool,
    pub visibility_margin: f64,
    pub bucket_start: f64,
    pub bucket_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            auc_max: 0.1,
            threshold: 0.02,
            relative_threshold: false,
            visibility_margin: 0.02,
            bucket_start: 60.0,
            bucket_width: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    /// `None` for the row covering every instance.
    pub object_id: Option<u32>,
    pub count: usize,
    pub auc: f64,
    pub pct_below: f64,
    pub mean_add: f64,
    pub mean_adds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBucket {
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub accuracy_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub objects: Vec<ObjectSummary>,
    pub all: ObjectSummary,
    pub buckets: Vec<OcclusionBucket>,
    pub mean_timings: StageTimings,
}

fn summarize(id: Option<u32>, recs: &[&EvalRecord], cfg: &EvalConfig) -> ObjectSummary {
    let adds: Vec<f64> = recs.iter().map(|r| r.adds).collect();
    let n = recs.len().max(1) as f64;
    ObjectSummary {
        object_id: id,
        count: recs.len(),
        auc: auc(&adds, cfg.auc_max).unwrap_or(0.0),
        pct_below: 100.0 * recs.iter().filter(|r| r.correct()).count() as f64 / n,
        mean_add: recs.iter().map(|r| r.add).sum::<f64>() / n,
        mean_adds: adds.iter().sum::<f64>() / n,
    }
}

/// Builds summaries and occlusion buckets from per-instance records.
pub fn summarize_records(records: Vec<EvalRecord>, cfg: &EvalConfig) -> EvalReport {
    let mut ids: Vec<u32> = records.iter().map(|r| r.object_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let objects = ids
        .iter()
        .map(|&id| {
            let recs: Vec<&EvalRecord> = records.iter().filter(|r| r.object_id == id).collect();
            summarize(Some(id), &recs, cfg)
        })
        .collect();
    let all_recs: Vec<&EvalRecord> = records.iter().collect();
    let all = summarize(None, &all_recs, cfg);

    let mut buckets = Vec::new();
    let mut lower = cfg.bucket_start;
    while lower < 100.0 {
        let upper = (lower + cfg.bucket_width).min(100.0);
        let last = upper >= 100.0;
        let inside: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| r.invisible_pct >= lower && (r.invisible_pct < upper || (last && r.invisible_pct <= 100.0)))
            .collect();
        let accuracy_pct = (!inside.is_empty())
            .then(|| 100.0 * inside.iter().filter(|r| r.correct()).count() as f64 / inside.len() as f64);
        buckets.push(OcclusionBucket {
            lower_pct: lower,
            upper_pct: upper,
            count: inside.len(),
            accuracy_pct,
        });
        lower = upper;
    }

    let n = records.len().max(1) as f64;
    let mut mean_timings = StageTimings::default();
    for r in &records {
        mean_timings.segmentation += r.timings.segmentation / n;
        mean_timings.estimation += r.timings.estimation / n;
        mean_timings.refinement += r.timings.refinement / n;
    }
    EvalReport {
        records,
        objects,
        all,
        buckets,
        mean_timings,
    }
}

/// Runs `estimator` on every object of every scene and scores it.
/// The estimator receives the scene, its index and the object's position in
/// the scene, and returns the pose and how long each stage took.
pub fn evaluate<F, E>(
    scenes: &[Scene],
    models: &[ObjectModel],
    mut estimator: F,
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError>
where
    F: FnMut(&Scene, usize, usize) -> Result<(Pose, StageTimings), E>,
    E: std::fmt::Display,
{
    if scenes.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut records = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for obj in 0..scene.num_objects() {
            let id = scene.object_ids[obj];
            let model = models.iter().find(|m| m.id == id).ok_or(MetricsError::MissingModel(id))?;
            let (pose, timings) = estimator(scene, si, obj).map_err(|e| MetricsError::Estimator {
                scene: si,
                object: id,
                reason: e.to_string(),
            })?;
            let gt = &scene.gt_poses[obj];
            let threshold = if cfg.relative_threshold { cfg.threshold * model.diameter() } else { cfg.threshold };
            records.push(EvalRecord {
                scene: si,
                object_id: id,
                add: add_metric(model, gt, &pose),
                adds: adds_metric(model, gt, &pose),
                invisible_pct: invisible_surface_pct(
                    &model.surface_points,
                    gt,
                    &scene.depth,
                    &scene.intrinsics,
                    cfg.visibility_margin,
                ),
                threshold,
                timings,
            });
        }
    }
    Ok(summarize_records(records, cfg))
}

impl EvalReport {
    /// Aligned table: one row per object and an ALL row, AUC and accuracy in percent.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<8} {:>6} {:>16} {:>16} {:>12}", "object", "count", "AUC", "<thr", "mean ADD-S");
        let rows = self.objects.iter().chain(std::iter::once(&self.all));
        for o in rows {
            let name = o.object_id.map_or_else(|| "ALL".to_string(), |id| id.to_string());
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>16.10} {:>16.10} {:>12.6}",
                name,
                o.count,
                100.0 * o.auc,
                o.pct_below,
                o.mean_adds
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `bucket_lower_pct,accuracy_pct`; empty buckets have an empty accuracy.
    pub fn occlusion_csv(&self) -> String {
        let mut s = String::from("bucket_lower_pct,accuracy_pct\n");
        for b in &self.buckets {
            let acc = b.accuracy_pct.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{}", b.lower_pct, acc);
        }
        s
    }

    /// One line per instance with full-precision distances.
    pub fn distances_csv(&self) -> String {
        let mut s = String::from("scene,object_id,add,adds,invisible_pct,threshold\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.scene, r.object_id, r.add, r.adds, r.invisible_pct, r.threshold
            );
        }
        s
    }

    /// Accuracy of the lowest minus the highest non-empty occlusion bucket.
    pub fn occlusion_drop(&self) -> Option<f64> {
        let filled: Vec<f64> = self.buckets.iter().filter_map(|b| b.accuracy_pct).collect();
        match (filled.first(), filled.last()) {
            (Some(a), Some(b)) if filled.len() >= 2 => Some(a - b),
            _ => None,
        }
    }
}
