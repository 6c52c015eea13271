//! Per-pixel pose losses and the confidence-weighted objective.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, apply_rt, quat_to_mat, AdamConfig, AdamState, AutodiffError, Matching, Tape, Tensor, Var};
use crate::data::{corrupt_mask, ObjectModel, Scene};
use crate::geometry::Pose;
use crate::network::{prepare, Architecture, Network, NetworkError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{losses} losses but {confidences} confidences")]
    LengthMismatch { losses: usize, confidences: usize },
    #[error("confidence {value} at index {index} is not positive")]
    NonPositiveConfidence { index: usize, value: f64 },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no model for object {0}")]
    MissingModel(u32),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the confidence regularizer.
    pub w: f64,
    /// Dense rows drawn for the loss; `None` uses every sampled point.
    pub num_pixels: Option<usize>,
    /// Model points drawn per object per epoch.
    pub num_model_points: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w: 0.01,
            num_pixels: None,
            num_model_points: 200,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.w > 0.0) {
            return Err(LossError::InvalidConfig(format!("w = {} must be positive", self.w)));
        }
        if self.num_pixels == Some(0) || self.num_model_points == 0 {
            return Err(LossError::InvalidConfig("N and M must be at least 1".into()));
        }
        Ok(())
    }
}

/// Symmetric objects are scored against the closest model point.
pub fn matching_for(symmetric: bool) -> Matching {
    if symmetric {
        Matching::Closest
    } else {
        Matching::Index
    }
}

/// Per-hypothesis loss `[n]` of rotations `[n,4]` and translations `[n,3]`
/// against `model_points` placed at `gt`.
pub fn pose_losses(
    tape: &mut Tape,
    rotation: Var,
    translation: Var,
    model_points: &[[f64; 3]],
    gt: &Pose,
    symmetric: bool,
) -> Result<Var, LossError> {
    // same arithmetic as the predicted side, so a prediction equal to `gt` scores exactly 0
    let r = quat_to_mat(&gt.quaternion());
    let t = gt.translation();
    let target: Vec<[f64; 3]> = model_points.iter().map(|p| apply_rt(&r, t.as_slice(), p)).collect();
    Ok(tape.pose_distance(rotation, translation, model_points, &target, matching_for(symmetric))?)
}

fn pose_vars(tape: &mut Tape, pred: &Pose) -> (Var, Var) {
    let q = tape.param(Tensor::matrix(1, 4, pred.quaternion().to_vec()).expect("1x4"));
    let t = tape.param(Tensor::matrix(1, 3, pred.translation().as_slice().to_vec()).expect("1x3"));
    (q, t)
}

fn single_loss(model_points: &[[f64; 3]], gt: &Pose, pred: &Pose, symmetric: bool) -> f64 {
    let mut tape = Tape::new();
    let (q, t) = pose_vars(&mut tape, pred);
    let l = pose_losses(&mut tape, q, t, model_points, gt, symmetric).expect("well-formed inputs");
    tape.value(l).data()[0]
}

/// Mean distance between corresponding model points under `gt` and `pred`.
pub fn add_loss_per_pixel(model_points: &[[f64; 3]], gt: &Pose, pred: &Pose) -> f64 {
    single_loss(model_points, gt, pred, false)
}

/// Mean distance from each ground-truth-placed model point to the closest
/// predicted-placed one.
pub fn adds_loss_per_pixel(model_points: &[[f64; 3]], gt: &Pose, pred: &Pose) -> f64 {
    single_loss(model_points, gt, pred, true)
}

/// `mean_i (L_i c_i − w log c_i)` on the tape.
pub fn total_loss(tape: &mut Tape, losses: Var, confidences: Var, w: f64) -> Result<Var, LossError> {
    let (nl, nc) = (tape.value(losses).len(), tape.value(confidences).len());
    if nl != nc || tape.shape(losses) != tape.shape(confidences) {
        return Err(LossError::LengthMismatch {
            losses: nl,
            confidences: nc,
        });
    }
    if let Some((index, &value)) = tape.value(confidences).data().iter().enumerate().find(|(_, &c)| !(c > 0.0)) {
        return Err(LossError::NonPositiveConfidence { index, value });
    }
    let weighted = tape.mul(losses, confidences)?;
    let logc = tape.log(confidences)?;
    let reg = tape.scale(logc, w)?;
    let per = tape.sub(weighted, reg)?;
    Ok(tape.mean(per)?)
}

/// Plain-value form of [`total_loss`].
pub fn total_loss_value(losses: &[f64], confidences: &[f64], w: f64) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(losses.to_vec()));
    let c = tape.constant(Tensor::from_vec(confidences.to_vec()));
    let out = total_loss(&mut tape, l, c, w)?;
    Ok(tape.value(out).item())
}

/// Knobs of the training loop that are not part of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    /// Points sampled per object while training; inference uses the network's own count.
    pub train_points: usize,
    /// Segmentation corruption applied to training masks.
    pub mask_dilation: usize,
    pub mask_leak: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            train_points: 64,
            mask_dilation: 0,
            mask_leak: 0.0,
        }
    }
}

/// Which objective an object was routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub object_id: u32,
    pub symmetric: bool,
    pub matching: Matching,
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7cc1_b727_220a_u64, |h, &p| {
        let mut z = (h ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Model points used for object `id` during `epoch`.
pub fn epoch_model_points(model: &ObjectModel, count: usize, epoch: usize) -> Vec<[f64; 3]> {
    model.subsample(count, mix_seed(&[0xa11, model.id as u64, epoch as u64]))
}

pub(crate) fn find_model(models: &[ObjectModel], id: u32) -> Result<&ObjectModel, LossError> {
    models.iter().find(|m| m.id == id).ok_or(LossError::MissingModel(id))
}

/// Confidence-weighted loss of one object on `tape`, with its route.
#[allow(clippy::too_many_arguments)]
pub(crate) fn object_loss(
    net: &Network,
    tape: &mut Tape,
    vars: &[Var],
    scene: &Scene,
    obj: usize,
    model: &ObjectModel,
    cfg: &LossConfig,
    opts: &TrainOptions,
    epoch: usize,
    seed: u64,
) -> Result<(Var, Route), LossError> {
    let mask = corrupt_mask(&scene.masks[obj], opts.mask_dilation, opts.mask_leak, seed);
    let input = prepare(scene, &mask, opts.train_points, seed ^ 1)?;
    let out = net.forward(tape, vars, &input)?;
    let points = epoch_model_points(model, cfg.num_model_points, epoch);
    let symmetric = scene.symmetric[obj];
    let losses = pose_losses(tape, out.rotation, out.translation, &points, &scene.gt_poses[obj], symmetric)?;
    let route = Route {
        object_id: scene.object_ids[obj],
        symmetric,
        matching: matching_for(symmetric),
    };
    let value = match (net.config.architecture, out.confidence) {
        (Architecture::PerPixel, Some(conf)) => {
            let n = tape.shape(losses)[0];
            let (l, c) = match cfg.num_pixels {
                Some(k) if k < n => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
                    let rows = sample(&mut rng, n, k).into_vec();
                    let lr = tape.reshape(losses, &[n, 1])?;
                    let cr = tape.reshape(conf, &[n, 1])?;
                    let lg = tape.gather_rows(lr, &rows)?;
                    let cg = tape.gather_rows(cr, &rows)?;
                    (tape.reshape(lg, &[k])?, tape.reshape(cg, &[k])?)
                }
                _ => (losses, conf),
            };
            total_loss(tape, l, c, cfg.w)?
        }
        // a single hypothesis carries no confidence
        _ => tape.mean(losses)?,
    };
    Ok((value, route))
}

/// One optimizer step on the sum of per-object objectives over `batch`.
/// Returns that sum and the number of objects it covers.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    net: &mut Network,
    batch: &[&Scene],
    models: &[ObjectModel],
    state: &mut AdamState,
    cfg: &LossConfig,
    opts: &TrainOptions,
    epoch: usize,
    step_seed: u64,
    mut hook: Option<&mut dyn FnMut(&Route)>,
) -> Result<(f64, usize), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    cfg.validate()?;
    let mut grads: Vec<Tensor> = net.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    let mut count = 0;
    for (si, scene) in batch.iter().enumerate() {
        for obj in 0..scene.num_objects() {
            let model = find_model(models, scene.object_ids[obj])?;
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let seed = mix_seed(&[step_seed, si as u64, obj as u64]);
            let (loss, route) = object_loss(net, &mut tape, &vars, scene, obj, model, cfg, opts, epoch, seed)?;
            if let Some(h) = hook.as_mut() {
                h(&route);
            }
            total += tape.value(loss).item();
            count += 1;
            let g = tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&vars) {
                if let Some(gv) = g.get(*v) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    adam_step(net.params.tensors_mut(), &grads, state, &opts.adam)?;
    Ok((total, count))
}

/// Mean per-object objective over `scenes` without updating anything.
pub fn evaluate_loss(
    net: &Network,
    scenes: &[Scene],
    models: &[ObjectModel],
    cfg: &LossConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<f64, LossError> {
    let mut total = 0.0;
    let mut count = 0;
    for (si, scene) in scenes.iter().enumerate() {
        for obj in 0..scene.num_objects() {
            let model = find_model(models, scene.object_ids[obj])?;
            let mut tape = Tape::new();
            let vars = net.params.bind_frozen(&mut tape);
            let s = mix_seed(&[seed, si as u64, obj as u64]);
            let (loss, _) = object_loss(net, &mut tape, &vars, scene, obj, model, cfg, opts, 0, s)?;
            total += tape.value(loss).item();
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_model, ShapeSpec};

    fn box_points() -> Vec<[f64; 3]> {
        make_model(&ShapeSpec::new(1, "box", &[0.1, 0.06, 0.04], 5)).unwrap().subsample(200, 1)
    }

    #[test]
    fn add_is_zero_at_truth_and_offset_under_translation() {
        let pts = box_points();
        let gt = Pose::from_axis_angle([0.2, 1.0, 0.3], 1.1, [0.05, -0.02, 0.7]);
        assert_eq!(add_loss_per_pixel(&pts, &gt, &gt), 0.0);
        assert_eq!(adds_loss_per_pixel(&pts, &gt, &gt), 0.0);
        let shifted = Pose::from_translation([0.01, 0.0, 0.0]).compose(&gt);
        assert!((add_loss_per_pixel(&pts, &gt, &shifted) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn total_loss_basics() {
        assert!((total_loss_value(&[0.02], &[1.0], 0.01).unwrap() - 0.02).abs() < 1e-15);
        let ls = [0.01, 0.05, 0.2];
        let mean = ls.iter().sum::<f64>() / 3.0;
        assert!((total_loss_value(&ls, &[1.0; 3], 0.01).unwrap() - mean).abs() < 1e-15);
        assert!(matches!(
            total_loss_value(&[0.1, 0.2], &[1.0], 0.01),
            Err(LossError::LengthMismatch { .. })
        ));
        assert!(matches!(
            total_loss_value(&[0.1, 0.2], &[1.0, 0.0], 0.01),
            Err(LossError::NonPositiveConfidence { index: 1, .. })
        ));
    }

    #[test]
    fn confidence_grid_minimum_is_w_over_l() {
        let (l, w) = (0.04, 0.01);
        let grid: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| {
                let fa = total_loss_value(&[l], &[*a], w).unwrap();
                let fb = total_loss_value(&[l], &[*b], w).unwrap();
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert!((best - w / l).abs() <= 1e-3 + 1e-12);
        // L small enough that w/L exceeds the sigmoid's ceiling: minimum at the top of the grid
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| {
                total_loss_value(&[0.005], &[*a], w)
                    .unwrap()
                    .total_cmp(&total_loss_value(&[0.005], &[*b], w).unwrap())
            })
            .unwrap();
        assert_eq!(best, 1.0);
    }

    #[test]
    fn invalid_config() {
        assert!(LossConfig { w: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { num_pixels: Some(0), ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
