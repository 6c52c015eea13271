//! Iterative residual refinement.
//!
//! Each step moves the observed cloud into the frame of the current estimate,
//! re-embeds it, fuses it with the color map kept from the main network and
//! regresses a residual pose from the pooled fused feature. A residual `d`
//! found in that frame updates the estimate to `current ∘ d`, which is the
//! camera-frame residual `current ∘ d ∘ current⁻¹` composed on the left.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, read_checkpoint, AdamConfig, AdamState, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::data::{corrupt_mask, ObjectModel, Scene};
use crate::geometry::{Pose, Vec3};
use crate::loss::{epoch_model_points, find_model, matching_for, mix_seed, LossError, TrainOptions};
use crate::network::{prepare, Dense, Fusion, Network, NetworkError, PointEncoder, PreparedInput};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("main network checkpoint not found at {0}")]
    MissingCheckpoint(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    /// Refinement iterations.
    pub iterations: usize,
    pub d_geo: usize,
    pub d_glob: usize,
    pub geo_hidden: usize,
    pub fusion_hidden: usize,
    /// Widths of the three hidden layers before the residual outputs.
    pub hidden: [usize; 3],
    /// Epoch at which refiner training may start regardless of convergence.
    pub start_epoch: Option<usize>,
    /// Validation-loss window and relative improvement below which the main network counts as converged.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Perturbation magnitude at the start and end of refiner training, degrees and meters.
    pub perturb_start: (f64, f64),
    pub perturb_end: (f64, f64),
    /// Probability of training from a perturbed ground truth instead of the main network's estimate.
    pub perturb_probability: f64,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            d_geo: 32,
            d_glob: 64,
            geo_hidden: 32,
            fusion_hidden: 64,
            hidden: [64, 32, 16],
            start_epoch: None,
            plateau_window: 5,
            plateau_tolerance: 0.01,
            perturb_start: (20.0, 0.03),
            perturb_end: (5.0, 0.01),
            perturb_probability: 0.5,
            seed: 1,
        }
    }
}

/// True once refiner training may begin: at `start_epoch`, or when the main
/// network's validation loss improved by less than the tolerance (relative)
/// over the last `plateau_window` epochs.
pub fn refiner_gate(epoch: usize, val_losses: &[f64], cfg: &RefinerConfig) -> bool {
    if cfg.start_epoch.is_some_and(|s| epoch >= s) {
        return true;
    }
    let w = cfg.plateau_window;
    if w == 0 || val_losses.len() <= w {
        return false;
    }
    let now = val_losses[val_losses.len() - 1];
    let before = val_losses[val_losses.len() - 1 - w];
    before > 0.0 && (before - now) / before < cfg.plateau_tolerance
}

/// Estimate after applying `residuals` on the left of `initial`, first residual innermost.
pub fn compose_residuals(initial: &Pose, residuals: &[Pose]) -> Pose {
    residuals.iter().fold(*initial, |acc, r| r.compose(&acc))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefinementTrace {
    /// Camera-frame residuals, each composed on the left of the previous estimate.
    pub residuals: Vec<Pose>,
    /// The same residuals expressed in the frame of the estimate they corrected.
    pub canonical_residuals: Vec<Pose>,
    /// Initial estimate followed by the estimate after each step.
    pub estimates: Vec<Pose>,
}

/// Camera points, color map and pixel lookups a refiner step works on.
#[derive(Debug, Clone)]
pub struct RefineInput {
    pub points: Vec<Vec3>,
    pub color_map: Tensor,
    pub crop_index: Vec<[usize; 2]>,
}

impl RefineInput {
    pub fn new(input: &PreparedInput, color_map: Tensor) -> Self {
        Self {
            points: input.cloud.points.clone(),
            color_map,
            crop_index: input.crop_index.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub params: ParamStore,
    d_rgb: usize,
    geo: PointEncoder,
    fusion: Fusion,
    trunk: [Dense; 3],
    rot: Dense,
    trans: Dense,
}

impl Refiner {
    /// `d_rgb` must match the color map width of the main network.
    pub fn new(config: RefinerConfig, d_rgb: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let geo = PointEncoder::new(&mut store, "ref.geo", config.geo_hidden, config.d_geo, &mut rng);
        let fusion = Fusion::new(&mut store, "ref.fusion", d_rgb + config.d_geo, config.fusion_hidden, config.d_glob, &mut rng);
        let [h0, h1, h2] = config.hidden;
        let trunk = [
            Dense::new(&mut store, "ref.fc0", config.d_glob, h0, &mut rng),
            Dense::new(&mut store, "ref.fc1", h0, h1, &mut rng),
            Dense::new(&mut store, "ref.fc2", h1, h2, &mut rng),
        ];
        let rot = Dense::new(&mut store, "ref.rot", h2, 4, &mut rng);
        let trans = Dense::new(&mut store, "ref.trans", h2, 3, &mut rng);
        // output starts as the identity residual
        for d in [rot, trans] {
            store.get_mut(d.weight()).data_mut().fill(0.0);
        }
        store.get_mut(rot.bias()).data_mut()[0] = 1.0;
        Self {
            config,
            params: store,
            d_rgb,
            geo,
            fusion,
            trunk,
            rot,
            trans,
        }
    }

    pub fn d_rgb(&self) -> usize {
        self.d_rgb
    }

    /// Residual `(q[1,4], t[1,3])` in the frame of `current`, recorded on `tape`.
    pub fn refine_step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        points: &[Vec3],
        color_map: Var,
        crop_index: &[[usize; 2]],
        current: &Pose,
    ) -> Result<(Var, Var), RefineError> {
        if points.is_empty() {
            return Err(RefineError::EmptyCloud);
        }
        let inv = current.inverse();
        let data = points.iter().flat_map(|p| {
            let q = inv.apply(p);
            [q.x, q.y, q.z]
        });
        let local = tape.constant(Tensor::new(vec![points.len(), 3], data.collect())?);
        let (geo, _) = self.geo.apply(tape, vars, local)?;
        let (_, global) = crate::network::fuse_with(&self.fusion, tape, vars, color_map, geo, crop_index)?;
        let mut h = tape.reshape(global, &[1, self.config.d_glob])?;
        for layer in &self.trunk {
            h = layer.apply_relu(tape, vars, h)?;
        }
        let q = self.rot.apply(tape, vars, h)?;
        let q = tape.normalize_quaternion(q)?;
        let t = self.trans.apply(tape, vars, h)?;
        Ok((q, t))
    }

    fn residual_value(tape: &Tape, q: Var, t: Var) -> Result<Pose, RefineError> {
        let (q, t) = (tape.value(q).data(), tape.value(t).data());
        Ok(Pose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]]).map_err(NetworkError::from)?)
    }

    /// Runs `iterations` steps from `initial`.
    pub fn refine(&self, initial: &Pose, input: &RefineInput, iterations: usize) -> Result<(Pose, RefinementTrace), RefineError> {
        let mut trace = RefinementTrace {
            estimates: vec![*initial],
            ..RefinementTrace::default()
        };
        let mut current = *initial;
        for _ in 0..iterations {
            let mut tape = Tape::new();
            let vars = self.params.bind_frozen(&mut tape);
            let cmap = tape.constant(input.color_map.clone());
            let (q, t) = self.refine_step(&mut tape, &vars, &input.points, cmap, &input.crop_index, &current)?;
            let local = Self::residual_value(&tape, q, t)?;
            let next = current.compose(&local);
            trace.residuals.push(next.compose(&current.inverse()));
            trace.canonical_residuals.push(local);
            trace.estimates.push(next);
            current = next;
        }
        Ok((current, trace))
    }

    pub fn to_store(&self) -> ParamStore {
        self.params.clone()
    }

    /// Adds this refiner to `ckpt` as section `refiner`, config under the `refiner` metadata key.
    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        let mut meta: serde_json::Value = ckpt
            .meta
            .as_deref()
            .and_then(|m| serde_json::from_str(m).ok())
            .unwrap_or_else(|| serde_json::json!({}));
        meta["refiner"] = serde_json::json!({ "config": self.config, "d_rgb": self.d_rgb });
        ckpt.meta = Some(meta.to_string());
        ckpt.set_section("refiner", self.params.clone());
    }

    /// The refiner stored in `ckpt`, if any.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Option<Self>, RefineError> {
        let Some(store) = ckpt.section("refiner") else {
            return Ok(None);
        };
        let meta: serde_json::Value = serde_json::from_str(ckpt.meta.as_deref().unwrap_or("{}"))
            .map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        let r = &meta["refiner"];
        let config: RefinerConfig = serde_json::from_value(r["config"].clone())
            .map_err(|e| NetworkError::Checkpoint(format!("refiner config: {e}")))?;
        let d_rgb = r["d_rgb"]
            .as_u64()
            .ok_or_else(|| NetworkError::Checkpoint("refiner d_rgb missing".into()))? as usize;
        let mut refiner = Refiner::new(config, d_rgb);
        refiner.params.load_from(store)?;
        Ok(Some(refiner))
    }
}

/// Loads the main network a refiner is trained against.
pub fn load_main(path: &Path) -> Result<(Network, Checkpoint), RefineError> {
    if !path.is_file() {
        return Err(RefineError::MissingCheckpoint(path.display().to_string()));
    }
    let ckpt = read_checkpoint(path).map_err(|_| RefineError::MissingCheckpoint(path.display().to_string()))?;
    let net = Network::from_checkpoint(&ckpt)?;
    Ok((net, ckpt))
}

/// Rotation of up to `max_deg` about a random axis and a translation of up to `max_m` in a random direction.
pub fn perturbation(rng: &mut impl Rng, max_deg: f64, max_m: f64) -> Pose {
    let axis: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let dir: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let dir = Vec3::from(dir).normalize() * rng.random_range(0.0..=max_m);
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    Pose::from_axis_angle(axis, angle, dir.into())
}

/// Perturbation bounds for refiner epoch `epoch` of `epochs`, interpolated linearly.
pub fn curriculum(cfg: &RefinerConfig, epoch: usize, epochs: usize) -> (f64, f64) {
    let f = if epochs <= 1 { 1.0 } else { (epoch as f64 / (epochs - 1) as f64).min(1.0) };
    (
        cfg.perturb_start.0 + f * (cfg.perturb_end.0 - cfg.perturb_start.0),
        cfg.perturb_start.1 + f * (cfg.perturb_end.1 - cfg.perturb_start.1),
    )
}

/// Loss of one refinement run: each step's residual is scored on the pose it
/// produces, with the estimate it started from held fixed.
#[allow(clippy::too_many_arguments)]
fn refine_loss(
    refiner: &Refiner,
    tape: &mut Tape,
    vars: &[Var],
    input: &RefineInput,
    initial: &Pose,
    gt: &Pose,
    model_points: &[[f64; 3]],
    symmetric: bool,
) -> Result<Option<Var>, RefineError> {
    let cmap = tape.constant(input.color_map.clone());
    let mut current = *initial;
    let mut total: Option<Var> = None;
    for _ in 0..refiner.config.iterations {
        let (q, t) = refiner.refine_step(tape, vars, &input.points, cmap, &input.crop_index, &current)?;
        // |current(d(x)) - gt(x)| = |d(x) - current⁻¹(gt(x))|
        let target_pose = current.inverse().compose(gt);
        let target: Vec<[f64; 3]> = model_points
            .iter()
            .map(|p| target_pose.apply(&Vec3::from(*p)).into())
            .collect();
        let l = tape.pose_distance(q, t, model_points, &target, matching_for(symmetric))?;
        let l = tape.sum(l)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        current = current.compose(&Refiner::residual_value(tape, q, t)?);
    }
    Ok(total)
}

/// Data and settings shared by every refiner epoch.
#[derive(Debug, Clone, Copy)]
pub struct RefinerTraining<'a> {
    pub main: &'a Network,
    pub scenes: &'a [Scene],
    pub models: &'a [ObjectModel],
    pub opts: &'a TrainOptions,
    pub adam: &'a AdamConfig,
    pub num_model_points: usize,
    pub batch_size: usize,
    /// Length of the curriculum, in refiner epochs.
    pub total_epochs: usize,
}

/// Starting pose for one training instance: the main network's estimate or,
/// with probability `perturb_probability`, a perturbed ground truth.
fn training_pair(
    refiner: &Refiner,
    run: &RefinerTraining,
    scene: &Scene,
    obj: usize,
    seed: u64,
    bounds: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<(RefineInput, Pose), RefineError> {
    let mask = corrupt_mask(&scene.masks[obj], run.opts.mask_dilation, run.opts.mask_leak, seed);
    let input = prepare(scene, &mask, run.opts.train_points, seed ^ 1)?;
    let est = run.main.estimate_prepared(input)?;
    let initial = if rng.random::<f64>() < refiner.config.perturb_probability {
        perturbation(rng, bounds.0, bounds.1).compose(&scene.gt_poses[obj])
    } else {
        est.pose
    };
    Ok((RefineInput::new(&est.input, est.color_map), initial))
}

/// One refiner epoch against the frozen main network; returns the mean loss per instance.
pub fn train_refiner_epoch(
    refiner: &mut Refiner,
    run: &RefinerTraining,
    state: &mut AdamState,
    epoch: usize,
) -> Result<f64, RefineError> {
    if refiner.d_rgb != run.main.config.d_rgb {
        return Err(NetworkError::InvalidConfig(format!(
            "refiner expects {} color channels, main network has {}",
            refiner.d_rgb, run.main.config.d_rgb
        ))
        .into());
    }
    let bounds = curriculum(&refiner.config, epoch, run.total_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[refiner.config.seed, epoch as u64]));
    let mut order: Vec<usize> = (0..run.scenes.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(run.batch_size.max(1)) {
        let mut grads: Vec<Tensor> = refiner.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &si in chunk {
            let scene = &run.scenes[si];
            for obj in 0..scene.num_objects() {
                let model = find_model(run.models, scene.object_ids[obj])?;
                let seed = mix_seed(&[refiner.config.seed, epoch as u64, si as u64, obj as u64]);
                let (rin, initial) = training_pair(refiner, run, scene, obj, seed, bounds, &mut rng)?;
                let points = epoch_model_points(model, run.num_model_points, epoch);
                let mut tape = Tape::new();
                let vars = refiner.params.bind(&mut tape);
                let gt = scene.gt_poses[obj];
                let Some(loss) = refine_loss(refiner, &mut tape, &vars, &rin, &initial, &gt, &points, scene.symmetric[obj])?
                else {
                    continue;
                };
                sum += tape.value(loss).item();
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
        adam_step(refiner.params.tensors_mut(), &grads, state, run.adam)?;
    }
    Ok(sum / count.max(1) as f64)
}

/// Mean refiner loss over `run.scenes` with fixed sampling, no updates.
pub fn refiner_loss(refiner: &Refiner, run: &RefinerTraining, seed: u64) -> Result<f64, RefineError> {
    let bounds = refiner.config.perturb_end;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (si, scene) in run.scenes.iter().enumerate() {
        for obj in 0..scene.num_objects() {
            let model = find_model(run.models, scene.object_ids[obj])?;
            let s = mix_seed(&[seed, si as u64, obj as u64]);
            let (rin, initial) = training_pair(refiner, run, scene, obj, s, bounds, &mut rng)?;
            let points = epoch_model_points(model, run.num_model_points, 0);
            let mut tape = Tape::new();
            let vars = refiner.params.bind_frozen(&mut tape);
            let gt = scene.gt_poses[obj];
            if let Some(loss) = refine_loss(refiner, &mut tape, &vars, &rin, &initial, &gt, &points, scene.symmetric[obj])? {
                sum += tape.value(loss).item();
                count += 1;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains for `run.total_epochs` epochs from scratch optimizer state; returns the per-epoch losses.
pub fn train_refiner(refiner: &mut Refiner, run: &RefinerTraining) -> Result<Vec<f64>, RefineError> {
    let mut state = AdamState::new(refiner.params.tensors());
    (0..run.total_epochs)
        .map(|e| train_refiner_epoch(refiner, run, &mut state, e))
        .collect()
}
