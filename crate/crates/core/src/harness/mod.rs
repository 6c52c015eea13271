//! Command implementations behind the `densefusion` binary: dataset
//! generation, training, evaluation and benchmarking. Every command writes
//! into a fresh timestamped directory under the configured reports path,
//! starting with a copy of the resolved config.

mod config;
mod overlay;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{BenchConfig, Paths, RunConfig};
pub use overlay::{ppm_bytes, render_overlay, write_overlay};

use crate::autodiff::{read_checkpoint, write_checkpoint, AdamState, Checkpoint, ParamStore, Tensor};
use crate::data::{
    corrupt_mask, generate_scene, load_dataset, make_model, save_models, save_scene, write_manifest, DataError,
    ObjectModel, Scene,
};
use crate::geometry::{Pose, Vec3};
use crate::icp::icp_refine_points;
use crate::loss::{epoch_model_points, evaluate_loss, training_step, LossError};
use crate::metrics::{evaluate, EvalReport, MetricsError, StageTimings};
use crate::network::{Architecture, Network, NetworkError};
use crate::refine::{
    refiner_gate, refiner_loss, train_refiner_epoch, RefineError, RefineInput, Refiner, RefinerTraining,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("variant {variant} needs {needs}")]
    VariantMismatch { variant: Variant, needs: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Pose pipeline evaluated by `cmd_eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One pose from the pooled dense-fusion feature.
    Single,
    /// Highest-confidence per-pixel hypothesis.
    PerPixel,
    /// Per-pixel estimate followed by the neural refiner.
    Iterative,
    /// Per-pixel estimate followed by ICP.
    Icp,
    /// One pose from separately pooled color and geometry features.
    GlobalFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Single,
        Variant::PerPixel,
        Variant::Iterative,
        Variant::Icp,
        Variant::GlobalFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::PerPixel => "per-pixel",
            Variant::Iterative => "iterative",
            Variant::Icp => "icp",
            Variant::GlobalFusion => "global-fusion",
        }
    }

    /// Architecture the checkpoint must have, if the variant fixes one.
    fn architecture(self) -> Option<Architecture> {
        match self {
            Variant::Single => Some(Architecture::Single),
            Variant::PerPixel => Some(Architecture::PerPixel),
            Variant::GlobalFusion => Some(Architecture::GlobalFusion),
            Variant::Iterative | Variant::Icp => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            HarnessError::Config(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
        })
    }
}

/// Creates `<reports>/<UTC timestamp>-<label>` (suffixed if taken) and writes the resolved config into it.
pub fn create_report_dir(cfg: &RunConfig, label: &str) -> Result<PathBuf, HarnessError> {
    let root = &cfg.paths.reports;
    std::fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("{stamp}-{label}"));
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{label}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn build_models(cfg: &RunConfig) -> Result<Vec<ObjectModel>, HarnessError> {
    Ok(cfg.dataset.objects.iter().map(make_model).collect::<Result<_, _>>()?)
}

/// Split names and their scene counts, in generation order.
pub fn splits(cfg: &RunConfig) -> [(&'static str, usize); 3] {
    [
        ("train", cfg.dataset.train_scenes),
        ("val", cfg.dataset.val_scenes),
        ("test", cfg.dataset.test_scenes),
    ]
}

/// Writes `models.json`, `dataset.json` and one directory per split with a
/// manifest. Shapes are validated before anything is written.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let models = build_models(cfg)?;
    let root = &cfg.paths.dataset;
    std::fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
    save_models(&root.join("models.json"), &cfg.dataset.objects)?;
    let spec = serde_json::to_string_pretty(&cfg.dataset).expect("dataset spec serializes");
    write_file(&root.join("dataset.json"), spec.as_bytes())?;
    for (split, count) in splits(cfg) {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let scene = generate_scene(&cfg.dataset, &models, split, i)?;
            let name = format!("scene_{i:05}.dfs");
            save_scene(&scene, &dir.join(&name))?;
            entries.push(name);
        }
        write_manifest(&dir.join("manifest.txt"), &entries)?;
        log::info!("{split}: {count} scenes");
    }
    Ok(root.clone())
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Main,
    Refiner,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Main => "main",
            Stage::Refiner => "refiner",
        }
    }
}

/// Training progress stored next to the weights so a run can resume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct TrainState {
    log: Vec<EpochLog>,
    /// Main epochs completed.
    main_epochs: usize,
    /// Refiner epochs completed.
    refiner_epochs: usize,
    /// Main-network training has ended, by the gate or by the epoch budget.
    main_done: bool,
    main_step: u64,
    refiner_step: u64,
}

fn moments_store(like: &ParamStore, moments: &[Vec<f64>]) -> ParamStore {
    let mut store = ParamStore::new();
    for ((name, t), m) in like.names().iter().zip(like.tensors()).zip(moments) {
        store.add(name.clone(), Tensor::new(t.shape().to_vec(), m.clone()).expect("moment shape"));
    }
    store
}

fn save_adam(ckpt: &mut Checkpoint, prefix: &str, params: &ParamStore, state: &AdamState) {
    if state.m.len() == params.len() {
        ckpt.set_section(&format!("{prefix}.adam_m"), moments_store(params, &state.m));
        ckpt.set_section(&format!("{prefix}.adam_v"), moments_store(params, &state.v));
    }
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, params: &ParamStore, step: u64) -> AdamState {
    let m = ckpt.section(&format!("{prefix}.adam_m"));
    let v = ckpt.section(&format!("{prefix}.adam_v"));
    match (m, v) {
        (Some(m), Some(v)) if m.len() == params.len() && v.len() == params.len() => AdamState {
            step,
            m: m.tensors().iter().map(|t| t.data().to_vec()).collect(),
            v: v.tensors().iter().map(|t| t.data().to_vec()).collect(),
        },
        _ => AdamState::new(params.tensors()),
    }
}

fn train_checkpoint(
    net: &Network,
    refiner: &Refiner,
    state: &TrainState,
    main_adam: &AdamState,
    refiner_adam: &AdamState,
) -> Checkpoint {
    let mut ckpt = net.to_checkpoint();
    refiner.write_into(&mut ckpt);
    let mut meta: serde_json::Value = serde_json::from_str(ckpt.meta.as_deref().unwrap_or("{}")).expect("meta is json");
    meta["train"] = serde_json::to_value(state).expect("train state serializes");
    ckpt.meta = Some(meta.to_string());
    save_adam(&mut ckpt, "main", &net.params, main_adam);
    save_adam(&mut ckpt, "refiner", &refiner.params, refiner_adam);
    ckpt
}

fn train_state(ckpt: &Checkpoint) -> TrainState {
    ckpt.meta
        .as_deref()
        .and_then(|m| serde_json::from_str::<serde_json::Value>(m).ok())
        .and_then(|m| serde_json::from_value(m["train"].clone()).ok())
        .unwrap_or_default()
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
    pub log: Vec<EpochLog>,
    /// Main epoch at which the refiner gate opened, if it did.
    pub gate_epoch: Option<usize>,
}

pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,stage,train_loss,val_loss\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.stage.name(), e.train_loss, e.val_loss);
    }
    s
}

/// Trains the main network until the epoch budget runs out or the refiner
/// gate opens, then trains the refiner against the frozen main network.
/// With `resume`, continues from that checkpoint's weights, optimizer
/// moments and log. The checkpoint is rewritten after every epoch.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (models, train) = load_dataset(&cfg.paths.dataset, "train")?;
    let (_, val) = load_dataset(&cfg.paths.dataset, "val")?;
    if train.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    let report_dir = create_report_dir(cfg, "train")?;
    let ckpt_dir = &cfg.paths.checkpoints;
    std::fs::create_dir_all(ckpt_dir).map_err(|e| HarnessError::io(ckpt_dir, e))?;
    let ckpt_path = ckpt_dir.join("model.ckpt");

    let (mut net, mut refiner, mut state, mut main_adam, mut refiner_adam) = match resume {
        Some(path) => {
            let ckpt = read_checkpoint(path).map_err(|_| RefineError::MissingCheckpoint(path.display().to_string()))?;
            let net = Network::from_checkpoint(&ckpt)?;
            let refiner = match Refiner::from_checkpoint(&ckpt)? {
                Some(r) => r,
                None => Refiner::new(cfg.refiner.clone(), net.config.d_rgb),
            };
            let st = train_state(&ckpt);
            let main_adam = load_adam(&ckpt, "main", &net.params, st.main_step);
            let refiner_adam = load_adam(&ckpt, "refiner", &refiner.params, st.refiner_step);
            (net, refiner, st, main_adam, refiner_adam)
        }
        None => {
            let net = Network::new(cfg.network.clone())?;
            let refiner = Refiner::new(cfg.refiner.clone(), net.config.d_rgb);
            let main_adam = AdamState::new(net.params.tensors());
            let refiner_adam = AdamState::new(refiner.params.tensors());
            (net, refiner, TrainState::default(), main_adam, refiner_adam)
        }
    };
    let val_seed = crate::loss::mix_seed(&[cfg.seed, 0x7661_6c]);
    let val_losses = |st: &TrainState| -> Vec<f64> {
        st.log.iter().filter(|e| e.stage == Stage::Main).map(|e| e.val_loss).collect()
    };
    let mut gate_epoch = None;

    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    // replay earlier shuffles so a resumed run sees the same batches
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..state.main_epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
    }
    while !state.main_done && state.main_epochs < cfg.epochs {
        let epoch = state.main_epochs;
        if epoch > 0 && refiner_gate(epoch, &val_losses(&state), &refiner.config) {
            gate_epoch = Some(epoch);
            state.main_done = true;
            break;
        }
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        let opts = cfg.train_options(epoch);
        let started = Instant::now();
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = crate::loss::mix_seed(&[cfg.seed, epoch as u64, bi as u64]);
            let (s, c) = training_step(&mut net, &batch, &models, &mut main_adam, &cfg.loss, &opts, epoch, step_seed, None)?;
            sum += s;
            count += c;
        }
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(&net, &val, &models, &cfg.loss, &opts, val_seed)?
        };
        let row = EpochLog {
            epoch,
            stage: Stage::Main,
            train_loss: sum / count.max(1) as f64,
            val_loss,
        };
        log::info!(
            "main epoch {epoch}: train {:.6} val {:.6} ({:.1}s)",
            row.train_loss,
            row.val_loss,
            started.elapsed().as_secs_f64()
        );
        state.log.push(row);
        state.main_epochs += 1;
        state.main_step = main_adam.step;
        write_checkpoint(&ckpt_path, &train_checkpoint(&net, &refiner, &state, &main_adam, &refiner_adam))?;
    }
    let opts = cfg.train_options(0);
    if !state.main_done && refiner_gate(state.main_epochs, &val_losses(&state), &refiner.config) {
        gate_epoch = Some(state.main_epochs);
        state.main_done = true;
    }

    if state.main_done && cfg.refiner_epochs > 0 {
        let adam = crate::autodiff::AdamConfig {
            lr: cfg.refiner_lr,
            ..opts.adam
        };
        let run = RefinerTraining {
            main: &net,
            scenes: &train,
            models: &models,
            opts: &opts,
            adam: &adam,
            num_model_points: cfg.loss.num_model_points,
            batch_size: cfg.batch_size,
            total_epochs: cfg.refiner_epochs,
        };
        let val_run = RefinerTraining { scenes: &val, ..run };
        while state.refiner_epochs < cfg.refiner_epochs {
            let epoch = state.refiner_epochs;
            let started = Instant::now();
            let train_loss = train_refiner_epoch(&mut refiner, &run, &mut refiner_adam, epoch)?;
            let val_loss = if val.is_empty() { f64::NAN } else { refiner_loss(&refiner, &val_run, val_seed)? };
            log::info!(
                "refiner epoch {epoch}: train {train_loss:.6} val {val_loss:.6} ({:.1}s)",
                started.elapsed().as_secs_f64()
            );
            state.log.push(EpochLog {
                epoch,
                stage: Stage::Refiner,
                train_loss,
                val_loss,
            });
            state.refiner_epochs += 1;
            state.refiner_step = refiner_adam.step;
            write_checkpoint(&ckpt_path, &train_checkpoint(&net, &refiner, &state, &main_adam, &refiner_adam))?;
        }
    } else if !state.main_done {
        log::warn!(
            "refiner gate still closed after {} epochs; set refiner.start_epoch to train it anyway",
            state.main_epochs
        );
    }
    write_checkpoint(&ckpt_path, &train_checkpoint(&net, &refiner, &state, &main_adam, &refiner_adam))?;
    write_file(&report_dir.join("loss.csv"), loss_csv(&state.log).as_bytes())?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        report_dir,
        log: state.log,
        gate_epoch,
    })
}

/// A trained network and, when present, its refiner.
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub refiner: Option<Refiner>,
    /// Refiner epochs completed according to the checkpoint.
    pub refiner_epochs: usize,
}

pub fn load_trained(path: &Path) -> Result<Trained, HarnessError> {
    let (network, ckpt) = crate::refine::load_main(path)?;
    let refiner = Refiner::from_checkpoint(&ckpt)?;
    Ok(Trained {
        network,
        refiner,
        refiner_epochs: train_state(&ckpt).refiner_epochs,
    })
}

/// Everything an estimator needs for one run.
pub struct Estimator<'a> {
    pub cfg: &'a RunConfig,
    pub trained: &'a Trained,
    pub variant: Variant,
    /// Return the ground-truth pose instead of estimating.
    pub oracle: bool,
    icp_points: Vec<(u32, Vec<Vec3>)>,
}

impl<'a> Estimator<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        trained: &'a Trained,
        variant: Variant,
        oracle: bool,
        models: &[ObjectModel],
    ) -> Result<Self, HarnessError> {
        if !oracle {
            if let Some(arch) = variant.architecture() {
                if trained.network.config.architecture != arch {
                    return Err(HarnessError::VariantMismatch {
                        variant,
                        needs: format!("a {arch:?} checkpoint, got {:?}", trained.network.config.architecture),
                    });
                }
            }
            if variant == Variant::Iterative && trained.refiner.is_none() {
                return Err(HarnessError::VariantMismatch {
                    variant,
                    needs: "a checkpoint with a trained refiner".into(),
                });
            }
        }
        let icp_points = models
            .iter()
            .map(|m| {
                let pts = epoch_model_points(m, cfg.icp_model_points, 0);
                (m.id, pts.into_iter().map(Vec3::from).collect())
            })
            .collect();
        Ok(Self {
            cfg,
            trained,
            variant,
            oracle,
            icp_points,
        })
    }

    fn seed(&self, scene: usize, obj: usize) -> u64 {
        crate::loss::mix_seed(&[self.cfg.seed, 0x6576_616c, scene as u64, obj as u64])
    }

    /// Pose of object `obj` of `scene` (index `si`) and per-stage wall-clock.
    pub fn estimate(&self, scene: &Scene, si: usize, obj: usize) -> Result<(Pose, StageTimings), HarnessError> {
        if self.oracle {
            return Ok((scene.gt_poses[obj], StageTimings::default()));
        }
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let mask = match self.cfg.eval_mask_corruption {
            Some((dilation, leak)) => corrupt_mask(&scene.masks[obj], dilation, leak, self.seed(si, obj)),
            None => scene.masks[obj].clone(),
        };
        timings.segmentation = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let est = self.trained.network.estimate(scene, scene.object_ids[obj], &mask, self.seed(si, obj))?;
        timings.estimation = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let pose = match self.variant {
            Variant::Iterative => {
                let refiner = self.trained.refiner.as_ref().expect("checked in new");
                let input = RefineInput::new(&est.input, est.color_map);
                refiner.refine(&est.pose, &input, refiner.config.iterations)?.0
            }
            Variant::Icp => {
                let id = scene.object_ids[obj];
                let points = &self.icp_points.iter().find(|(i, _)| *i == id).expect("model exists").1;
                // too few correspondences leaves the network estimate in place
                icp_refine_points(&est.input.cloud, points, &est.pose, &self.cfg.icp).map_or(est.pose, |r| r.pose)
            }
            _ => est.pose,
        };
        timings.refinement = t.elapsed().as_secs_f64();
        Ok((pose, timings))
    }
}

/// Result of [`cmd_eval`].
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_dir: PathBuf,
}

/// Writes the table, JSON report, occlusion and distance CSVs of `report` into `dir`.
pub fn write_eval_reports(dir: &Path, title: &str, report: &EvalReport) -> Result<(), HarnessError> {
    write_file(&dir.join("table.txt"), report.to_table(title).as_bytes())?;
    write_file(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("occlusion.csv"), report.occlusion_csv().as_bytes())?;
    write_file(&dir.join("distances.csv"), report.distances_csv().as_bytes())?;
    Ok(())
}

/// Evaluates `variant` of the checkpoint on `split` and writes reports and overlays.
pub fn cmd_eval_split(
    cfg: &RunConfig,
    checkpoint: &Path,
    variant: Variant,
    oracle: bool,
    split: &str,
) -> Result<EvalOutcome, HarnessError> {
    let (models, scenes) = load_dataset(&cfg.paths.dataset, split)?;
    let trained = if oracle {
        Trained {
            network: Network::new(cfg.network.clone())?,
            refiner: None,
            refiner_epochs: 0,
        }
    } else {
        load_trained(checkpoint)?
    };
    let est = Estimator::new(cfg, &trained, variant, oracle, &models)?;
    let mut poses: Vec<Vec<(u32, Pose)>> = vec![Vec::new(); scenes.len()];
    let report = evaluate(
        &scenes,
        &models,
        |scene, si, obj| {
            let r = est.estimate(scene, si, obj);
            if let Ok((pose, _)) = &r {
                poses[si].push((scene.object_ids[obj], *pose));
            }
            r
        },
        &cfg.eval,
    )?;
    let label = if oracle { format!("eval-{variant}-oracle") } else { format!("eval-{variant}") };
    let dir = create_report_dir(cfg, &label)?;
    write_eval_reports(&dir, &format!("{label} ({split})"), &report)?;
    if cfg.overlays {
        let odir = dir.join("overlays");
        std::fs::create_dir_all(&odir).map_err(|e| HarnessError::io(&odir, e))?;
        for (si, scene) in scenes.iter().enumerate() {
            write_overlay(&odir.join(format!("scene_{si:05}_{variant}.ppm")), scene, &models, &poses[si])?;
        }
    }
    Ok(EvalOutcome { report, report_dir: dir })
}

/// Evaluates on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, variant: Variant, oracle: bool) -> Result<EvalOutcome, HarnessError> {
    cmd_eval_split(cfg, checkpoint, variant, oracle, "test")
}

/// Seconds per frame of each stage: mean over repeats and the spread between repeats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repeats: usize,
    pub segmentation: StageStats,
    pub estimation: StageStats,
    pub refinement: StageStats,
    pub icp: StageStats,
    /// Segmentation, estimation and neural refinement together.
    pub all: StageStats,
}

fn stats(xs: &[f64]) -> StageStats {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    StageStats { mean, stddev: var.sqrt() }
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seconds per frame, {} frames x {} repeats", self.frames, self.repeats);
        let _ = writeln!(s, "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12}", "", "Seg", "PE", "Refine", "ICP", "ALL");
        let cols = [self.segmentation, self.estimation, self.refinement, self.icp, self.all];
        let _ = write!(s, "{:<8}", "mean");
        for c in cols {
            let _ = write!(s, " {:>12.6}", c.mean);
        }
        let _ = write!(s, "\n{:<8}", "stddev");
        for c in cols {
            let _ = write!(s, " {:>12.6}", c.stddev);
        }
        s.push('\n');
        s
    }
}

/// Times segmentation lookup, estimation, neural refinement and ICP per
/// frame on the test split. Each repeat walks `bench.frames` frames, cycling
/// through the split if it is shorter.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: &Path) -> Result<(BenchReport, PathBuf), HarnessError> {
    let (models, scenes) = load_dataset(&cfg.paths.dataset, "test")?;
    if scenes.is_empty() {
        return Err(MetricsError::EmptyDataset.into());
    }
    let mut trained = load_trained(checkpoint)?;
    if trained.refiner.is_none() {
        log::warn!("checkpoint has no refiner; timing an untrained one");
        trained.refiner = Some(Refiner::new(cfg.refiner.clone(), trained.network.config.d_rgb));
    }
    let neural = Estimator::new(cfg, &trained, Variant::Iterative, false, &models)?;
    let icp = Estimator::new(cfg, &trained, Variant::Icp, false, &models)?;
    let frames = cfg.bench.frames.max(1);
    let repeats = cfg.bench.repeats.max(1);
    let mut per_repeat: [Vec<f64>; 5] = Default::default();
    for _ in 0..repeats {
        let mut sums = [0.0; 5];
        for f in 0..frames {
            let si = f % scenes.len();
            let scene = &scenes[si];
            for obj in 0..scene.num_objects() {
                let (_, a) = neural.estimate(scene, si, obj)?;
                let (_, b) = icp.estimate(scene, si, obj)?;
                sums[0] += a.segmentation;
                sums[1] += a.estimation;
                sums[2] += a.refinement;
                sums[3] += b.refinement;
                sums[4] += a.total();
            }
        }
        for (acc, s) in per_repeat.iter_mut().zip(sums) {
            acc.push(s / frames as f64);
        }
    }
    let report = BenchReport {
        frames,
        repeats,
        segmentation: stats(&per_repeat[0]),
        estimation: stats(&per_repeat[1]),
        refinement: stats(&per_repeat[2]),
        icp: stats(&per_repeat[3]),
        all: stats(&per_repeat[4]),
    };
    let dir = create_report_dir(cfg, "bench")?;
    write_file(&dir.join("bench.txt"), report.to_table().as_bytes())?;
    write_file(
        &dir.join("bench.json"),
        serde_json::to_string_pretty(&report).expect("bench report serializes").as_bytes(),
    )?;
    Ok((report, dir))
}
