//! Shared test oracles. Nothing here calls into the code paths under test
//! except plain forward evaluation.
#![allow(dead_code)]

pub mod grad_suite;

use densefusion::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients with central differences (step `h`) for
/// every input tensor. `f` builds a scalar from the bound inputs. Returns the
/// worst relative error over the inputs.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");

    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let mut numeric = vec![0.0; input.len()];
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            numeric[e] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Plain ADD: mean distance between corresponding transformed points.
pub fn add_oracle(points: &[[f64; 3]], r1: &[[f64; 3]; 3], t1: &[f64; 3], r2: &[[f64; 3]; 3], t2: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for p in points {
        let a = apply(r1, t1, p);
        let b = apply(r2, t2, p);
        acc += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    acc / points.len() as f64
}

/// Closest-point distance averaged over `from` points, brute force.
pub fn closest_mean(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            best = best.min(d);
        }
        acc += best;
    }
    acc / from.len() as f64
}

pub fn apply(r: &[[f64; 3]; 3], t: &[f64; 3], p: &[f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        o[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    o
}

/// Rotation matrix from axis-angle via Rodrigues' formula.
pub fn rodrigues(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
        [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
        [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
    ]
}

/// Random rotation as a matrix (axis uniform-ish, angle uniform) plus translation.
pub fn random_rt(rng: &mut impl Rng) -> ([[f64; 3]; 3], [f64; 3]) {
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let angle = rng.random_range(-3.1..3.1);
    let t = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.3..1.0)];
    (rodrigues(axis, angle), t)
}

/// A run small enough to generate, train and evaluate in seconds, rooted at `dir`.
pub fn tiny_config(dir: &std::path::Path) -> densefusion::harness::RunConfig {
    use densefusion::harness::{BenchConfig, Paths, RunConfig};
    use densefusion::network::NetworkConfig;
    let mut cfg = RunConfig::toy();
    cfg.paths = Paths {
        dataset: dir.join("data"),
        checkpoints: dir.join("checkpoints"),
        reports: dir.join("reports"),
    };
    cfg.dataset.train_scenes = 6;
    cfg.dataset.val_scenes = 2;
    cfg.dataset.test_scenes = 3;
    cfg.network = NetworkConfig {
        d_rgb: 8,
        d_geo: 8,
        d_glob: 16,
        num_points: 64,
        encoder_channels: [4, 8],
        geo_hidden: 8,
        fusion_hidden: 16,
        head_hidden: vec![16],
        ..NetworkConfig::toy()
    };
    cfg.refiner.d_geo = 8;
    cfg.refiner.d_glob = 16;
    cfg.refiner.geo_hidden = 8;
    cfg.refiner.fusion_hidden = 16;
    cfg.refiner.hidden = [16, 8, 8];
    cfg.refiner.start_epoch = Some(2);
    cfg.epochs = 2;
    cfg.refiner_epochs = 1;
    cfg.bench = BenchConfig { frames: 3, repeats: 2 };
    cfg
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
