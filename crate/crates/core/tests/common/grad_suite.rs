//! Finite-difference cases shared by the gradient tests and the acceptance run.

use densefusion::autodiff::{Matching, Tape, Tensor, Var};
use densefusion::geometry::{PointCloud, Pose, Vec3};
use densefusion::loss::{pose_losses, total_loss};
use densefusion::network::{Architecture, Network, NetworkConfig, PreparedInput, TranslationMode};
use densefusion::refine::{Refiner, RefinerConfig};
use rand::Rng;

use super::{gradient_check, random_tensor, rng};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

// Contracts every output against fixed random weights so the check sees a
// non-trivial upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p).unwrap()
}

fn unary(x: &[Tensor], seed: u64, op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    gradient_check(x, STEP, |t, v| {
        let y = op(t, v[0]);
        weighted_sum(t, y, seed)
    })
}

fn binary(x: &[Tensor], seed: u64, op: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
    gradient_check(x, STEP, |t, v| {
        let y = op(t, v[0], v[1]);
        weighted_sum(t, y, seed)
    })
}

/// Worst relative error of every tape operation, by name.
pub fn op_cases() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));
    let mut r = rng(1);

    let lin = [
        random_tensor(&mut r, &[5, 4], -1.0, 1.0),
        random_tensor(&mut r, &[4, 3], -1.0, 1.0),
        random_tensor(&mut r, &[3], -1.0, 1.0),
    ];
    push(
        "linear",
        gradient_check(&lin, STEP, |t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y, 11)
        }),
    );

    let x = [random_tensor(&mut r, &[3, 4], -2.0, 2.0)];
    push("relu", unary(&x, 3, |t, v| t.relu(v).unwrap()));
    push("sigmoid", unary(&x, 4, |t, v| t.sigmoid(v).unwrap()));
    push("clamp_min", unary(&x, 5, |t, v| t.clamp_min(v, 0.1).unwrap()));
    push("scale", unary(&x, 6, |t, v| t.scale(v, -0.7).unwrap()));
    let pos = [random_tensor(&mut r, &[6], 0.2, 3.0)];
    push("log", unary(&pos, 7, |t, v| t.log(v).unwrap()));

    let pair = [random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[2, 3], -1.0, 1.0)];
    push("add", binary(&pair, 8, |t, a, b| t.add(a, b).unwrap()));
    push("sub", binary(&pair, 9, |t, a, b| t.sub(a, b).unwrap()));
    push("mul", binary(&pair, 10, |t, a, b| t.mul(a, b).unwrap()));
    push("sum", binary(&pair, 12, |t, a, b| {
        let p = t.mul(a, b).unwrap();
        t.sum(p).unwrap()
    }));
    push(
        "mean",
        gradient_check(&pair, STEP, |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            t.mean(y).unwrap()
        }),
    );

    let rows = [random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[4, 3], -1.0, 1.0)];
    push("concat rows", binary(&rows, 13, |t, a, b| t.concat(a, b, 0).unwrap()));
    let cols = [random_tensor(&mut r, &[3, 2], -1.0, 1.0), random_tensor(&mut r, &[3, 5], -1.0, 1.0)];
    push("concat cols", binary(&cols, 14, |t, a, b| t.concat(a, b, 1).unwrap()));

    let m = [random_tensor(&mut r, &[5, 3], -1.0, 1.0)];
    push("mean_over_rows", unary(&m, 15, |t, v| t.mean_over_rows(v).unwrap()));
    push("gather_rows", unary(&m, 16, |t, v| t.gather_rows(v, &[4, 0, 0, 2]).unwrap()));
    push("reshape", unary(&m, 17, |t, v| t.reshape(v, &[3, 5]).unwrap()));
    let d = [random_tensor(&mut r, &[4], -1.0, 1.0)];
    push("repeat_rows", unary(&d, 18, |t, v| t.repeat_rows(v, 3).unwrap()));

    let conv = [random_tensor(&mut r, &[5, 6, 2], -1.0, 1.0), random_tensor(&mut r, &[3, 3, 2, 3], -1.0, 1.0)];
    push("conv2d stride 1", binary(&conv, 19, |t, a, b| t.conv2d(a, b, 1).unwrap()));
    push("conv2d stride 2", binary(&conv, 20, |t, a, b| t.conv2d(a, b, 2).unwrap()));
    let k1 = [random_tensor(&mut r, &[4, 4, 3], -1.0, 1.0), random_tensor(&mut r, &[1, 1, 3, 2], -1.0, 1.0)];
    push("conv2d 1x1", binary(&k1, 21, |t, a, b| t.conv2d(a, b, 1).unwrap()));
    let xb = [random_tensor(&mut r, &[3, 2, 4], -1.0, 1.0), random_tensor(&mut r, &[4], -1.0, 1.0)];
    push("bias_add", binary(&xb, 22, |t, a, b| t.bias_add(a, b).unwrap()));
    let up = [random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0)];
    push("upsample_nearest", unary(&up, 23, |t, v| t.upsample_nearest(v, 2).unwrap()));

    let q = [random_tensor(&mut r, &[4, 4], -1.0, 1.0)];
    push("normalize_quaternion", unary(&q, 24, |t, v| t.normalize_quaternion(v).unwrap()));

    let src: Vec<[f64; 3]> = (0..30)
        .map(|_| [r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)])
        .collect();
    let tgt: Vec<[f64; 3]> = src.iter().map(|p| [p[1] + 0.02, -p[0], p[2] + 0.5]).collect();
    let pose_in = [random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[3, 3], -0.1, 0.6)];
    for (name, matching) in [("pose_distance index", Matching::Index), ("pose_distance closest", Matching::Closest)] {
        push(
            name,
            gradient_check(&pose_in, STEP, |t, v| {
                let q = t.normalize_quaternion(v[0]).unwrap();
                let d = t.pose_distance(q, v[1], &src, &tgt, matching).unwrap();
                weighted_sum(t, d, 25)
            }),
        );
    }
    out
}

fn jitter(params: &mut [Tensor], seed: u64) {
    let mut r = rng(seed);
    for t in params {
        for x in t.data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
}

/// Network small enough that every parameter can be perturbed one at a time.
pub fn micro_network(architecture: Architecture) -> Network {
    Network::new(NetworkConfig {
        d_rgb: 3,
        d_geo: 4,
        d_glob: 5,
        num_points: 8,
        encoder_channels: [2, 3],
        geo_hidden: 4,
        fusion_hidden: 5,
        head_hidden: vec![4],
        architecture,
        translation: TranslationMode::Offset,
        center_points: true,
        point_scale: 10.0,
        seed: 5,
    })
    .unwrap()
}

/// 8 observed points on an 8x8 crop, plus model points and a ground truth.
pub fn micro_instance(seed: u64) -> (PreparedInput, Vec<[f64; 3]>, Pose) {
    let mut r = rng(seed);
    let crop = random_tensor(&mut r, &[8, 8, 3], -0.5, 0.5);
    let mut pixels: Vec<[usize; 2]> = Vec::new();
    while pixels.len() < 8 {
        let p = [r.random_range(0..8), r.random_range(0..8)];
        if !pixels.contains(&p) {
            pixels.push(p);
        }
    }
    let points: Vec<Vec3> = (0..8)
        .map(|_| Vec3::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(0.55..0.65)))
        .collect();
    let mut cloud = PointCloud::from_points(points);
    cloud.pixel_index = Some(pixels.clone());
    let input = PreparedInput {
        crop,
        origin: (0, 0),
        cloud,
        crop_index: pixels,
    };
    let model: Vec<[f64; 3]> = (0..12)
        .map(|_| [r.random_range(-0.04..0.04), r.random_range(-0.04..0.04), r.random_range(-0.04..0.04)])
        .collect();
    let gt = Pose::from_axis_angle([0.3, -1.0, 0.4], 0.6, [0.01, -0.02, 0.6]);
    (input, model, gt)
}

/// Full confidence-weighted objective of the per-pixel network, differentiated
/// with respect to every network parameter.
pub fn end_to_end_error(symmetric: bool) -> f64 {
    let mut net = micro_network(Architecture::PerPixel);
    // zero biases over a dead channel sit exactly on the ReLU kink
    jitter(net.params.tensors_mut(), 30);
    let (input, model, gt) = micro_instance(31);
    gradient_check(net.params.tensors(), STEP, |t, v| {
        let out = net.forward(t, v, &input).unwrap();
        let losses = pose_losses(t, out.rotation, out.translation, &model, &gt, symmetric).unwrap();
        total_loss(t, losses, out.confidence.unwrap(), 0.01).unwrap()
    })
}

/// One refinement step scored against the remaining error, differentiated
/// with respect to every refiner parameter and the color map.
pub fn refiner_step_error() -> f64 {
    let cfg = RefinerConfig {
        d_geo: 4,
        d_glob: 5,
        geo_hidden: 4,
        fusion_hidden: 5,
        hidden: [4, 4, 3],
        ..RefinerConfig::default()
    };
    let mut refiner = Refiner::new(cfg, 3);
    // the fresh output layer is zero, which would hide the trunk's gradient
    jitter(refiner.params.tensors_mut(), 40);
    let mut r = rng(42);
    let (input, model, gt) = micro_instance(41);
    let current = Pose::from_axis_angle([1.0, 0.2, 0.0], 0.1, [0.0, -0.01, 0.61]);
    let remaining = current.inverse().compose(&gt);
    let color = random_tensor(&mut r, &[8, 8, 3], -1.0, 1.0);
    let mut ins = refiner.params.tensors().to_vec();
    ins.push(color);
    let n = ins.len() - 1;
    gradient_check(&ins, STEP, |t, v| {
        let (q, tr) = refiner
            .refine_step(t, &v[..n], &input.cloud.points, v[n], &input.crop_index, &current)
            .unwrap();
        let l = pose_losses(t, q, tr, &model, &remaining, false).unwrap();
        t.mean(l).unwrap()
    })
}
