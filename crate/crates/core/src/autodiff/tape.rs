use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How a point set is matched against the target inside [`Tape::pose_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matching {
    /// Point `j` of the transformed source is compared with target point `j`.
    Index,
    /// Every target point is compared with its nearest transformed source point.
    Closest,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    ClampMin(usize, f64),
    Concat { a: usize, b: usize, outer: usize, a_inner: usize, b_inner: usize },
    MeanRows(usize),
    RepeatRows(usize),
    GatherRows { x: usize, rows: Vec<usize> },
    Reshape(usize),
    Conv2d { x: usize, k: usize, stride: usize },
    BiasAdd { x: usize, b: usize },
    Upsample { x: usize, factor: usize },
    NormalizeQuat(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Log(usize),
    Sum(usize),
    Mean(usize),
    PoseDistance(Box<PoseDistanceOp>),
}

#[derive(Debug)]
struct PoseDistanceOp {
    q: usize,
    t: usize,
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    /// Source index paired with each (pose, target point); empty for `Matching::Index`.
    matches: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be pulled back in
/// reverse. Single-threaded; build one tape per forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

// Rotation matrix of a unit quaternion (w, x, y, z), row-major.
pub(crate) fn quat_to_mat(q: &[f64]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

// Partial derivatives of `quat_to_mat` with respect to w, x, y, z.
fn quat_to_mat_partials(q: &[f64]) -> [[[f64; 3]; 3]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let s = |m: [[f64; 3]; 3]| m.map(|r| r.map(|v| 2.0 * v));
    [
        s([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]]),
        s([[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]]),
        s([[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]]),
        s([[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]]),
    ]
}

pub(crate) fn apply_rt(r: &[[f64; 3]; 3], t: &[f64], p: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
    ]
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::DisconnectedGraph);
        }
        Ok(v.index)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(out, op(xi), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(out, op(ai, bi), rg))
    }

    /// `x[n,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(mismatch("linear", format!("x {:?}, w {:?}, b {:?}", xs, ws, bs)));
        }
        let (n, din, dout) = (xs[0], ws[0], ws[1]);
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let row = &mut out[i * dout..(i + 1) * dout];
            row.copy_from_slice(bd);
            for k in 0..din {
                let a = xd[i * din + k];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wd[k * dout..(k + 1) * dout];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x: xi, w: wi, b: bi }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    /// `max(x, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, AutodiffError> {
        self.unary(x, |v| v.max(floor), |i| Op::ClampMin(i, floor))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, AutodiffError> {
        self.unary(x, |v| v * s, |i| Op::Scale(i, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.is_empty() {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(xi), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, AutodiffError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(mismatch("concat", format!("{:?} vs {:?} on axis {}", sa, sb, axis)));
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let (a_inner, b_inner) = (sa[axis] * tail, sb[axis] * tail);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&bv.data()[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { a: ai, b: bi, outer, a_inner, b_inner },
            rg,
        ))
    }

    /// Column means of `x[n,d]`, giving `[d]`.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(mismatch("mean_over_rows", format!("{:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(xi), rg))
    }

    /// Tiles `x[d]` into `[n,d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape().len() != 1 {
            return Err(mismatch("repeat_rows", format!("{:?}", xv.shape())));
        }
        let d = xv.len();
        let data = xv.data().repeat(n);
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::RepeatRows(xi), rg))
    }

    /// Selects rows of `x[n,d]` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 2 {
            return Err(mismatch("gather_rows", format!("{:?}", s)));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(AutodiffError::IndexOutOfBounds { index: r, len: s[0] });
        }
        let d = s[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::GatherRows { x: xi, rows: rows.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", xv.shape(), shape)));
        }
        let out = xv.reshaped(shape.to_vec());
        let rg = self.rg(&[xi]);
        Ok(self.push(out, Op::Reshape(xi), rg))
    }

    /// Zero-padded "same" convolution of `x[h,w,cin]` with `k[ks,ks,cin,cout]`.
    /// Output is `[ceil(h/stride), ceil(w/stride), cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var, AutodiffError> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let (xv, kv) = (&self.nodes[xi].value, &self.nodes[ki].value);
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || ks[2] != xs[2] || stride == 0 {
            return Err(mismatch("conv2d", format!("x {:?}, kernel {:?}, stride {}", xs, ks, stride)));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (ksz, cout) = (ks[0], ks[3]);
        let pad = ksz / 2;
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let (xd, kd) = (xv.data(), kv.data());
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..ksz {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ksz {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = (iy as usize * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let a = xd[xbase + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let kbase = ((ky * ksz + kx) * cin + ci) * cout;
                            for (ov, &kw) in o.iter_mut().zip(&kd[kbase..kbase + cout]) {
                                *ov += a * kw;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[xi, ki]);
        Ok(self.push(
            Tensor::new(vec![oh, ow, cout], out)?,
            Op::Conv2d { x: xi, k: ki, stride },
            rg,
        ))
    }

    /// Adds `b[c]` along the last axis of `x[..., c]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let (xv, bv) = (&self.nodes[xi].value, &self.nodes[bi].value);
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [c] || c == 0 {
            return Err(mismatch("bias_add", format!("x {:?}, b {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, bb) in chunk.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[xi, bi]);
        Ok(self.push(out, Op::BiasAdd { x: xi, b: bi }, rg))
    }

    /// Nearest-neighbor upsampling of `x[h,w,c]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        if s.len() != 3 || factor == 0 {
            return Err(mismatch("upsample_nearest", format!("{:?} x{}", s, factor)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                let src = ((y / factor) * w + x / factor) * c;
                data[(y * ow + x) * c..(y * ow + x + 1) * c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::new(vec![oh, ow, c], data)?, Op::Upsample { x: xi, factor }, rg))
    }

    /// Row-wise division of `x[n,4]` by its Euclidean norm.
    pub fn normalize_quaternion(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape().len() != 2 || xv.shape()[1] != 4 {
            return Err(mismatch("normalize_quaternion", format!("{:?}", xv.shape())));
        }
        let mut data = xv.data().to_vec();
        for q in data.chunks_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            q.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(out, Op::NormalizeQuat(xi), rg))
    }

    /// Mean point distance between a source set moved by each pose and a
    /// fixed target set. `q[n,4]` holds unit quaternions, `t[n,3]`
    /// translations; the result is `[n]`.
    ///
    /// With [`Matching::Index`] entry `i` is `1/M Σ_j ‖R_i s_j + t_i − y_j‖`.
    /// With [`Matching::Closest`] it is `1/M Σ_j min_k ‖y_j − (R_i s_k + t_i)‖`;
    /// the minimizing `k` is held fixed when differentiating.
    pub fn pose_distance(
        &mut self,
        q: Var,
        t: Var,
        source: &[[f64; 3]],
        target: &[[f64; 3]],
        matching: Matching,
    ) -> Result<Var, AutodiffError> {
        let (qi, ti) = (self.idx(q)?, self.idx(t)?);
        let (qv, tv) = (&self.nodes[qi].value, &self.nodes[ti].value);
        let (qs, ts) = (qv.shape(), tv.shape());
        if qs.len() != 2 || qs[1] != 4 || ts.len() != 2 || ts[1] != 3 || qs[0] != ts[0] {
            return Err(mismatch("pose_distance", format!("q {:?}, t {:?}", qs, ts)));
        }
        if source.len() != target.len() || source.is_empty() {
            return Err(mismatch(
                "pose_distance",
                format!("{} source vs {} target points", source.len(), target.len()),
            ));
        }
        let n = qs[0];
        let m = source.len();
        let mut out = vec![0.0; n];
        let mut matches = Vec::new();
        if matching == Matching::Closest {
            matches.reserve(n * m);
        }
        let mut moved = vec![[0.0; 3]; m];
        for i in 0..n {
            let r = quat_to_mat(qv.row(i));
            let tt = tv.row(i);
            for (mv, s) in moved.iter_mut().zip(source) {
                *mv = apply_rt(&r, tt, s);
            }
            let mut acc = 0.0;
            match matching {
                Matching::Index => {
                    for (p, y) in moved.iter().zip(target) {
                        acc += dist2(p, y).sqrt();
                    }
                }
                Matching::Closest => {
                    for y in target {
                        let (mut best, mut best_k) = (f64::INFINITY, 0);
                        for (k, p) in moved.iter().enumerate() {
                            let d = dist2(p, y);
                            if d < best {
                                best = d;
                                best_k = k;
                            }
                        }
                        matches.push(best_k);
                        acc += best.sqrt();
                    }
                }
            }
            out[i] = acc / m as f64;
        }
        let rg = self.rg(&[qi, ti]);
        let op = PoseDistanceOp {
            q: qi,
            t: ti,
            source: source.to_vec(),
            target: target.to_vec(),
            matches,
        };
        Ok(self.push(Tensor::from_vec(out), Op::PoseDistance(Box::new(op)), rg))
    }

    /// Reverse pass from a scalar. May be called once per recording; call
    /// [`Tape::reset`] before reusing the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyCalled);
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(AutodiffError::DisconnectedGraph);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => {
                    Some(Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        // accumulation buffer for input j, created on first use
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], j: usize, len: usize) -> &'a mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |j: usize| nodes[j].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Linear { x, w, b } => {
                let xs = nodes[x].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = nodes[w].value.shape()[1];
                if needs(x) {
                    let wd = val(w);
                    let gx = buf(grads, x, n * din);
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let wrow = &wd[k * dout..(k + 1) * dout];
                            gx[r * din + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(w) {
                    let xd = val(x);
                    let gw = buf(grads, w, din * dout);
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let a = xd[r * din + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, gv) in gw[k * dout..(k + 1) * dout].iter_mut().zip(grow) {
                                *o += a * gv;
                            }
                        }
                    }
                }
                if needs(b) {
                    let gb = buf(grads, b, dout);
                    for r in 0..n {
                        for (o, gv) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                if needs(x) {
                    let xd = val(x);
                    let gx = buf(grads, x, g.len());
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if needs(x) {
                    let yd = nodes[i].value.data();
                    let gx = buf(grads, x, g.len());
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(yd) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            &Op::ClampMin(x, floor) => {
                if needs(x) {
                    let xd = val(x);
                    let gx = buf(grads, x, g.len());
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > floor {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Log(x) => {
                if needs(x) {
                    let xd = val(x);
                    let gx = buf(grads, x, g.len());
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    let gx = buf(grads, x, g.len());
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    let ga = buf(grads, a, g.len());
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if needs(b) {
                    let gb = buf(grads, b, g.len());
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o += sign * gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bd = val(b);
                    let ga = buf(grads, a, g.len());
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if needs(b) {
                    let ad = val(a);
                    let gb = buf(grads, b, g.len());
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            &Op::Sum(x) | &Op::Mean(x) => {
                if needs(x) {
                    let len = nodes[x].value.len();
                    let scale = if matches!(nodes[i].op, Op::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                    let gx = buf(grads, x, len);
                    gx.iter_mut().for_each(|o| *o += g[0] * scale);
                }
            }
            &Op::Concat { a, b, outer, a_inner, b_inner } => {
                let stride = a_inner + b_inner;
                if needs(a) {
                    let ga = buf(grads, a, outer * a_inner);
                    for o in 0..outer {
                        for (dst, src) in ga[o * a_inner..(o + 1) * a_inner].iter_mut().zip(&g[o * stride..o * stride + a_inner]) {
                            *dst += src;
                        }
                    }
                }
                if needs(b) {
                    let gb = buf(grads, b, outer * b_inner);
                    for o in 0..outer {
                        for (dst, src) in gb[o * b_inner..(o + 1) * b_inner]
                            .iter_mut()
                            .zip(&g[o * stride + a_inner..(o + 1) * stride])
                        {
                            *dst += src;
                        }
                    }
                }
            }
            &Op::MeanRows(x) => {
                if needs(x) {
                    let s = nodes[x].value.shape();
                    let (n, d) = (s[0], s[1]);
                    let gx = buf(grads, x, n * d);
                    for r in 0..n {
                        for (o, gv) in gx[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *o += gv / n as f64;
                        }
                    }
                }
            }
            &Op::RepeatRows(x) => {
                if needs(x) {
                    let d = nodes[x].value.len();
                    let gx = buf(grads, x, d);
                    for chunk in g.chunks(d) {
                        for (o, gv) in gx.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if needs(x) {
                    let s = nodes[x].value.shape();
                    let d = s[1];
                    let gx = buf(grads, x, s[0] * d);
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, gv) in gx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if needs(x) {
                    let gx = buf(grads, x, g.len());
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            &Op::BiasAdd { x, b } => {
                let c = nodes[b].value.len();
                if needs(x) {
                    let gx = buf(grads, x, g.len());
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if needs(b) {
                    let gb = buf(grads, b, c);
                    for chunk in g.chunks(c) {
                        for (o, gv) in gb.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Upsample { x, factor } => {
                if needs(x) {
                    let s = nodes[x].value.shape();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let ow = w * factor;
                    let gx = buf(grads, x, h * w * c);
                    for y in 0..h * factor {
                        for xx in 0..ow {
                            let dst = ((y / factor) * w + xx / factor) * c;
                            let src = (y * ow + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            }
            &Op::Conv2d { x, k, stride } => {
                let xs = nodes[x].value.shape();
                let ks = nodes[k].value.shape();
                let (h, w, cin) = (xs[0], xs[1], xs[2]);
                let (ksz, cout) = (ks[0], ks[3]);
                let pad = ksz / 2;
                let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
                let (xd, kd) = (val(x), val(k));
                let mut gx = needs(x).then(|| vec![0.0; h * w * cin]);
                let mut gk = needs(k).then(|| vec![0.0; ksz * ksz * cin * cout]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for ky in 0..ksz {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..ksz {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xbase = (iy as usize * w + ix as usize) * cin;
                                for ci in 0..cin {
                                    let kbase = ((ky * ksz + kx) * cin + ci) * cout;
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xbase + ci] += go.iter().zip(&kd[kbase..kbase + cout]).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if let Some(gk) = gk.as_mut() {
                                        let a = xd[xbase + ci];
                                        if a != 0.0 {
                                            for (o, gv) in gk[kbase..kbase + cout].iter_mut().zip(go) {
                                                *o += a * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (j, local) in [(x, gx), (k, gk)] {
                    if let Some(local) = local {
                        let dst = buf(grads, j, local.len());
                        for (o, v) in dst.iter_mut().zip(local) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::NormalizeQuat(x) => {
                if needs(x) {
                    let xd = val(x);
                    let yd = nodes[i].value.data();
                    let gx = buf(grads, x, g.len());
                    for r in 0..g.len() / 4 {
                        let xr = &xd[r * 4..r * 4 + 4];
                        let yr = &yd[r * 4..r * 4 + 4];
                        let gr = &g[r * 4..r * 4 + 4];
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..4 {
                            gx[r * 4 + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
            }
            Op::PoseDistance(op) => {
                let (qi, ti) = (op.q, op.t);
                if !needs(qi) && !needs(ti) {
                    return;
                }
                let (qd, td) = (val(qi), val(ti));
                let n = g.len();
                let m = op.source.len();
                let mut gq = vec![0.0; n * 4];
                let mut gt = vec![0.0; n * 3];
                for pi in 0..n {
                    let q = &qd[pi * 4..pi * 4 + 4];
                    let r = quat_to_mat(q);
                    let t = &td[pi * 3..pi * 3 + 3];
                    let wgt = g[pi] / m as f64;
                    let mut gr = [[0.0; 3]; 3];
                    let mut gtt = [0.0; 3];
                    for (j, y) in op.target.iter().enumerate() {
                        let k = if op.matches.is_empty() { j } else { op.matches[pi * m + j] };
                        let s = &op.source[k];
                        let p = apply_rt(&r, t, s);
                        let d = [p[0] - y[0], p[1] - y[1], p[2] - y[2]];
                        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if len < 1e-300 {
                            continue;
                        }
                        for a in 0..3 {
                            let e = wgt * d[a] / len;
                            gtt[a] += e;
                            for b in 0..3 {
                                gr[a][b] += e * s[b];
                            }
                        }
                    }
                    let parts = quat_to_mat_partials(q);
                    for c in 0..4 {
                        let mut acc = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += gr[a][b] * parts[c][a][b];
                            }
                        }
                        gq[pi * 4 + c] = acc;
                    }
                    gt[pi * 3..pi * 3 + 3].copy_from_slice(&gtt);
                }
                for (j, local) in [(qi, gq), (ti, gt)] {
                    if needs(j) {
                        let dst = buf(grads, j, local.len());
                        for (o, v) in dst.iter_mut().zip(local) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}
