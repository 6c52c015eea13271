//! The dense-fusion pose estimator.
//!
//! A small encoder-decoder turns the image crop into a per-pixel color
//! embedding. A shared point MLP with a mean-pooled summary embeds the masked
//! cloud. Each point's geometry feature is paired with the color feature at
//! its source pixel, a fusion MLP over the pairs is mean-pooled into a global
//! feature, and pose heads run on every fused row (or once on the global
//! feature for the single-prediction architectures).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Mask, Scene};
use crate::geometry::{GeometryError, PointCloud, Pose, Vec3};

/// Floor applied to the sigmoid confidence so its log stays finite.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("pixel index {index:?} outside a {height}x{width} color map")]
    IndexOutOfBounds { index: [usize; 2], height: usize, width: usize },
    #[error("no predictions to select from")]
    EmptyPredictionList,
    #[error("mask has no pixels")]
    EmptyMask,
    #[error("no masked pixel has a depth return")]
    NoValidDepth,
    #[error("object {0} is not in the scene")]
    UnknownObject(u32),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Where the pose heads read their input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// One pose and confidence per fused point.
    PerPixel,
    /// One pose from the pooled dense-fusion feature.
    Single,
    /// One pose from separately pooled color and geometry features.
    GlobalFusion,
}

/// What the translation head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranslationMode {
    /// The object translation in the camera frame.
    Absolute,
    /// An offset from the point the row was computed for (the cloud centroid
    /// for single-prediction architectures).
    Offset,
    /// An offset from the centroid of the observed cloud, for every row.
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub d_rgb: usize,
    pub d_geo: usize,
    pub d_glob: usize,
    /// Points sampled from the masked cloud.
    pub num_points: usize,
    /// Output widths of the two encoder convolutions; the second downsamples.
    pub encoder_channels: [usize; 2],
    pub geo_hidden: usize,
    pub fusion_hidden: usize,
    pub head_hidden: Vec<usize>,
    pub architecture: Architecture,
    pub translation: TranslationMode,
    /// Subtract the sampled cloud's centroid before the geometry embedding.
    pub center_points: bool,
    /// Factor applied to point coordinates fed to the geometry embedding.
    pub point_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d_rgb: 128,
            d_geo: 128,
            d_glob: 256,
            num_points: 500,
            encoder_channels: [16, 32],
            geo_hidden: 64,
            fusion_hidden: 256,
            head_hidden: vec![128, 64],
            architecture: Architecture::PerPixel,
            translation: TranslationMode::Absolute,
            center_points: false,
            point_scale: 1.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Widths small enough to train on one CPU core in minutes.
    pub fn toy() -> Self {
        Self {
            d_rgb: 32,
            d_geo: 32,
            d_glob: 64,
            encoder_channels: [8, 16],
            geo_hidden: 32,
            fusion_hidden: 64,
            head_hidden: vec![64, 32],
            translation: TranslationMode::Centroid,
            center_points: true,
            point_scale: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let widths = [
            self.d_rgb,
            self.d_geo,
            self.d_glob,
            self.encoder_channels[0],
            self.encoder_channels[1],
            self.geo_hidden,
            self.fusion_hidden,
        ];
        if widths.contains(&0) || self.head_hidden.contains(&0) {
            return Err(NetworkError::InvalidConfig("layer widths must be positive".into()));
        }
        if !(self.point_scale > 0.0 && self.point_scale.is_finite()) {
            return Err(NetworkError::InvalidConfig("point_scale must be positive".into()));
        }
        if self.num_points == 0 {
            return Err(NetworkError::InvalidConfig("num_points must be positive".into()));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        match self.architecture {
            Architecture::PerPixel => self.d_rgb + self.d_geo + self.d_glob,
            Architecture::Single | Architecture::GlobalFusion => self.d_glob,
        }
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_he(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out]);
        Self { w, b }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AutodiffError> {
        tape.linear(x, vars[self.w.0], vars[self.b.0])
    }

    pub(crate) fn apply_relu(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AutodiffError> {
        let y = self.apply(tape, vars, x)?;
        tape.relu(y)
    }

    pub(crate) fn weight(&self) -> ParamId {
        self.w
    }

    pub(crate) fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    k: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, size: usize, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = size * size * cin;
        let k = store.add_he(format!("{name}.k"), &[size, size, cin, cout], fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Self { k, b, stride }
    }

    fn apply_relu(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AutodiffError> {
        let y = tape.conv2d(x, vars[self.k.0], self.stride)?;
        let y = tape.bias_add(y, vars[self.b.0])?;
        tape.relu(y)
    }
}

/// Hidden layers with ReLU, then a linear output layer.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub(crate) fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Result<Var, AutodiffError> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = if i == last { l.apply(tape, vars, x)? } else { l.apply_relu(tape, vars, x)? };
        }
        Ok(x)
    }

    pub(crate) fn output(&self) -> Dense {
        *self.layers.last().expect("mlp has layers")
    }
}

/// Shared point MLP whose mean-pooled hidden features are appended to every
/// point before the output layer.
#[derive(Debug, Clone)]
pub(crate) struct PointEncoder {
    first: Dense,
    second: Dense,
}

impl PointEncoder {
    pub(crate) fn new(store: &mut ParamStore, name: &str, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Dense::new(store, &format!("{name}.0"), 3, hidden, rng),
            second: Dense::new(store, &format!("{name}.1"), 2 * hidden, out, rng),
        }
    }

    /// `points[P,3] -> (features[P,out], pooled summary[hidden])`.
    pub(crate) fn apply(&self, tape: &mut Tape, vars: &[Var], points: Var) -> Result<(Var, Var), NetworkError> {
        let p = tape.shape(points)[0];
        if p == 0 {
            return Err(NetworkError::EmptyCloud);
        }
        let h = self.first.apply_relu(tape, vars, points)?;
        let pooled = tape.mean_over_rows(h)?;
        let spread = tape.repeat_rows(pooled, p)?;
        let cat = tape.concat(h, spread, 1)?;
        Ok((self.second.apply_relu(tape, vars, cat)?, pooled))
    }
}

/// Pairs color and geometry rows, then a two-layer MLP mean-pooled to `d_glob`.
#[derive(Debug, Clone)]
pub(crate) struct Fusion {
    first: Dense,
    second: Dense,
}

impl Fusion {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_glob: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Dense::new(store, &format!("{name}.0"), d_in, hidden, rng),
            second: Dense::new(store, &format!("{name}.1"), hidden, d_glob, rng),
        }
    }

    /// Per-row MLP output `[n, d_glob]`.
    pub(crate) fn rows(&self, tape: &mut Tape, vars: &[Var], pairs: Var) -> Result<Var, AutodiffError> {
        let h = self.first.apply_relu(tape, vars, pairs)?;
        self.second.apply_relu(tape, vars, h)
    }
}

/// Looks up `color_map[h,w,d]` at each `(row, col)`, giving `[P, d]`.
pub(crate) fn gather_pixels(tape: &mut Tape, color_map: Var, pixel_index: &[[usize; 2]]) -> Result<Var, NetworkError> {
    let s = tape.shape(color_map).to_vec();
    if s.len() != 3 {
        return Err(AutodiffError::ShapeMismatch {
            op: "gather_pixels",
            detail: format!("color map {:?}", s),
        }
        .into());
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut rows = Vec::with_capacity(pixel_index.len());
    for &[r, c] in pixel_index {
        if r >= h || c >= w {
            return Err(NetworkError::IndexOutOfBounds { index: [r, c], height: h, width: w });
        }
        rows.push(r * w + c);
    }
    let flat = tape.reshape(color_map, &[h * w, d])?;
    Ok(tape.gather_rows(flat, &rows)?)
}

/// Pixel-wise fusion: `concat(color[i], geo[i], global)` per row, with the
/// global feature the mean of the fusion MLP over all pairs.
pub(crate) fn fuse_with(
    fusion: &Fusion,
    tape: &mut Tape,
    vars: &[Var],
    color_map: Var,
    geo: Var,
    pixel_index: &[[usize; 2]],
) -> Result<(Var, Var), NetworkError> {
    let color = gather_pixels(tape, color_map, pixel_index)?;
    let pairs = tape.concat(color, geo, 1)?;
    let rows = fusion.rows(tape, vars, pairs)?;
    let global = tape.mean_over_rows(rows)?;
    let n = tape.shape(pairs)[0];
    let spread = tape.repeat_rows(global, n)?;
    let fused = tape.concat(pairs, spread, 1)?;
    Ok((fused, global))
}

#[derive(Debug, Clone)]
struct Layout {
    enc: [Conv; 2],
    dec: Conv,
    proj: Conv,
    geo: PointEncoder,
    fusion: Fusion,
    rot: Mlp,
    trans: Mlp,
    conf: Option<Mlp>,
}

/// A network's configuration and parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Outputs of one forward pass, all recorded on the caller's tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub color_map: Var,
    pub geo: Var,
    pub fused: Var,
    pub global: Var,
    /// `[n, 4]` unit quaternions.
    pub rotation: Var,
    /// `[n, 3]` camera-frame translations.
    pub translation: Var,
    /// `[n]` confidences, absent for single-prediction architectures.
    pub confidence: Option<Var>,
}

/// Raw head outputs before normalization and anchoring.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub rotation: Var,
    pub translation: Var,
    pub confidence: Option<Var>,
}

/// One pose hypothesis with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerPixelPrediction {
    pub pose: Pose,
    pub confidence: f64,
}

/// Network input cut from a scene for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    /// `[h, w, 3]` centered RGB; `h` and `w` are even, pixels past the image border are zero.
    pub crop: Tensor,
    /// Image `(row, col)` of the crop's top-left pixel.
    pub origin: (usize, usize),
    /// Sampled camera-frame points, with their image pixels.
    pub cloud: PointCloud,
    /// Crop-relative `(row, col)` of every sampled point.
    pub crop_index: Vec<[usize; 2]>,
}

impl PreparedInput {
    pub fn points_tensor(&self) -> Tensor {
        let data = self.cloud.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::new(vec![self.cloud.len(), 3], data).expect("point tensor shape")
    }
}

/// Crops the mask's bounding box (grown to even size), backprojects the masked
/// pixels that have depth and samples `num_points` of them: without
/// replacement when enough exist, with replacement otherwise.
pub fn prepare(scene: &Scene, mask: &Mask, num_points: usize, seed: u64) -> Result<PreparedInput, NetworkError> {
    let (rmin, cmin, rmax, cmax) = mask.bbox().ok_or(NetworkError::EmptyMask)?;
    let k = scene.intrinsics;
    let valid: Vec<(usize, usize)> = mask
        .pixels()
        .into_iter()
        .filter(|&(r, c)| scene.depth_at(r, c) > 0.0)
        .collect();
    if valid.is_empty() {
        return Err(NetworkError::NoValidDepth);
    }
    let h = (rmax - rmin + 1).next_multiple_of(2);
    let w = (cmax - cmin + 1).next_multiple_of(2);
    let mut crop = vec![0.0; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let (ir, ic) = (rmin + r, cmin + c);
            if ir < k.height && ic < k.width {
                let px = scene.rgb_at(ir, ic);
                for ch in 0..3 {
                    crop[(r * w + c) * 3 + ch] = px[ch] - 0.5;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if valid.len() >= num_points {
        sample(&mut rng, valid.len(), num_points).into_vec()
    } else {
        (0..num_points).map(|_| rng.random_range(0..valid.len())).collect()
    };
    let mut points = Vec::with_capacity(num_points);
    let mut colors = Vec::with_capacity(num_points);
    let mut pixels = Vec::with_capacity(num_points);
    let mut crop_index = Vec::with_capacity(num_points);
    for i in chosen {
        let (r, c) = valid[i];
        points.push(k.backproject(c as f64, r as f64, scene.depth_at(r, c))?);
        colors.push(scene.rgb_at(r, c));
        pixels.push([r, c]);
        crop_index.push([r - rmin, c - cmin]);
    }
    Ok(PreparedInput {
        crop: Tensor::new(vec![h, w, 3], crop)?,
        origin: (rmin, cmin),
        cloud: PointCloud {
            points,
            colors: Some(colors),
            pixel_index: Some(pixels),
        },
        crop_index,
    })
}

pub(crate) fn centroid_of(points: &Tensor) -> Vec3 {
    let n = points.shape()[0].max(1) as f64;
    let mut c = Vec3::zeros();
    for row in points.data().chunks_exact(3) {
        c += Vec3::new(row[0], row[1], row[2]);
    }
    c / n
}

pub(crate) fn center_rows(points: &Tensor, center: &Vec3) -> Tensor {
    let data = points
        .data()
        .chunks_exact(3)
        .flat_map(|r| [r[0] - center.x, r[1] - center.y, r[2] - center.z])
        .collect();
    Tensor::new(points.shape().to_vec(), data).expect("same shape")
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let [c0, c1] = config.encoder_channels;
        let enc = [
            Conv::new(&mut store, "color.enc0", 3, 3, c0, 1, &mut rng),
            Conv::new(&mut store, "color.enc1", 3, c0, c1, 2, &mut rng),
        ];
        let dec = Conv::new(&mut store, "color.dec", 3, c1, c0, 1, &mut rng);
        let proj = Conv::new(&mut store, "color.proj", 1, c0, config.d_rgb, 1, &mut rng);
        let geo = PointEncoder::new(&mut store, "geo", config.geo_hidden, config.d_geo, &mut rng);
        let fusion = Fusion::new(
            &mut store,
            "fusion",
            config.d_rgb + config.d_geo,
            config.fusion_hidden,
            config.d_glob,
            &mut rng,
        );
        let mut widths = vec![config.head_input()];
        widths.extend(&config.head_hidden);
        let head = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
            let mut w = widths.clone();
            w.push(out);
            Mlp::new(store, name, &w, rng)
        };
        let rot = head(&mut store, "head.rot", 4, &mut rng);
        let trans = head(&mut store, "head.trans", 3, &mut rng);
        let conf = (config.architecture == Architecture::PerPixel).then(|| head(&mut store, "head.conf", 1, &mut rng));
        // start the rotation head near the identity so early normalization is well conditioned
        store.get_mut(rot.output().bias()).data_mut()[0] = 1.0;
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                enc,
                dec,
                proj,
                geo,
                fusion,
                rot,
                trans,
                conf,
            },
        })
    }

    /// `crop[h,w,3] -> [h,w,d_rgb]`; `h` and `w` must be even.
    pub fn embed_color(&self, tape: &mut Tape, vars: &[Var], crop: Var) -> Result<Var, NetworkError> {
        let s = tape.shape(crop).to_vec();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed_color",
                detail: format!("crop {:?} must be nonempty [even, even, 3]", s),
            }
            .into());
        }
        let l = &self.layout;
        let x = l.enc[0].apply_relu(tape, vars, crop)?;
        let x = l.enc[1].apply_relu(tape, vars, x)?;
        let x = tape.upsample_nearest(x, 2)?;
        let x = l.dec.apply_relu(tape, vars, x)?;
        Ok(l.proj.apply_relu(tape, vars, x)?)
    }

    /// `points[P,3] -> [P,d_geo]`.
    pub fn embed_geometry(&self, tape: &mut Tape, vars: &[Var], points: Var) -> Result<Var, NetworkError> {
        Ok(self.layout.geo.apply(tape, vars, points)?.0)
    }

    /// Same as [`Network::embed_geometry`] but also returns the pooled summary.
    pub fn embed_geometry_pooled(&self, tape: &mut Tape, vars: &[Var], points: Var) -> Result<(Var, Var), NetworkError> {
        self.layout.geo.apply(tape, vars, points)
    }

    /// `(per-pixel fused [P, d_rgb+d_geo+d_glob], global [d_glob])`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        color_map: Var,
        geo: Var,
        pixel_index: &[[usize; 2]],
    ) -> Result<(Var, Var), NetworkError> {
        fuse_with(&self.layout.fusion, tape, vars, color_map, geo, pixel_index)
    }

    /// Pose heads on `rows[n, head_input]`. The rotation is normalized, the
    /// confidence squashed and floored; translations are raw head outputs.
    pub fn predict(&self, tape: &mut Tape, vars: &[Var], rows: Var) -> Result<HeadVars, NetworkError> {
        let l = &self.layout;
        let q = l.rot.apply(tape, vars, rows)?;
        let rotation = tape.normalize_quaternion(q)?;
        let translation = l.trans.apply(tape, vars, rows)?;
        let confidence = match &l.conf {
            Some(head) => {
                let c = head.apply(tape, vars, rows)?;
                let n = tape.shape(c)[0];
                let c = tape.reshape(c, &[n])?;
                let c = tape.sigmoid(c)?;
                Some(tape.clamp_min(c, CONFIDENCE_FLOOR)?)
            }
            None => None,
        };
        Ok(HeadVars {
            rotation,
            translation,
            confidence,
        })
    }

    /// Full forward pass on a prepared input.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: &PreparedInput) -> Result<ForwardVars, NetworkError> {
        let crop = tape.constant(input.crop.clone());
        let color_map = self.embed_color(tape, vars, crop)?;
        self.forward_with_color(tape, vars, input, color_map)
    }

    /// Forward pass reusing an already computed color map.
    pub fn forward_with_color(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: &PreparedInput,
        color_map: Var,
    ) -> Result<ForwardVars, NetworkError> {
        if input.cloud.is_empty() {
            return Err(NetworkError::EmptyCloud);
        }
        let raw = input.points_tensor();
        let centroid = centroid_of(&raw);
        let mut fed = if self.config.center_points { center_rows(&raw, &centroid) } else { raw.clone() };
        if self.config.point_scale != 1.0 {
            fed.data_mut().iter_mut().for_each(|v| *v *= self.config.point_scale);
        }
        let points = tape.constant(fed);
        let geo = self.embed_geometry(tape, vars, points)?;
        let (fused, global, rows, anchors) = match self.config.architecture {
            Architecture::PerPixel => {
                let (fused, global) = self.fuse(tape, vars, color_map, geo, &input.crop_index)?;
                (fused, global, fused, raw)
            }
            Architecture::Single => {
                let (fused, global) = self.fuse(tape, vars, color_map, geo, &input.crop_index)?;
                let g = tape.reshape(global, &[1, self.config.d_glob])?;
                (fused, global, g, Tensor::new(vec![1, 3], centroid.as_slice().to_vec())?)
            }
            Architecture::GlobalFusion => {
                let s = tape.shape(color_map).to_vec();
                let flat = tape.reshape(color_map, &[s[0] * s[1], s[2]])?;
                let color = tape.mean_over_rows(flat)?;
                let shape = tape.mean_over_rows(geo)?;
                let pair = tape.concat(color, shape, 0)?;
                let pair = tape.reshape(pair, &[1, self.config.d_rgb + self.config.d_geo])?;
                let g = self.layout.fusion.rows(tape, vars, pair)?;
                let global = tape.reshape(g, &[self.config.d_glob])?;
                (pair, global, g, Tensor::new(vec![1, 3], centroid.as_slice().to_vec())?)
            }
        };
        let heads = self.predict(tape, vars, rows)?;
        let translation = match self.config.translation {
            TranslationMode::Absolute => heads.translation,
            TranslationMode::Centroid => {
                let n = tape.shape(heads.translation)[0];
                let c = Tensor::new(vec![n, 3], centroid.as_slice().repeat(n))?;
                let a = tape.constant(c);
                tape.add(heads.translation, a)?
            }
            TranslationMode::Offset => {
                let a = tape.constant(anchors);
                tape.add(heads.translation, a)?
            }
        };
        Ok(ForwardVars {
            color_map,
            geo,
            fused,
            global,
            rotation: heads.rotation,
            translation,
            confidence: heads.confidence,
        })
    }

    /// Reads every hypothesis out of a forward pass.
    pub fn predictions(&self, tape: &Tape, out: &ForwardVars) -> Result<Vec<PerPixelPrediction>, NetworkError> {
        let q = tape.value(out.rotation);
        let t = tape.value(out.translation);
        let n = q.shape()[0];
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let (qi, ti) = (q.row(i), t.row(i));
            let confidence = out.confidence.map_or(1.0, |c| tape.value(c).data()[i]);
            preds.push(PerPixelPrediction {
                pose: Pose::new([qi[0], qi[1], qi[2], qi[3]], [ti[0], ti[1], ti[2]])?,
                confidence,
            });
        }
        Ok(preds)
    }

    /// Estimates the pose of `object_id` from its (possibly corrupted) mask.
    pub fn estimate(&self, scene: &Scene, object_id: u32, mask: &Mask, seed: u64) -> Result<Estimate, NetworkError> {
        scene.object_index(object_id).ok_or(NetworkError::UnknownObject(object_id))?;
        let input = prepare(scene, mask, self.config.num_points, seed)?;
        self.estimate_prepared(input)
    }

    pub fn estimate_prepared(&self, input: PreparedInput) -> Result<Estimate, NetworkError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, &input)?;
        let predictions = self.predictions(&tape, &out)?;
        let pose = select_best(&predictions)?;
        Ok(Estimate {
            pose,
            predictions,
            color_map: tape.value(out.color_map).clone(),
            input,
        })
    }

    /// Checkpoint holding this network in section `main`, config in the metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: Some(serde_json::json!({ "network": self.config }).to_string()),
            sections: vec![("main".to_string(), self.params.clone())],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetworkError> {
        let meta: serde_json::Value = serde_json::from_str(ckpt.meta.as_deref().unwrap_or("{}"))
            .map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        let config: NetworkConfig = serde_json::from_value(meta.get("network").cloned().unwrap_or_default())
            .map_err(|e| NetworkError::Checkpoint(format!("network config: {e}")))?;
        let mut net = Network::new(config)?;
        let main = ckpt
            .section("main")
            .ok_or_else(|| NetworkError::Checkpoint("no `main` section".into()))?;
        net.params.load_from(main)?;
        Ok(net)
    }
}

/// Result of [`Network::estimate`].
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: Pose,
    pub predictions: Vec<PerPixelPrediction>,
    /// `[h, w, d_rgb]` color embedding of the crop, reused by the refiner.
    pub color_map: Tensor,
    pub input: PreparedInput,
}

/// The highest-confidence hypothesis; the first one wins ties.
pub fn select_best(predictions: &[PerPixelPrediction]) -> Result<Pose, NetworkError> {
    let mut best: Option<&PerPixelPrediction> = None;
    for p in predictions {
        if best.is_none_or(|b| p.confidence > b.confidence) {
            best = Some(p);
        }
    }
    best.map(|p| p.pose).ok_or(NetworkError::EmptyPredictionList)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_model, render_scene, RenderOptions, ShapeSpec};
    use crate::geometry::CameraIntrinsics;

    fn tiny(arch: Architecture) -> Network {
        Network::new(NetworkConfig {
            d_rgb: 6,
            d_geo: 5,
            d_glob: 7,
            num_points: 12,
            encoder_channels: [3, 4],
            geo_hidden: 4,
            fusion_hidden: 6,
            head_hidden: vec![5],
            architecture: arch,
            seed: 3,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    fn scene() -> Scene {
        let m = make_model(&ShapeSpec::new(4, "box", &[0.08, 0.06, 0.05], 2)).unwrap();
        let pose = Pose::from_axis_angle([1.0, 2.0, 0.5], 0.9, [0.01, -0.02, 0.6]);
        render_scene(&[m], &[pose], &CameraIntrinsics::default(), 0.0, 4, &RenderOptions::default()).unwrap()
    }

    fn pred(c: f64, x: f64) -> PerPixelPrediction {
        PerPixelPrediction {
            pose: Pose::from_translation([x, 0.0, 0.0]),
            confidence: c,
        }
    }

    #[test]
    fn select_best_rules() {
        assert_eq!(select_best(&[pred(0.1, 0.0), pred(0.9, 1.0), pred(0.3, 2.0)]).unwrap(), pred(0.0, 1.0).pose);
        assert_eq!(select_best(&[pred(0.4, 5.0)]).unwrap(), pred(0.0, 5.0).pose);
        assert_eq!(select_best(&[pred(0.5, 0.0), pred(0.5, 1.0)]).unwrap(), pred(0.0, 0.0).pose);
        assert!(matches!(select_best(&[]), Err(NetworkError::EmptyPredictionList)));
    }

    #[test]
    fn color_shape_contract() {
        let net = Network::new(NetworkConfig { seed: 1, ..NetworkConfig::toy() }).unwrap();
        let mut tape = Tape::new();
        let vars = net.params.bind_frozen(&mut tape);
        let crop = tape.constant(Tensor::zeros(&[16, 16, 3]));
        let y = net.embed_color(&mut tape, &vars, crop).unwrap();
        assert_eq!(tape.shape(y), &[16, 16, 32]);
        let odd = tape.constant(Tensor::zeros(&[5, 4, 3]));
        assert!(net.embed_color(&mut tape, &vars, odd).is_err());
    }

    #[test]
    fn color_map_sees_single_pixel_change() {
        let net = tiny(Architecture::PerPixel);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..8 * 8 * 3).map(|_| r.random_range(-0.5..0.5)).collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = net.params.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::new(vec![8, 8, 3], data).unwrap());
            let y = net.embed_color(&mut tape, &vars, x).unwrap();
            tape.value(y).clone()
        };
        let mut other = base.clone();
        other[3 * (8 * 4 + 4)] += 0.3;
        assert_ne!(run(base), run(other));
    }

    #[test]
    fn single_point_pooling_is_its_own_feature() {
        let net = tiny(Architecture::PerPixel);
        let mut tape = Tape::new();
        let vars = net.params.bind_frozen(&mut tape);
        let p = tape.constant(Tensor::matrix(1, 3, vec![0.01, 0.02, 0.5]).unwrap());
        let (geo, pooled) = net.embed_geometry_pooled(&mut tape, &vars, p).unwrap();
        let h = net.layout.geo.first.apply_relu(&mut tape, &vars, p).unwrap();
        assert_eq!(tape.value(pooled).data(), tape.value(h).data());
        let cmap = tape.constant(Tensor::new(vec![2, 2, 6], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap());
        let (_, global) = net.fuse(&mut tape, &vars, cmap, geo, &[[1, 0]]).unwrap();
        let color = gather_pixels(&mut tape, cmap, &[[1, 0]]).unwrap();
        let pair = tape.concat(color, geo, 1).unwrap();
        let rows = net.layout.fusion.rows(&mut tape, &vars, pair).unwrap();
        assert_eq!(tape.value(global).data(), tape.value(rows).data());
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(net.embed_geometry(&mut tape, &vars, empty), Err(NetworkError::EmptyCloud)));
        assert!(matches!(
            net.fuse(&mut tape, &vars, cmap, geo, &[[2, 0]]),
            Err(NetworkError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn estimate_smoke_and_errors() {
        let s = scene();
        for arch in [Architecture::PerPixel, Architecture::Single, Architecture::GlobalFusion] {
            let net = tiny(arch);
            let est = net.estimate(&s, 4, &s.masks[0], 1).unwrap();
            let q = est.pose.quaternion();
            assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            let n = if arch == Architecture::PerPixel { 12 } else { 1 };
            assert_eq!(est.predictions.len(), n);
            assert!(est.predictions.iter().all(|p| p.confidence > 0.0 && p.confidence <= 1.0));
        }
        let net = tiny(Architecture::PerPixel);
        let mut blind = s.clone();
        blind.depth.iter_mut().for_each(|d| *d = 0.0);
        assert!(matches!(net.estimate(&blind, 4, &s.masks[0], 1), Err(NetworkError::NoValidDepth)));
        let empty = Mask::empty(s.width(), s.height());
        assert!(matches!(net.estimate(&s, 4, &empty, 1), Err(NetworkError::EmptyMask)));
        assert!(matches!(net.estimate(&s, 99, &s.masks[0], 1), Err(NetworkError::UnknownObject(99))));
    }

    #[test]
    fn translation_anchors() {
        let s = scene();
        let input = prepare(&s, &s.masks[0], 12, 1).unwrap();
        let pts = input.points_tensor();
        let mean: Vec<f64> = (0..3).map(|k| (0..12).map(|i| pts.data()[i * 3 + k]).sum::<f64>() / 12.0).collect();
        let run = |mode| {
            let net = Network::new(NetworkConfig { translation: mode, ..tiny(Architecture::PerPixel).config.clone() }).unwrap();
            let mut tape = Tape::new();
            let vars = net.params.bind_frozen(&mut tape);
            let out = net.forward(&mut tape, &vars, &input).unwrap();
            tape.value(out.translation).data().to_vec()
        };
        let abs = run(TranslationMode::Absolute);
        let off = run(TranslationMode::Offset);
        let cen = run(TranslationMode::Centroid);
        for i in 0..abs.len() {
            assert!((off[i] - abs[i] - pts.data()[i]).abs() < 1e-12);
            assert!((cen[i] - abs[i] - mean[i % 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn prepare_samples_with_and_without_replacement() {
        let s = scene();
        let valid = s.masks[0]
            .pixels()
            .into_iter()
            .filter(|&(r, c)| s.depth_at(r, c) > 0.0)
            .count();
        let few = prepare(&s, &s.masks[0], 20, 3).unwrap();
        let mut px = few.cloud.pixel_index.clone().unwrap();
        px.sort();
        px.dedup();
        assert_eq!(px.len(), 20);
        let many = prepare(&s, &s.masks[0], valid + 50, 3).unwrap();
        assert_eq!(many.cloud.len(), valid + 50);
        assert_eq!(many.crop.shape()[0] % 2, 0);
        assert_eq!(many.crop.shape()[1] % 2, 0);
        many.cloud.validate(Some((s.height(), s.width()))).unwrap();
        for (ci, pi) in many.crop_index.iter().zip(many.cloud.pixel_index.as_ref().unwrap()) {
            assert_eq!([ci[0] + many.origin.0, ci[1] + many.origin.1], *pi);
        }
        assert_eq!(prepare(&s, &s.masks[0], 20, 3).unwrap(), few);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny(Architecture::Single);
        let back = Network::from_checkpoint(&Checkpoint::from_bytes(&net.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.params, net.params);
    }
}
