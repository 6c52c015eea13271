//! Scene files and dataset manifests.
//!
//! A scene file is `DFSC`, a little-endian `u16` version, a `u32` byte length
//! and that many bytes of JSON metadata, followed by the raw arrays the
//! metadata lists, in order. Arrays missing from the list load as zeros.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{make_model, DataError, Mask, ObjectModel, Scene, ShapeSpec};
use crate::geometry::{CameraIntrinsics, Pose};

const MAGIC: &[u8; 4] = b"DFSC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub intrinsics: CameraIntrinsics,
    pub object_ids: Vec<u32>,
    pub symmetric: Vec<bool>,
    /// `(qw, qx, qy, qz, tx, ty, tz)` per object.
    pub poses: Vec<[f64; 7]>,
    #[serde(default)]
    pub occluder_fraction: f64,
    #[serde(default)]
    pub arrays: Vec<ArrayInfo>,
}

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let (h, w) = (scene.height(), scene.width());
    let meta = SceneMeta {
        intrinsics: scene.intrinsics,
        object_ids: scene.object_ids.clone(),
        symmetric: scene.symmetric.clone(),
        poses: scene.gt_poses.iter().map(Pose::to_array).collect(),
        occluder_fraction: scene.occluder_fraction,
        arrays: vec![
            ArrayInfo { name: "rgb".into(), dtype: "f64".into(), shape: vec![h, w, 3] },
            ArrayInfo { name: "depth".into(), dtype: "f64".into(), shape: vec![h, w] },
            ArrayInfo { name: "masks".into(), dtype: "u8".into(), shape: vec![scene.masks.len(), h, w] },
        ],
    };
    let json = serde_json::to_vec(&meta).expect("scene metadata serializes");
    let mut out = Vec::with_capacity(10 + json.len() + (h * w * 4) * 8 + scene.masks.len() * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in scene.rgb.iter().chain(&scene.depth) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in &scene.masks {
        out.extend_from_slice(&m.data);
    }
    out
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene, DataError> {
    let bad = |offset: usize, reason: &str| DataError::MalformedFile {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 10 {
        return Err(bad(bytes.len(), "file shorter than fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut pos = 10;
    if pos + len > bytes.len() {
        return Err(bad(bytes.len(), "truncated metadata"));
    }
    let meta: SceneMeta =
        serde_json::from_slice(&bytes[pos..pos + len]).map_err(|e| bad(pos + e.column(), &e.to_string()))?;
    pos += len;

    let k = meta.intrinsics;
    k.validate()?;
    let n = meta.object_ids.len();
    if meta.symmetric.len() != n || meta.poses.len() != n {
        return Err(bad(10, "object_ids, symmetric and poses differ in length"));
    }
    let (h, w) = (k.height, k.width);
    let mut rgb = vec![0.0; h * w * 3];
    let mut depth = vec![0.0; h * w];
    let mut masks = vec![Mask::empty(w, h); n];
    for a in &meta.arrays {
        let (want_shape, want_dtype) = match a.name.as_str() {
            "rgb" => (vec![h, w, 3], "f64"),
            "depth" => (vec![h, w], "f64"),
            "masks" => (vec![n, h, w], "u8"),
            other => return Err(bad(10, &format!("unknown array `{other}`"))),
        };
        if a.shape != want_shape || a.dtype != want_dtype {
            return Err(bad(10, &format!("array `{}` has {} {:?}", a.name, a.dtype, a.shape)));
        }
        let count: usize = a.shape.iter().product();
        let size = if a.dtype == "f64" { count * 8 } else { count };
        if pos + size > bytes.len() {
            return Err(bad(bytes.len(), &format!("truncated array `{}`", a.name)));
        }
        let chunk = &bytes[pos..pos + size];
        match a.name.as_str() {
            "rgb" | "depth" => {
                let dst = if a.name == "rgb" { &mut rgb } else { &mut depth };
                for (d, c) in dst.iter_mut().zip(chunk.chunks_exact(8)) {
                    *d = f64::from_le_bytes(c.try_into().unwrap());
                }
            }
            _ => {
                for (m, c) in masks.iter_mut().zip(chunk.chunks_exact(h * w)) {
                    m.data.copy_from_slice(c);
                }
            }
        }
        pos += size;
    }
    if pos != bytes.len() {
        return Err(bad(pos, "trailing bytes"));
    }
    let gt_poses = meta
        .poses
        .iter()
        .map(Pose::from_array)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scene {
        intrinsics: k,
        rgb,
        depth,
        object_ids: meta.object_ids,
        symmetric: meta.symmetric,
        masks,
        gt_poses,
        occluder_fraction: meta.occluder_fraction,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, scene_to_bytes(scene)).map_err(|e| DataError::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    scene_from_bytes(&bytes)
}

/// Writes one path per line, relative to the manifest's directory.
pub fn write_manifest(path: &Path, entries: &[String]) -> Result<(), DataError> {
    let mut text = entries.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Paths listed in a manifest, resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

pub fn save_models(path: &Path, specs: &[ShapeSpec]) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(specs).expect("shape specs serialize");
    std::fs::write(path, json).map_err(|e| DataError::io(path, e))
}

pub fn load_models(path: &Path) -> Result<Vec<ObjectModel>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let specs: Vec<ShapeSpec> =
        serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    specs.iter().map(make_model).collect()
}

/// Loads `models.json` and every scene in `<split>/manifest.txt` under `dir`.
pub fn load_dataset(dir: &Path, split: &str) -> Result<(Vec<ObjectModel>, Vec<Scene>), DataError> {
    if !dir.is_dir() {
        return Err(DataError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let models = load_models(&dir.join("models.json"))?;
    let scenes = read_manifest(&dir.join(split).join("manifest.txt"))?
        .iter()
        .map(|p| load_scene(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((models, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_scene, RenderOptions};

    fn scene() -> Scene {
        let k = CameraIntrinsics::default();
        let a = make_model(&ShapeSpec::new(3, "cylinder", &[0.04, 0.1], 1)).unwrap();
        let b = make_model(&ShapeSpec::new(5, "lshape", &[0.1, 0.08, 0.03, 0.05], 2)).unwrap();
        let pa = Pose::from_axis_angle([1.0, 0.2, 0.0], 0.7, [0.05, 0.0, 0.6]);
        let pb = Pose::from_axis_angle([0.0, 1.0, 1.0], 2.1, [-0.08, 0.03, 0.7]);
        render_scene(&[a, b], &[pa, pb], &k, 0.2, 9, &RenderOptions::default()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = scene();
        let back = scene_from_bytes(&scene_to_bytes(&s)).unwrap();
        assert_eq!(back, s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.dfsc");
        save_scene(&s, &p).unwrap();
        assert_eq!(load_scene(&p).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let bytes = scene_to_bytes(&scene());
        for cut in [3, 9, 40, bytes.len() - 1] {
            assert!(
                matches!(scene_from_bytes(&bytes[..cut]), Err(DataError::MalformedFile { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn header_only_file_is_empty_scene() {
        let meta = SceneMeta {
            intrinsics: CameraIntrinsics::default(),
            object_ids: vec![],
            symmetric: vec![],
            poses: vec![],
            occluder_fraction: 0.0,
            arrays: vec![],
        };
        let json = serde_json::to_vec(&meta).unwrap();
        let mut bytes = b"DFSC".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        let s = scene_from_bytes(&bytes).unwrap();
        assert_eq!(s.num_objects(), 0);
        assert!(s.depth.iter().all(|&d| d == 0.0));
        assert_eq!(s.rgb.len(), 160 * 120 * 3);
    }

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.txt");
        write_manifest(&m, &["a.dfsc".into(), "b.dfsc".into()]).unwrap();
        assert_eq!(read_manifest(&m).unwrap(), vec![dir.path().join("a.dfsc"), dir.path().join("b.dfsc")]);
        assert!(matches!(read_manifest(&dir.path().join("nope")), Err(DataError::Io { .. })));
    }
}
