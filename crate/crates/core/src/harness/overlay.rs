//! Pose overlays written as binary PPM.

use std::path::Path;

use super::HarnessError;
use crate::data::{ObjectModel, Scene};
use crate::geometry::Pose;

const PALETTE: [[u8; 3]; 6] = [[255, 40, 40], [40, 220, 40], [60, 90, 255], [255, 220, 0], [255, 0, 255], [0, 230, 230]];

/// RGB bytes of `scene` with each model's points projected under its estimated pose.
pub fn render_overlay(scene: &Scene, models: &[ObjectModel], estimates: &[(u32, Pose)]) -> Vec<u8> {
    let (w, h) = (scene.width(), scene.height());
    let mut img: Vec<u8> = scene.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    for &(id, pose) in estimates {
        let Some(model) = models.iter().find(|m| m.id == id) else {
            continue;
        };
        let slot = models.iter().position(|m| m.id == id).unwrap_or(0);
        let color = PALETTE[slot % PALETTE.len()];
        for p in &model.surface_points {
            if let Some((r, c)) = scene.intrinsics.pixel_of(&pose.apply(p)) {
                if r < h && c < w {
                    let i = (r * w + c) * 3;
                    img[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}

pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_overlay(path: &Path, scene: &Scene, models: &[ObjectModel], estimates: &[(u32, Pose)]) -> Result<(), HarnessError> {
    let rgb = render_overlay(scene, models, estimates);
    std::fs::write(path, ppm_bytes(scene.width(), scene.height(), &rgb)).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_model, render_scene, RenderOptions, ShapeSpec};
    use crate::geometry::CameraIntrinsics;

    #[test]
    fn overlay_marks_the_object() {
        let m = make_model(&ShapeSpec::new(1, "box", &[0.08, 0.06, 0.05], 1)).unwrap();
        let pose = Pose::from_axis_angle([0.0, 1.0, 0.0], 0.3, [0.0, 0.0, 0.6]);
        let k = CameraIntrinsics::default();
        let scene = render_scene(std::slice::from_ref(&m), &[pose], &k, 0.0, 1, &RenderOptions::clean()).unwrap();
        let img = render_overlay(&scene, std::slice::from_ref(&m), &[(1, pose)]);
        let (r, c) = k.pixel_of(&pose.translation()).unwrap();
        let i = (r * scene.width() + c) * 3;
        assert_eq!(&img[i..i + 3], &PALETTE[0]);
        let ppm = ppm_bytes(scene.width(), scene.height(), &img);
        let header = format!("P6\n{} {}\n255\n", scene.width(), scene.height());
        assert!(ppm.starts_with(header.as_bytes()));
        assert_eq!(ppm.len(), header.len() + scene.width() * scene.height() * 3);
    }
}
