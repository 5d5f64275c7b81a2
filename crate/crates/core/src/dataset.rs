//! Multi-view datasets described by a `transforms.json` manifest.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{
    load_image, load_mask_png, load_normal_png, load_scalar_pfm, save_image, save_mask_png, save_normal_png,
    save_scalar_pfm, Image,
};
use crate::math::V3;
use crate::surfel::Camera;

pub const MANIFEST: &str = "transforms.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub camera_angle_x: f64,
    #[serde(default)]
    pub background: Option<[f64; 3]>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub file_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<String>,
    /// Row-major world-from-camera pose, camera looking down `-z`.
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
}

/// Monocular geometry priors for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMaps {
    /// World-space unit normals.
    pub normals: Vec<Option<V3>>,
    /// Depths, valid where finite and positive.
    pub depth: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub mask: Vec<bool>,
    pub priors: Option<PriorMaps>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub background: Option<[f64; 3]>,
}

impl Dataset {
    pub fn has_priors(&self) -> bool {
        self.views.iter().all(|v| v.priors.is_some())
    }

    /// Drops every prior map (the no-prior ablation).
    pub fn without_priors(mut self) -> Self {
        for v in &mut self.views {
            v.priors = None;
        }
        self
    }
}

fn check_size(path: &Path, w: usize, h: usize, view: &Camera) -> Result<()> {
    if (w, h) != (view.width, view.height) {
        return Err(Error::Dataset(format!(
            "{} is {w}x{h} but the view image is {}x{}",
            path.display(),
            view.width,
            view.height
        )));
    }
    Ok(())
}

/// Loads a dataset directory. Missing masks default to all-foreground;
/// missing prior maps disable priors for the whole dataset with a warning.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: line {} column {}: {e}", manifest_path.display(), e.line(), e.column())))?;
    if manifest.frames.is_empty() {
        return Err(Error::Dataset(format!("{} lists no frames", manifest_path.display())));
    }
    let mut views = Vec::with_capacity(manifest.frames.len());
    let mut missing_priors = false;
    for frame in &manifest.frames {
        let image_path = dir.join(&frame.file_path);
        let image = load_image(&image_path)?;
        if frame.transform_matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("non-finite pose for {}", frame.file_path)));
        }
        let fov = frame.camera_angle_x.unwrap_or(manifest.camera_angle_x);
        if !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(Error::Dataset(format!("field of view {fov} out of range for {}", frame.file_path)));
        }
        let camera = Camera::from_world_from_camera_gl(&frame.transform_matrix, fov, image.width, image.height);
        let mask = match &frame.mask_path {
            Some(p) => {
                let path = dir.join(p);
                let (w, h, m) = load_mask_png(&path)?;
                check_size(&path, w, h, &camera)?;
                m
            }
            None => vec![true; image.len()],
        };
        let priors = match (&frame.normal_path, &frame.depth_path) {
            (Some(np), Some(dp)) => {
                let npath = dir.join(np);
                let dpath = dir.join(dp);
                if npath.exists() && dpath.exists() {
                    let (w, h, normals) = load_normal_png(&npath)?;
                    check_size(&npath, w, h, &camera)?;
                    let (w, h, depth) = load_scalar_pfm(&dpath)?;
                    check_size(&dpath, w, h, &camera)?;
                    let depth = depth.into_iter().map(|d| (d.is_finite() && d > 0.0).then_some(d)).collect();
                    Some(PriorMaps { normals, depth })
                } else {
                    missing_priors = true;
                    None
                }
            }
            _ => {
                missing_priors = true;
                None
            }
        };
        let name = Path::new(&frame.file_path).file_stem().and_then(|s| s.to_str()).unwrap_or("view").to_string();
        views.push(View { name, camera, image, mask, priors });
    }
    let mut ds = Dataset { views, background: manifest.background };
    if missing_priors {
        warn!("prior maps missing for some views; geometry priors disabled");
        ds = ds.without_priors();
    }
    Ok(ds)
}

/// Writes a dataset directory: images in the given extension (`png` or
/// `pfm`), PNG masks, and prior maps when present.
pub fn write_dataset(dir: &Path, ds: &Dataset, image_ext: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(ds.views.len());
    let fov = ds.views.first().map(|v| v.camera.fov_x()).ok_or_else(|| Error::Dataset("no views to write".into()))?;
    for (k, v) in ds.views.iter().enumerate() {
        let stem = format!("{:03}_{}", k, v.name);
        let file_path = format!("{stem}.{image_ext}");
        save_image(&v.image, &dir.join(&file_path))?;
        let mask_path = format!("{stem}_mask.png");
        save_mask_png(v.camera.width, v.camera.height, &v.mask, &dir.join(&mask_path))?;
        let (normal_path, depth_path) = match &v.priors {
            Some(p) => {
                let np = format!("{stem}_normal.png");
                let dp = format!("{stem}_depth.pfm");
                save_normal_png(v.camera.width, v.camera.height, &p.normals, &dir.join(&np))?;
                let d: Vec<f64> = p.depth.iter().map(|d| d.unwrap_or(0.0)).collect();
                save_scalar_pfm(v.camera.width, v.camera.height, &d, &dir.join(&dp))?;
                (Some(np), Some(dp))
            }
            None => (None, None),
        };
        let own_fov = v.camera.fov_x();
        frames.push(FrameRecord {
            file_path,
            mask_path: Some(mask_path),
            normal_path,
            depth_path,
            transform_matrix: v.camera.world_from_camera_gl(),
            camera_angle_x: ((own_fov - fov).abs() > 1e-12).then_some(own_fov),
        });
    }
    let manifest = Manifest { camera_angle_x: fov, background: ds.background, frames };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
