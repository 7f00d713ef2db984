//! Scene manifest schema and the validated in-memory dataset.
//!
//! `manifest.json`:
//! ```text
//! {
//!   "schema": "mtgs.scene.v1",
//!   "name": "...",
//!   "units": { "length": "meters", "time": "seconds" },
//!   "traversals": [ { "id": 0, "held_out": false, "frames": [
//!       { "frame_id": 0, "timestamp": 0.0, "camera_id": "front",
//!         "width": 160, "height": 120, "intrinsics": [fx, fy, cx, cy],
//!         "world_to_camera": [[r00, r01, r02, t0], ..., [0, 0, 0, 1]],
//!         "image": "images/f00000.png", "pseudo_depth": "depth/f00000.mdep",
//!         "mask": "masks/f00000.png" | null, "point_cloud": "clouds/c0000.mpcl" } ] } ],
//!   "boxes": [ { "node_id", "traversal", "label", "extent", "times", "centers", "rotations" } ]
//! }
//! ```
//! Paths are relative to the manifest's directory. Cameras follow the
//! x-right, y-down, z-forward convention; world is z-up.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::formats::{read_cloud, read_depth, read_mask, read_png_rgb, write_atomic, write_cloud, write_depth, write_mask, write_png_rgb};
use crate::appearance::project_points;
use crate::camera::{CameraFrame, Intrinsics};
use crate::init::{BoxTrack, PointCloud};
use crate::losses::DepthSample;
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "mtgs.scene.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub time: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            length: "meters".into(),
            time: "seconds".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: usize,
    pub timestamp: f64,
    pub camera_id: String,
    pub width: usize,
    pub height: usize,
    /// `[fx, fy, cx, cy]`, pixels.
    pub intrinsics: [f64; 4],
    /// Row-major 4×4.
    pub world_to_camera: [[f64; 4]; 4],
    pub image: String,
    pub pseudo_depth: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub point_cloud: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalEntry {
    pub id: u32,
    #[serde(default)]
    pub held_out: bool,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub units: Units,
    pub traversals: Vec<TraversalEntry>,
    #[serde(default)]
    pub boxes: Vec<BoxTrack>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

impl FrameEntry {
    pub fn camera(&self, traversal: u32) -> CameraFrame<f64> {
        let [fx, fy, cx, cy] = self.intrinsics;
        let m = &self.world_to_camera;
        CameraFrame::new(
            self.frame_id,
            traversal,
            self.timestamp,
            self.width,
            self.height,
            Intrinsics { fx, fy, cx, cy },
            Matrix4::from_fn(|r, c| m[r][c]),
        )
    }
}

fn matrix_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// One loaded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub camera: CameraFrame<f64>,
    pub camera_id: String,
    /// Interleaved RGB in `[0, 1]`.
    pub image: Vec<f32>,
    pub pseudo_depth: Vec<f32>,
    /// `true` = evaluated.
    pub mask: Option<Vec<bool>>,
    /// Index into [`TraversalDataset::clouds`].
    pub cloud: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalData {
    pub id: u32,
    pub held_out: bool,
    pub frames: Vec<FrameData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalDataset {
    pub name: String,
    pub traversals: Vec<TraversalData>,
    pub clouds: Vec<PointCloud>,
    pub boxes: Vec<BoxTrack>,
}

impl TraversalDataset {
    pub fn traversal(&self, id: u32) -> Option<&TraversalData> {
        self.traversals.iter().find(|t| t.id == id)
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameData> {
        self.traversals.iter().flat_map(|t| t.frames.iter())
    }

    pub fn training_ids(&self) -> Vec<u32> {
        self.traversals.iter().filter(|t| !t.held_out).map(|t| t.id).collect()
    }

    pub fn held_out_ids(&self) -> Vec<u32> {
        self.traversals.iter().filter(|t| t.held_out).map(|t| t.id).collect()
    }

    /// Sparse depth samples from the frame's LiDAR sweep (nearest hit per pixel).
    pub fn lidar_samples(&self, frame: &FrameData) -> Vec<DepthSample> {
        project_points(&self.clouds[frame.cloud], &frame.camera)
            .into_iter()
            .map(|p| DepthSample {
                pixel: p.pixel,
                depth: p.depth,
            })
            .collect()
    }

    /// Camera centers of a traversal, for appearance selection.
    pub fn trajectory(&self, id: u32) -> Vec<[f64; 3]> {
        self.traversal(id)
            .map(|t| {
                t.frames
                    .iter()
                    .map(|f| {
                        let c = f.camera.base_extrinsic().center();
                        [c.x, c.y, c.z]
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Manifest describing this dataset with the canonical file layout.
    pub fn manifest(&self) -> SceneManifest {
        let traversals = self
            .traversals
            .iter()
            .map(|t| TraversalEntry {
                id: t.id,
                held_out: t.held_out,
                frames: t
                    .frames
                    .iter()
                    .map(|f| {
                        let c = &f.camera;
                        let id = c.frame_id;
                        FrameEntry {
                            frame_id: id,
                            timestamp: c.timestamp,
                            camera_id: f.camera_id.clone(),
                            width: c.width,
                            height: c.height,
                            intrinsics: [c.intrinsics.fx, c.intrinsics.fy, c.intrinsics.cx, c.intrinsics.cy],
                            world_to_camera: matrix_rows(&c.world_to_camera),
                            image: format!("images/f{id:05}.png"),
                            pseudo_depth: format!("depth/f{id:05}.mdep"),
                            mask: f.mask.as_ref().map(|_| format!("masks/f{id:05}.png")),
                            point_cloud: format!("clouds/c{:04}.mpcl", f.cloud),
                        }
                    })
                    .collect(),
            })
            .collect();
        SceneManifest {
            schema: MANIFEST_SCHEMA.into(),
            name: self.name.clone(),
            units: Units::default(),
            traversals,
            boxes: self.boxes.clone(),
        }
    }
}

/// Writes every payload and `manifest.json` under `dir`; returns the manifest path.
pub fn save_scene(dir: &Path, data: &TraversalDataset) -> Result<PathBuf> {
    let manifest = data.manifest();
    for (i, c) in data.clouds.iter().enumerate() {
        write_cloud(&dir.join(format!("clouds/c{i:04}.mpcl")), c)?;
    }
    let jobs: Vec<(&FrameData, &FrameEntry)> = data
        .traversals
        .iter()
        .zip(&manifest.traversals)
        .flat_map(|(t, e)| t.frames.iter().zip(&e.frames))
        .collect();
    jobs.par_iter().try_for_each(|(f, e)| -> Result<()> {
        let (w, h) = (e.width, e.height);
        write_png_rgb(&dir.join(&e.image), w, h, &f.image)?;
        write_depth(&dir.join(&e.pseudo_depth), w, h, &f.pseudo_depth)?;
        if let (Some(m), Some(p)) = (&f.mask, &e.mask) {
            write_mask(&dir.join(p), w, h, m)?;
        }
        Ok(())
    })?;
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Structural checks that need no file access.
fn check_manifest(m: &SceneManifest, errs: &mut Vec<String>) {
    if m.schema != MANIFEST_SCHEMA {
        errs.push(format!("schema is `{}`, expected `{MANIFEST_SCHEMA}`", m.schema));
    }
    if m.units.length != "meters" || m.units.time != "seconds" {
        errs.push(format!("units must be meters/seconds, got {}/{}", m.units.length, m.units.time));
    }
    if m.traversals.is_empty() {
        errs.push("manifest has no traversals".into());
    }
    let mut trav = BTreeSet::new();
    let mut frames = BTreeSet::new();
    for t in &m.traversals {
        if !trav.insert(t.id) {
            errs.push(format!("traversal {} listed twice", t.id));
        }
        if t.frames.is_empty() {
            errs.push(format!("traversal {} has no frames", t.id));
        }
        for w in t.frames.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                errs.push(format!("frame {}: timestamp decreases within traversal {}", w[1].frame_id, t.id));
            }
        }
        for f in &t.frames {
            if !frames.insert(f.frame_id) {
                errs.push(format!("frame {}: duplicate frame id", f.frame_id));
            }
            if f.width == 0 || f.height == 0 {
                errs.push(format!("frame {}: empty image size", f.frame_id));
            }
            let [fx, fy, cx, cy] = f.intrinsics;
            if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
                errs.push(format!("frame {}: invalid intrinsics", f.frame_id));
            }
            if !f.camera(t.id).valid() {
                errs.push(format!("frame {}: extrinsic is not an invertible rigid transform", f.frame_id));
            }
        }
    }
    for b in &m.boxes {
        if let Err(e) = b.validate() {
            errs.push(e.to_string());
        }
        if !trav.contains(&b.traversal) {
            errs.push(format!("box {} references unknown traversal {}", b.node_id, b.traversal));
        }
    }
}

/// Loads and validates a scene from its manifest (or the directory holding
/// `manifest.json`). Every violation found is reported at once.
pub fn load_scene(manifest_path: &Path) -> Result<TraversalDataset> {
    let joined;
    let manifest_path = if manifest_path.is_dir() {
        joined = manifest_path.join("manifest.json");
        joined.as_path()
    } else {
        manifest_path
    };
    let m = SceneManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut errs = Vec::new();
    check_manifest(&m, &mut errs);
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }

    let mut cloud_paths: Vec<&str> = m.traversals.iter().flat_map(|t| t.frames.iter().map(|f| f.point_cloud.as_str())).collect();
    cloud_paths.sort_unstable();
    cloud_paths.dedup();
    // canonical clouds/cNNNN names sort by index; keep that order
    let cloud_index: BTreeMap<&str, usize> = cloud_paths.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let clouds: Vec<std::result::Result<PointCloud, String>> = cloud_paths
        .par_iter()
        .map(|p| read_cloud(&root.join(p)).map_err(|e| e.to_string()))
        .collect();

    let entries: Vec<(u32, &FrameEntry)> = m.traversals.iter().flat_map(|t| t.frames.iter().map(move |f| (t.id, f))).collect();
    let loaded: Vec<std::result::Result<FrameData, Vec<String>>> = entries
        .par_iter()
        .map(|&(tid, e)| load_frame(root, tid, e, cloud_index[e.point_cloud.as_str()]))
        .collect();

    let mut cloud_data = Vec::with_capacity(clouds.len());
    for (p, c) in cloud_paths.iter().zip(clouds) {
        match c {
            Ok(c) => cloud_data.push(c),
            Err(e) => errs.push(format!("point cloud {p}: {e}")),
        }
    }
    let mut frames = Vec::with_capacity(loaded.len());
    for ((tid, e), f) in entries.iter().zip(loaded) {
        match f {
            Ok(f) => {
                if let Some(c) = cloud_data.get(f.cloud) {
                    if c.traversal != *tid {
                        errs.push(format!("frame {}: point cloud belongs to traversal {}", e.frame_id, c.traversal));
                    }
                }
                frames.push((*tid, f));
            }
            Err(v) => errs.extend(v),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let traversals = m
        .traversals
        .iter()
        .map(|t| TraversalData {
            id: t.id,
            held_out: t.held_out,
            frames: frames.iter().filter(|(tid, _)| *tid == t.id).map(|(_, f)| f.clone()).collect(),
        })
        .collect();
    Ok(TraversalDataset {
        name: m.name,
        traversals,
        clouds: cloud_data,
        boxes: m.boxes,
    })
}

fn load_frame(root: &Path, tid: u32, e: &FrameEntry, cloud: usize) -> std::result::Result<FrameData, Vec<String>> {
    let id = e.frame_id;
    let mut errs = Vec::new();
    let (w, h) = (e.width, e.height);
    let image = match read_png_rgb(&root.join(&e.image)) {
        Ok((iw, ih, img)) if (iw, ih) == (w, h) => Some(img),
        Ok((iw, ih, _)) => {
            errs.push(format!("frame {id}: image is {iw}×{ih}, manifest says {w}×{h}"));
            None
        }
        Err(err) => {
            errs.push(format!("frame {id}: image: {err}"));
            None
        }
    };
    let depth = match read_depth(&root.join(&e.pseudo_depth)) {
        Ok((dw, dh, d)) if (dw, dh) == (w, h) => Some(d),
        Ok((dw, dh, _)) => {
            errs.push(format!("frame {id}: pseudo-depth is {dw}×{dh}, image is {w}×{h}"));
            None
        }
        Err(err) => {
            errs.push(format!("frame {id}: pseudo-depth: {err}"));
            None
        }
    };
    let mask = match &e.mask {
        None => None,
        Some(p) => match read_mask(&root.join(p)) {
            Ok((mw, mh, m)) if (mw, mh) == (w, h) => Some(m),
            Ok((mw, mh, _)) => {
                errs.push(format!("frame {id}: mask is {mw}×{mh}, image is {w}×{h}"));
                None
            }
            Err(err) => {
                errs.push(format!("frame {id}: mask: {err}"));
                None
            }
        },
    };
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(FrameData {
        camera: e.camera(tid),
        camera_id: e.camera_id.clone(),
        image: image.unwrap(),
        pseudo_depth: depth.unwrap(),
        mask,
        cloud,
    })
}
