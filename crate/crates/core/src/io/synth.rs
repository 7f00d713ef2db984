//! Synthetic multi-traversal street scene with exact ground truth.
//!
//! The world (z up) is a textured ground plane with three buildings and a
//! low median barrier. Each traversal drives its own lane along +x with one
//! cube moving ahead of the camera; traversal 1 also has a parked cube.
//! Traversals differ by Lambertian lighting and a color affine, both baked
//! into Gaussian colors, so ground-truth images are exact renders of a
//! Gaussian graph. Optionally a held-out traversal drives an extra lane with
//! the last training traversal's lighting and its own affine.
//!
//! LiDAR sweeps are back-projected from the rendered depth at pixel centers,
//! so re-projecting them reproduces the depth maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::dataset::{save_scene, FrameData, TraversalData, TraversalDataset};
use crate::camera::{look_at, CameraFrame, Intrinsics};
use crate::gaussian::{rot_to_quat, GaussianSet};
use crate::init::{BoxTrack, PointCloud};
use crate::raster::{render, RasterConfig};
use crate::real::logit;
use crate::scene::{PoseTrack, SceneGraph, TransientNode, ViewRequest, DEFAULT_BOX_TOLERANCE};
use crate::sh::{ShConfig, SH_C0, SH_OFFSET};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Training traversals (at most 3 lanes).
    pub traversals: usize,
    /// Adds a held-out traversal on an extra lane.
    pub held_out: bool,
    pub frames_per_traversal: usize,
    /// Per-traversal lighting and color affine; identity when false.
    pub appearance_shifts: bool,
    /// Every `lidar_stride`-th pixel (both axes) becomes a LiDAR return.
    pub lidar_stride: usize,
    /// Ground-truth Gaussian spacing on surfaces, meters.
    pub spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            width: 160,
            height: 120,
            focal: 110.0,
            traversals: 3,
            held_out: true,
            frames_per_traversal: 25,
            appearance_shifts: true,
            lidar_stride: 2,
            spacing: 0.25,
        }
    }
}

pub const LANES: [f64; 4] = [-3.5, 0.0, 3.5, 5.25];
const CAMERA_HEIGHT: f64 = 1.6;
const PITCH_DEG: f64 = 12.0;
const DRIVE_LENGTH: f64 = 24.0;
const SPEED: f64 = 10.0;
const CUBE: f64 = 1.6;

#[derive(Debug, Clone, Copy)]
struct Lighting {
    ambient: f64,
    diffuse: f64,
    dir: [f64; 3],
    gain: [f64; 3],
    bias: [f64; 3],
}

impl Lighting {
    const NEUTRAL: Lighting = Lighting {
        ambient: 0.55,
        diffuse: 0.5,
        dir: [0.4, 0.6, 0.7],
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    fn shade(&self, albedo: [f64; 3], n: &Vector3<f64>) -> [f64; 3] {
        let l = Vector3::from(self.dir).normalize();
        let s = self.ambient + self.diffuse * n.dot(&l).max(0.0);
        std::array::from_fn(|c| (self.gain[c] * albedo[c] * s + self.bias[c]).clamp(0.0, 1.0))
    }
}

fn lighting(t: usize, shifts: bool) -> Lighting {
    if !shifts {
        return Lighting::NEUTRAL;
    }
    match t {
        0 => Lighting::NEUTRAL,
        1 => Lighting {
            ambient: 0.35,
            diffuse: 0.75,
            dir: [-0.6, -0.3, 0.75],
            gain: [0.95, 0.95, 1.05],
            bias: [0.02, 0.02, 0.0],
        },
        2 => Lighting {
            ambient: 0.45,
            diffuse: 0.6,
            dir: [0.1, -0.7, 0.7],
            gain: [1.05, 1.0, 0.92],
            bias: [0.0, 0.01, 0.03],
        },
        // held out: last training lighting, different exposure
        _ => Lighting {
            gain: [0.9, 0.92, 0.95],
            bias: [0.03, 0.02, 0.02],
            ..lighting(2, true)
        },
    }
}

/// Flat Gaussians with their albedo and surface normal, before shading.
struct Surfels {
    positions: Vec<Vector3<f64>>,
    quats: Vec<[f32; 4]>,
    log_scales: Vec<[f32; 3]>,
    albedo: Vec<[f64; 3]>,
    normals: Vec<Vector3<f64>>,
}

impl Surfels {
    fn new() -> Self {
        Surfels {
            positions: Vec::new(),
            quats: Vec::new(),
            log_scales: Vec::new(),
            albedo: Vec::new(),
            normals: Vec::new(),
        }
    }

    /// Grid of surfels over the parallelogram `origin + [0,1]·u + [0,1]·v`;
    /// the normal is `u × v`.
    fn patch(&mut self, origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, spacing: f64, albedo: &dyn Fn(&Vector3<f64>) -> [f64; 3]) {
        let nu = (u.norm() / spacing).ceil().max(1.0) as usize;
        let nv = (v.norm() / spacing).ceil().max(1.0) as usize;
        let (tu, tv) = (u.normalize(), v.normalize());
        let n = tu.cross(&tv).normalize();
        let rot = Matrix3::from_columns(&[tu, tv, n]);
        let q = rot_to_quat(&rot);
        let su = 0.7 * u.norm() / nu as f64;
        let sv = 0.7 * v.norm() / nv as f64;
        for j in 0..nv {
            for i in 0..nu {
                let p = origin + u * ((i as f64 + 0.5) / nu as f64) + v * ((j as f64 + 0.5) / nv as f64);
                self.positions.push(p);
                self.quats.push([q[0] as f32, q[1] as f32, q[2] as f32, q[3] as f32]);
                self.log_scales.push([su.ln() as f32, sv.ln() as f32, 0.01f64.ln() as f32]);
                self.albedo.push(albedo(&p));
                self.normals.push(n);
            }
        }
    }

    /// Five faces (no bottom) of the axis-aligned box `[lo, hi]`.
    fn open_box(&mut self, lo: Vector3<f64>, hi: Vector3<f64>, spacing: f64, albedo: &dyn Fn(&Vector3<f64>) -> [f64; 3]) {
        let d = hi - lo;
        let (ex, ey, ez) = (Vector3::x() * d.x, Vector3::y() * d.y, Vector3::z() * d.z);
        self.patch(Vector3::new(hi.x, lo.y, lo.z), ey, ez, spacing, albedo);
        self.patch(Vector3::new(lo.x, hi.y, lo.z), -ey, ez, spacing, albedo);
        self.patch(Vector3::new(hi.x, hi.y, lo.z), -ex, ez, spacing, albedo);
        self.patch(lo, ex, ez, spacing, albedo);
        self.patch(Vector3::new(lo.x, lo.y, hi.z), ex, ey, spacing, albedo);
    }

    fn shaded(&self, light: &Lighting, sh: ShConfig, has_rest: bool) -> GaussianSet<f32> {
        let mut g = GaussianSet::empty(sh, has_rest);
        let opacity = logit(0.97f32);
        for i in 0..self.positions.len() {
            let rgb = light.shade(self.albedo[i], &self.normals[i]);
            let p = self.positions[i];
            g.push(
                [p.x as f32, p.y as f32, p.z as f32],
                self.quats[i],
                self.log_scales[i],
                opacity,
                rgb.map(|c| ((c - SH_OFFSET) / SH_C0) as f32),
                None,
            );
        }
        g
    }
}

struct MovingCube {
    traversal: u32,
    node_id: u32,
    surfels: Surfels,
    track: BoxTrack,
}

/// The full synthetic scene: dataset plus one ground-truth graph per
/// traversal (its own lighting baked into the static colors).
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub dataset: TraversalDataset,
    pub ground_truth: BTreeMap<u32, SceneGraph<f32>>,
}

fn static_surfels(spacing: f64, rng: &mut ChaCha8Rng) -> Surfels {
    let ph: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut s = Surfels::new();
    let ground = move |p: &Vector3<f64>| {
        let a = (p.x * 1.3 + ph[0]).sin() * (p.y * 1.1 + ph[1]).cos();
        let b = (p.x * 0.45 + p.y * 0.3 + ph[2]).sin();
        [0.38 + 0.12 * a + 0.05 * b, 0.36 + 0.1 * a, 0.33 + 0.06 * a - 0.06 * b]
    };
    s.patch(Vector3::new(-4.0, -12.0, 0.0), Vector3::x() * 46.0, Vector3::y() * 25.0, spacing, &ground);
    let facade = |base: [f64; 3], k: f64, phase: f64| {
        move |p: &Vector3<f64>| {
            let w = ((p.x + p.y) * k + phase).sin() * (p.z * k * 1.3).sin();
            [base[0] + 0.15 * w, base[1] + 0.12 * w, base[2] + 0.1 * w]
        }
    };
    let sp = 0.8 * spacing;
    s.open_box(Vector3::new(6.0, 8.5, 0.0), Vector3::new(14.0, 11.0, 5.0), sp, &facade([0.7, 0.55, 0.4], 2.0, ph[3]));
    s.open_box(Vector3::new(16.0, -11.0, 0.0), Vector3::new(26.0, -8.0, 4.0), sp, &facade([0.45, 0.55, 0.7], 1.7, ph[4]));
    s.open_box(Vector3::new(20.0, 8.5, 0.0), Vector3::new(28.0, 10.5, 3.0), sp, &facade([0.5, 0.68, 0.45], 2.3, ph[5]));
    let median = |p: &Vector3<f64>| {
        let w = (p.x * 3.0).sin();
        [0.75 + 0.1 * w, 0.72 + 0.1 * w, 0.6]
    };
    s.open_box(Vector3::new(9.0, 1.5, 0.0), Vector3::new(13.0, 2.0, 1.2), sp, &median);
    s
}

fn cube_surfels(color: [f64; 3], spacing: f64) -> Surfels {
    let h = CUBE / 2.0;
    let mut s = Surfels::new();
    let tex = move |p: &Vector3<f64>| {
        let w = 0.5 + 0.5 * (2.0 * (p.x + p.y + p.z)).sin();
        std::array::from_fn(|c| color[c] * (0.7 + 0.3 * w))
    };
    s.open_box(Vector3::new(-h, -h, -h), Vector3::new(h, h, h), spacing, &tex);
    s
}

fn frame_times(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| if n > 1 { DRIVE_LENGTH * k as f64 / (n - 1) as f64 / SPEED } else { 0.0 })
        .collect()
}

fn straight_track(node_id: u32, traversal: u32, label: &str, start: [f64; 3], velocity: f64, t_end: f64) -> BoxTrack {
    let times: Vec<f64> = (0..5).map(|k| t_end * k as f64 / 4.0).collect();
    BoxTrack {
        node_id,
        traversal,
        label: label.into(),
        extent: [CUBE; 3],
        centers: times.iter().map(|&t| [start[0] + velocity * t, start[1], start[2]]).collect(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; times.len()],
        times,
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn synth_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    if cfg.traversals == 0 || cfg.traversals > 3 {
        return Err(Error::InvalidParameter("synthetic scenes support 1 to 3 training traversals".into()));
    }
    if cfg.frames_per_traversal == 0 || cfg.width == 0 || cfg.height == 0 || cfg.lidar_stride == 0 || !(cfg.spacing > 0.0) {
        return Err(Error::InvalidParameter("synthetic scene sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sh = ShConfig::default();
    let statics = static_surfels(cfg.spacing, &mut rng);
    let times = frame_times(cfg.frames_per_traversal);
    let t_end = *times.last().unwrap();

    let mut ids: Vec<(u32, f64, bool)> = (0..cfg.traversals).map(|t| (t as u32, LANES[t], false)).collect();
    if cfg.held_out {
        ids.push((3, LANES[3], true));
    }

    let mut cubes = Vec::new();
    let mut next_node = 0u32;
    for &(t, lane, _) in &ids {
        let hue: [f64; 3] = match t {
            0 => [0.85, 0.15, 0.12],
            1 => [0.15, 0.3, 0.85],
            2 => [0.9, 0.75, 0.1],
            _ => [0.7, 0.2, 0.75],
        };
        let x0 = 6.0 + rng.random_range(0.0..1.5);
        let track = straight_track(next_node, t, "car", [x0, lane, CUBE / 2.0], 12.0, t_end);
        cubes.push(MovingCube {
            traversal: t,
            node_id: next_node,
            surfels: cube_surfels(hue, 0.8 * cfg.spacing),
            track,
        });
        next_node += 1;
        if t == 1 {
            let track = straight_track(next_node, t, "parked", [15.0, -1.75, CUBE / 2.0], 0.0, t_end);
            cubes.push(MovingCube {
                traversal: t,
                node_id: next_node,
                surfels: cube_surfels([0.2, 0.7, 0.65], 0.8 * cfg.spacing),
                track,
            });
            next_node += 1;
        }
    }

    let mut ground_truth = BTreeMap::new();
    for &(t, _, _) in &ids {
        let light = lighting(t as usize, cfg.appearance_shifts);
        let mut g = SceneGraph::new(sh);
        g.static_node = statics.shaded(&light, sh, false);
        g.add_appearance(t);
        for c in cubes.iter().filter(|c| c.traversal == t) {
            let mut track: PoseTrack<f32> = c.track.pose_track()?;
            if c.track.label == "parked" {
                track.make_constant();
            }
            g.transients.push(TransientNode {
                traversal: t,
                node_id: c.node_id,
                gaussians: c.surfels.shaded(&light, sh, true),
                size: Vector3::repeat(CUBE as f32),
                pose_track: track,
                tolerance: DEFAULT_BOX_TOLERANCE as f32,
                is_static_object: c.track.label == "parked",
            });
        }
        g.validate()?;
        ground_truth.insert(t, g);
    }

    let (w, h) = (cfg.width, cfg.height);
    let k = Intrinsics {
        fx: cfg.focal,
        fy: cfg.focal,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
    };
    let raster = RasterConfig::default();
    let pitch = PITCH_DEG.to_radians();
    let mut traversals = Vec::new();
    let mut clouds = Vec::new();
    let mut frame_id = 0usize;
    for &(t, lane, held_out) in &ids {
        let graph = &ground_truth[&t];
        let mut frames = Vec::new();
        for &time in &times {
            let eye = Vector3::new(SPEED * time, lane, CAMERA_HEIGHT);
            let target = eye + Vector3::new(10.0, 0.0, -10.0 * pitch.tan());
            let cam = CameraFrame::new(frame_id, t, time, w, h, k, look_at(&eye, &target, &Vector3::z()));
            let cam32 = cam.cast::<f32>();
            let full = render(graph, &ViewRequest::traversal(t, time), &cam32, &raster)?.output;
            let bg_only = render(
                graph,
                &ViewRequest {
                    appearance: t,
                    transients: None,
                    time,
                },
                &cam32,
                &raster,
            )?
            .output;
            let image: Vec<f32> = full.color.iter().map(|&v| quantize(v)).collect();
            let mask: Vec<bool> = (0..w * h)
                .map(|p| {
                    (0..3).all(|c| (full.color[3 * p + c] - bg_only.color[3 * p + c]).abs() < 0.5 / 255.0)
                        && (full.alpha[p] - bg_only.alpha[p]).abs() < 1e-3
                })
                .collect();
            let depth: Vec<f32> = (0..w * h).map(|p| if full.alpha[p] > 0.5 { full.depth[p] } else { 0.0 }).collect();

            let ext = cam.base_extrinsic();
            let (rt, c) = (ext.rotation.transpose(), ext.center());
            let mut points = Vec::new();
            for y in (0..h).step_by(cfg.lidar_stride) {
                for x in (0..w).step_by(cfg.lidar_stride) {
                    let p = y * w + x;
                    if full.alpha[p] <= 0.99 {
                        continue;
                    }
                    let d = depth[p] as f64;
                    let ray = Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0);
                    let xw = rt * (ray * d) + c;
                    points.push([
                        xw.x as f32,
                        xw.y as f32,
                        xw.z as f32,
                        image[3 * p],
                        image[3 * p + 1],
                        image[3 * p + 2],
                    ]);
                }
            }
            clouds.push(PointCloud {
                traversal: t,
                timestamp: time,
                points,
            });
            frames.push(FrameData {
                camera: cam,
                camera_id: "front".into(),
                image,
                pseudo_depth: depth,
                mask: Some(mask),
                cloud: clouds.len() - 1,
            });
            frame_id += 1;
        }
        traversals.push(TraversalData { id: t, held_out, frames });
    }

    Ok(SynthScene {
        dataset: TraversalDataset {
            name: format!("synthetic-street-{}", cfg.seed),
            traversals,
            clouds,
            boxes: cubes.into_iter().map(|c| c.track).collect(),
        },
        ground_truth,
    })
}

/// Writes the dataset (see [`save_scene`]) and one ground-truth checkpoint
/// per traversal under `ground_truth/`. Returns the manifest path.
pub fn write_synth(dir: &Path, scene: &SynthScene) -> Result<PathBuf> {
    let manifest = save_scene(dir, &scene.dataset)?;
    for (t, g) in &scene.ground_truth {
        let ck = Checkpoint {
            graph: g.clone(),
            optimizer: None,
            cameras: Vec::new(),
            step: 0,
            extra: serde_json::json!({ "ground_truth_traversal": t }),
        };
        save_checkpoint(&dir.join(format!("ground_truth/t{t}.ckpt")), &ck)?;
    }
    Ok(manifest)
}
