//! Checkpoint container: every parameter array, every Adam moment, camera
//! corrections, and trainer counters.
//!
//! Layout (little-endian):
//! ```text
//! b"MTGSCKPT" | u32 version | u64 header length | JSON header | f32 payload
//! ```
//! The header lists each payload array by key and length, in payload order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::formats::{put_f32s, read_file, write_atomic, Reader};
use crate::gaussian::GaussianSet;
use crate::optim::{AdamMoments, Optimizer, ParamGroupSchedule, Slot};
use crate::scene::{AppearanceNode, PoseTrack, SceneGraph, TransientNode};
use crate::sh::ShConfig;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTGSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learned per-frame camera corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub frame_id: usize,
    pub pose_delta: [f32; 6],
    pub affine: [f32; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: SceneGraph<f32>,
    pub optimizer: Option<Optimizer>,
    pub cameras: Vec<CameraState>,
    pub step: usize,
    /// Free-form trainer state (config echo, RNG positions).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TransientMeta {
    traversal: u32,
    node_id: u32,
    size: [f32; 3],
    tolerance: f32,
    is_static_object: bool,
    times: Vec<f64>,
    constant: bool,
}

#[derive(Serialize, Deserialize)]
struct MomentMeta {
    key: String,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    schedules: Vec<ParamGroupSchedule>,
    total_steps: usize,
    skipped: BTreeMap<String, u64>,
    moments: Vec<MomentMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    sh_degree: usize,
    step: usize,
    appearance: Vec<u32>,
    transients: Vec<TransientMeta>,
    trajectories: BTreeMap<u32, Vec<[f64; 3]>>,
    cameras: Vec<usize>,
    optimizer: Option<OptimMeta>,
    arrays: Vec<(String, usize)>,
    extra: serde_json::Value,
}

struct Payload {
    arrays: Vec<(String, usize)>,
    data: Vec<u8>,
}

impl Payload {
    fn push(&mut self, key: String, v: &[f32]) {
        self.arrays.push((key, v.len()));
        put_f32s(&mut self.data, v);
    }
}

fn push_set(p: &mut Payload, prefix: &str, g: &GaussianSet<f32>) {
    p.push(format!("{prefix}.positions"), &g.positions);
    p.push(format!("{prefix}.quats"), &g.quats);
    p.push(format!("{prefix}.log_scales"), &g.log_scales);
    p.push(format!("{prefix}.opacity_logits"), &g.opacity_logits);
    p.push(format!("{prefix}.sh_base"), &g.sh_base);
    if g.has_rest {
        p.push(format!("{prefix}.sh_rest"), &g.sh_rest);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let g = &ck.graph;
    let mut p = Payload {
        arrays: Vec::new(),
        data: Vec::new(),
    };
    push_set(&mut p, "static", &g.static_node);
    for (t, a) in &g.appearance {
        p.push(format!("appearance.{t}.residuals"), &a.residuals);
    }
    for (i, t) in g.transients.iter().enumerate() {
        push_set(&mut p, &format!("transient.{i}"), &t.gaussians);
        p.push(format!("transient.{i}.rotations"), &t.pose_track.rotations);
        p.push(format!("transient.{i}.translations"), &t.pose_track.translations);
    }
    for (i, c) in ck.cameras.iter().enumerate() {
        p.push(format!("camera.{i}.pose_delta"), &c.pose_delta);
        p.push(format!("camera.{i}.affine"), &c.affine);
    }
    let optimizer = ck.optimizer.as_ref().map(|o| {
        let mut moments = Vec::new();
        for (slot, m) in &o.moments {
            let key = slot.key();
            p.push(format!("adam.m.{key}"), &m.m);
            p.push(format!("adam.v.{key}"), &m.v);
            moments.push(MomentMeta { key, step: m.step });
        }
        OptimMeta {
            schedules: o.schedules.values().cloned().collect(),
            total_steps: o.total_steps,
            skipped: o.skipped.clone(),
            moments,
        }
    });
    let header = Header {
        sh_degree: g.sh.l_max,
        step: ck.step,
        appearance: g.appearance.keys().copied().collect(),
        transients: g
            .transients
            .iter()
            .map(|t| TransientMeta {
                traversal: t.traversal,
                node_id: t.node_id,
                size: [t.size.x, t.size.y, t.size.z],
                tolerance: t.tolerance,
                is_static_object: t.is_static_object,
                times: t.pose_track.times.clone(),
                constant: t.pose_track.constant,
            })
            .collect(),
        trajectories: g.trajectories.clone(),
        cameras: ck.cameras.iter().map(|c| c.frame_id).collect(),
        optimizer,
        arrays: p.arrays,
        extra: ck.extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + p.data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&p.data);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, path)
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(buf, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let mut arrays: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (key, len) in &header.arrays {
        arrays.insert(key.clone(), r.f32s(*len)?);
    }
    r.finish()?;
    let mut take = |key: &str| -> Result<Vec<f32>> {
        arrays.remove(key).ok_or_else(|| Error::corrupt(path, format!("missing array {key}")))
    };

    let sh = ShConfig::new(header.sh_degree)?;
    let mut set = |prefix: &str, has_rest: bool| -> Result<GaussianSet<f32>> {
        let g = GaussianSet {
            sh,
            has_rest,
            positions: take(&format!("{prefix}.positions"))?,
            quats: take(&format!("{prefix}.quats"))?,
            log_scales: take(&format!("{prefix}.log_scales"))?,
            opacity_logits: take(&format!("{prefix}.opacity_logits"))?,
            sh_base: take(&format!("{prefix}.sh_base"))?,
            sh_rest: if has_rest { take(&format!("{prefix}.sh_rest"))? } else { Vec::new() },
        };
        g.check().map_err(|e| Error::corrupt(path, e.to_string()))?;
        Ok(g)
    };
    let mut graph = SceneGraph::new(sh);
    graph.static_node = set("static", false)?;
    let mut transients = Vec::new();
    for (i, m) in header.transients.iter().enumerate() {
        transients.push((i, set(&format!("transient.{i}"), true)?, m));
    }
    for (i, gaussians, m) in transients {
        let mut track = PoseTrack::new(
            m.times.clone(),
            take(&format!("transient.{i}.rotations"))?,
            take(&format!("transient.{i}.translations"))?,
        )
        .map_err(|e| Error::corrupt(path, e.to_string()))?;
        track.constant = m.constant;
        graph.transients.push(TransientNode {
            traversal: m.traversal,
            node_id: m.node_id,
            gaussians,
            size: Vector3::from(m.size),
            pose_track: track,
            tolerance: m.tolerance,
            is_static_object: m.is_static_object,
        });
    }
    for &t in &header.appearance {
        let residuals = take(&format!("appearance.{t}.residuals"))?;
        graph.appearance.insert(t, AppearanceNode { traversal: t, residuals });
    }
    graph.trajectories = header.trajectories;
    graph.validate().map_err(|e| Error::corrupt(path, e.to_string()))?;

    let mut cameras = Vec::new();
    for (i, &frame_id) in header.cameras.iter().enumerate() {
        let pd = take(&format!("camera.{i}.pose_delta"))?;
        let af = take(&format!("camera.{i}.affine"))?;
        cameras.push(CameraState {
            frame_id,
            pose_delta: pd.try_into().map_err(|_| Error::corrupt(path, "pose delta length"))?,
            affine: af.try_into().map_err(|_| Error::corrupt(path, "affine length"))?,
        });
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let mut opt = Optimizer::new(o.schedules, o.total_steps).map_err(|e| Error::corrupt(path, e.to_string()))?;
            opt.skipped = o.skipped;
            for mm in o.moments {
                let slot = Slot::from_key(&mm.key).ok_or_else(|| Error::corrupt(path, format!("unknown slot {}", mm.key)))?;
                let m = take(&format!("adam.m.{}", mm.key))?;
                let v = take(&format!("adam.v.{}", mm.key))?;
                opt.moments.insert(slot, AdamMoments { m, v, step: mm.step });
            }
            Some(opt)
        }
    };
    if let Some(k) = arrays.keys().next() {
        return Err(Error::corrupt(path, format!("unexpected array {k}")));
    }
    Ok(Checkpoint {
        graph,
        optimizer,
        cameras,
        step: header.step,
        extra: header.extra,
    })
}
