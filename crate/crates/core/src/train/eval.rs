//! Rendering of dataset frames and metric reports.

use rayon::prelude::*;

use super::Trainer;
use crate::appearance::camera_affine_apply;
use crate::camera::CameraFrame;
use crate::io::{FrameData, TraversalDataset};
use crate::losses::DepthSample;
use crate::metrics::{depth_metrics, psnr, psnr_affine, ssim_metric, EvalReport, FrameMetrics};
use crate::raster::{render, RasterConfig, RenderOutput};
use crate::scene::{SceneGraph, ViewRequest};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub raster: RasterConfig,
    /// Forces an appearance node instead of the nearest training traversal.
    pub appearance: Option<u32>,
    /// Use the frames' transient masks when present.
    pub use_masks: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            raster: RasterConfig::default(),
            appearance: None,
            use_masks: true,
        }
    }
}

/// Metrics of one rendered frame against its ground truth.
pub fn frame_metrics(
    out: &RenderOutput<f32>,
    color: &[f32],
    frame: &FrameData,
    lidar: &[DepthSample],
    mask: Option<&[bool]>,
) -> FrameMetrics {
    let (w, h) = (out.width, out.height);
    FrameMetrics {
        frame_id: frame.camera.frame_id,
        traversal: frame.camera.traversal,
        psnr: psnr(color, &frame.image, mask),
        psnr_affine: psnr_affine(color, &frame.image, mask),
        ssim: ssim_metric(color, &frame.image, w, h, mask),
        absrel: depth_metrics(&out.depth, lidar, mask).map(|d| d.0),
        delta1: depth_metrics(&out.depth, lidar, mask).map(|d| d.1),
        pixels: mask.map_or(w * h, |m| m.iter().filter(|v| **v).count()),
        depth_samples: lidar.iter().filter(|s| mask.is_none_or(|m| m[s.pixel])).count(),
    }
}

/// Appearance node used for traversal `id` under `opts`.
pub fn appearance_for(graph: &SceneGraph<f32>, data: &TraversalDataset, id: u32, opts: &EvalOptions) -> Result<u32> {
    match opts.appearance {
        Some(a) if graph.appearance.contains_key(&a) => Ok(a),
        Some(a) => Err(Error::MissingAppearance(a)),
        None if graph.appearance.contains_key(&id) => Ok(id),
        None => graph.select_appearance(&data.trajectory(id)),
    }
}

/// Renders every frame of the given traversals from the dataset poses,
/// background only, and scores them (transient pixels masked out).
pub fn evaluate_traversals(
    graph: &SceneGraph<f32>,
    data: &TraversalDataset,
    ids: &[u32],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut jobs = Vec::new();
    let mut chosen = serde_json::Map::new();
    for &id in ids {
        let trav = data.traversal(id).ok_or_else(|| Error::Config(format!("unknown traversal {id}")))?;
        let app = appearance_for(graph, data, id, opts)?;
        chosen.insert(id.to_string(), app.into());
        for f in &trav.frames {
            jobs.push((f, app));
        }
    }
    let frames: Vec<FrameMetrics> = jobs
        .par_iter()
        .map(|(f, app)| -> Result<FrameMetrics> {
            let cam: CameraFrame<f32> = f.camera.cast();
            let req = ViewRequest {
                appearance: *app,
                transients: None,
                time: cam.timestamp,
            };
            let out = render(graph, &req, &cam, &opts.raster)?.output;
            let mask = if opts.use_masks {
                if f.mask.is_none() {
                    log::warn!("frame {} has no mask; scoring unmasked", f.camera.frame_id);
                }
                f.mask.as_deref()
            } else {
                None
            };
            Ok(frame_metrics(&out, &out.color, f, &data.lidar_samples(f), mask))
        })
        .collect::<Result<_>>()?;
    let config = serde_json::json!({
        "traversals": ids,
        "appearance": chosen,
        "masked": opts.use_masks,
    });
    Ok(EvalReport::new(frames, config))
}

/// Scores the training views with everything the trainer learned: camera
/// corrections, the frame's appearance node, and its transients.
pub fn evaluate_training_views(trainer: &Trainer, data: &TraversalDataset) -> Result<EvalReport> {
    let lookup: std::collections::HashMap<usize, &FrameData> = data.frames().map(|f| (f.camera.frame_id, f)).collect();
    let frames: Vec<FrameMetrics> = trainer
        .frames
        .par_iter()
        .map(|tf| -> Result<FrameMetrics> {
            let f = lookup
                .get(&tf.camera.frame_id)
                .ok_or_else(|| Error::Config(format!("frame {} not in dataset", tf.camera.frame_id)))?;
            let out = render(&trainer.graph, &tf.request(), &tf.camera, &trainer.config.raster)?.output;
            let color = camera_affine_apply(&out.color, &tf.camera.affine);
            Ok(frame_metrics(&out, &color, f, &tf.targets.lidar, None))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::new(frames, serde_json::json!({ "training_views": true })))
}
