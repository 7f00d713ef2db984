//! The full training loss for one view and its gradient on every learnable
//! tensor: scene graph, camera pose delta, and camera color affine.

use crate::appearance::{camera_affine_apply, camera_affine_backward};
use crate::camera::CameraFrame;
use crate::losses::{
    depth_inv_l1, flatten_loss, ncc_loss, normal_loss, oob_loss, photometric, pseudo_normal_from_depth, DepthSample,
    LossBreakdown, LossWeights, NccConfig,
};
use crate::raster::{self, ImageGrads, RasterConfig, RasterGrads, RenderOutput};
use crate::real::Real;
use crate::scene::{RenderView, SceneGrads, SceneGraph, ViewRequest};
use crate::Result;

/// Supervision for one training frame.
#[derive(Debug, Clone)]
pub struct FrameTargets<T: Real> {
    pub image: Vec<T>,
    /// Dense prior, `≤ 0` where invalid.
    pub pseudo_depth: Vec<T>,
    pub lidar: Vec<DepthSample>,
    pub pseudo_normal: Vec<T>,
    pub normal_valid: Vec<bool>,
}

impl<T: Real> FrameTargets<T> {
    pub fn new(image: Vec<T>, pseudo_depth: Vec<T>, lidar: Vec<DepthSample>, cam: &CameraFrame<T>) -> Self {
        let (pseudo_normal, normal_valid) = pseudo_normal_from_depth(&pseudo_depth, cam.width, cam.height, &cam.intrinsics);
        FrameTargets {
            image,
            pseudo_depth,
            lidar,
            pseudo_normal,
            normal_valid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ncc: NccConfig,
    pub flatten_ratio: f64,
    /// Include the flatten term on this step.
    pub flatten: bool,
    pub raster: RasterConfig,
    /// Alpha below which depth samples are ignored.
    pub depth_alpha_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            ncc: NccConfig::default(),
            flatten_ratio: 10.0,
            flatten: true,
            raster: RasterConfig::default(),
            depth_alpha_eps: 1e-4,
        }
    }
}

pub struct Objective<T: Real> {
    pub loss: LossBreakdown,
    pub grads: SceneGrads<T>,
    pub pose_delta: [T; 6],
    pub affine: [T; 12],
    pub raster: RasterGrads<T>,
    pub view: RenderView<T>,
    /// Render after the camera affine.
    pub output: RenderOutput<T>,
}

fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

/// Evaluates the weighted total loss of `req` seen from `cam`.
pub fn view_objective<T: Real>(
    graph: &SceneGraph<T>,
    req: &ViewRequest,
    cam: &CameraFrame<T>,
    targets: &FrameTargets<T>,
    cfg: &ObjectiveConfig,
) -> Result<Objective<T>> {
    let w = &cfg.weights;
    let rendered = raster::render(graph, req, cam, &cfg.raster)?;
    let out = &rendered.output;
    let (width, height) = (out.width, out.height);
    let n = width * height;
    let mut loss = LossBreakdown::default();
    let mut up = ImageGrads::zeros(n);

    let color = camera_affine_apply(&out.color, &cam.affine);
    let (photo, l1v, ssimv) = photometric(&color, &targets.image, width, height, None, w.rgb);
    loss.l1 = l1v.to_f64();
    loss.ssim = ssimv.to_f64();
    let (d_color, affine) = camera_affine_backward(&out.color, &cam.affine, &photo.grad);
    up.color = d_color;

    if w.depth > 0.0 {
        let t = depth_inv_l1(&out.depth, &out.alpha, &targets.lidar, cfg.depth_alpha_eps);
        loss.depth = t.value.to_f64();
        axpy(&mut up.depth, T::of(w.depth), &t.grad);
    }
    if w.ncc > 0.0 {
        let t = ncc_loss(&out.depth, &targets.pseudo_depth, width, height, None, &cfg.ncc);
        loss.ncc = t.value.to_f64();
        axpy(&mut up.depth, T::of(w.ncc), &t.grad);
    }
    if w.normal > 0.0 {
        let t = normal_loss(&out.normal, &targets.pseudo_normal, &targets.normal_valid, width, height);
        loss.normal = t.value.to_f64();
        axpy(&mut up.normal, T::of(w.normal), &t.grad);
    }

    let mut grads = SceneGrads::zeros_like(graph);
    let rg = raster::backward(graph, &rendered, cam, &up, &mut grads)?;

    if cfg.flatten && w.flatten > 0.0 {
        let wf = T::of(w.flatten);
        let mut g = vec![T::zero(); graph.static_node.log_scales.len()];
        let mut v = flatten_loss(&graph.static_node, cfg.flatten_ratio, Some(&mut g));
        axpy(&mut grads.static_node.log_scales, wf, &g);
        for (node, tg) in graph.transients.iter().zip(grads.transients.iter_mut()) {
            let mut g = vec![T::zero(); node.gaussians.log_scales.len()];
            v += flatten_loss(&node.gaussians, cfg.flatten_ratio, Some(&mut g));
            axpy(&mut tg.gaussians.log_scales, wf, &g);
        }
        loss.flatten = v.to_f64();
    }
    if w.oob > 0.0 && !graph.transients.is_empty() {
        let mut g: Vec<Vec<T>> = graph.transients.iter().map(|t| vec![T::zero(); t.gaussians.len()]).collect();
        loss.oob = oob_loss(graph, Some(&mut g)).to_f64();
        for (tg, gi) in grads.transients.iter_mut().zip(&g) {
            axpy(&mut tg.gaussians.opacity_logits, T::of(w.oob), gi);
        }
    }
    loss.combine(w)?;

    let output = RenderOutput {
        color,
        ..rendered.output.clone()
    };
    Ok(Objective {
        loss,
        grads,
        pose_delta: rg.pose_delta,
        affine,
        raster: rg,
        view: rendered.view,
        output,
    })
}
