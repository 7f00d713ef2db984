//! Tile-based differentiable Gaussian rasterizer producing color, depth,
//! normal, and alpha maps, with a hand-written reverse pass.

pub mod composite;
pub mod project;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::gaussian::{GaussianGrads, GaussianSet};
use crate::real::Real;
use crate::scene::{RenderView, SceneGrads, SceneGraph, ViewRequest};
use crate::{Error, Result};

use composite::{Accum, RawPixelGrad, TileGrid};
use project::{ProjectedSplat, SplatCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub near: f64,
    /// Added to the diagonal of every 2D covariance, in px².
    pub blur: f64,
    pub tile: usize,
    pub background: [f64; 3],
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub t_min: f64,
    /// Below this accumulated alpha, depth and normal are reported as zero.
    pub depth_eps: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            near: 0.2,
            blur: 0.3,
            tile: 16,
            background: [0.0; 3],
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            t_min: 1e-4,
            depth_eps: 1e-4,
        }
    }
}

/// Rendered maps, row-major, `3·W·H` for color and normal.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T: Real> {
    pub width: usize,
    pub height: usize,
    pub color: Vec<T>,
    /// Alpha-normalized view depth.
    pub depth: Vec<T>,
    /// Alpha-normalized camera-space normal.
    pub normal: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState<T: Real> {
    width: usize,
    height: usize,
    num_gaussians: usize,
    splats: Vec<ProjectedSplat<T>>,
    caches: Vec<SplatCache<T>>,
    grid: TileGrid,
    accum: Accum<T>,
    cfg: RasterConfig,
}

impl<T: Real> ForwardState<T> {
    pub fn num_splats(&self) -> usize {
        self.splats.len()
    }

    pub fn splats(&self) -> &[ProjectedSplat<T>] {
        &self.splats
    }

    pub fn tile_entries(&self) -> usize {
        self.grid.num_entries()
    }
}

/// Upstream gradients on a [`RenderOutput`]. Empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct ImageGrads<T: Real> {
    pub color: Vec<T>,
    pub depth: Vec<T>,
    pub normal: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Real> ImageGrads<T> {
    pub fn zeros(n: usize) -> Self {
        ImageGrads {
            color: vec![T::zero(); 3 * n],
            depth: vec![T::zero(); n],
            normal: vec![T::zero(); 3 * n],
            alpha: vec![T::zero(); n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RasterGrads<T: Real> {
    pub gaussians: GaussianGrads<T>,
    pub pose_delta: [T; 6],
    /// Norm of the screen-space mean gradient in NDC units, per Gaussian.
    pub mean2d_ndc: Vec<T>,
    /// Whether the Gaussian produced a splat in this view.
    pub visible: Vec<bool>,
}

/// Renders a flat Gaussian set.
pub fn render_gaussians<T: Real>(
    g: &GaussianSet<T>,
    cam: &CameraFrame<T>,
    cfg: &RasterConfig,
) -> (RenderOutput<T>, ForwardState<T>) {
    let (w, h) = (cam.width, cam.height);
    let ext = cam.extrinsic();
    let (splats, caches) = project::project_all(g, &ext, &cam.intrinsics, w, h, cfg);
    let (splats, caches) = sorted(splats, caches);
    let grid = TileGrid::build(&splats, w, h, cfg.tile.max(1));
    let accum = composite::forward_tiled(&splats, &grid, w, h, cfg);
    let out = finish(&accum, w, h, cfg);
    let state = ForwardState {
        width: w,
        height: h,
        num_gaussians: g.len(),
        splats,
        caches,
        grid,
        accum,
        cfg: *cfg,
    };
    (out, state)
}

/// Same image as [`render_gaussians`], computed without tiling. Slow; for checks.
pub fn render_gaussians_naive<T: Real>(g: &GaussianSet<T>, cam: &CameraFrame<T>, cfg: &RasterConfig) -> RenderOutput<T> {
    let (w, h) = (cam.width, cam.height);
    let ext = cam.extrinsic();
    let (splats, caches) = project::project_all(g, &ext, &cam.intrinsics, w, h, cfg);
    let (splats, _) = sorted(splats, caches);
    let accum = composite::forward_naive(&splats, w, h, cfg);
    finish(&accum, w, h, cfg)
}

fn sorted<T: Real>(
    mut splats: Vec<ProjectedSplat<T>>,
    caches: Vec<SplatCache<T>>,
) -> (Vec<ProjectedSplat<T>>, Vec<SplatCache<T>>) {
    let order = composite::sort_by_depth(&mut splats);
    let caches = order.iter().map(|&i| caches[i]).collect();
    (splats, caches)
}

fn finish<T: Real>(acc: &Accum<T>, w: usize, h: usize, cfg: &RasterConfig) -> RenderOutput<T> {
    let n = w * h;
    let bg = cfg.background.map(T::of);
    let eps = T::of(cfg.depth_eps);
    let mut out = RenderOutput {
        width: w,
        height: h,
        color: vec![T::zero(); 3 * n],
        depth: vec![T::zero(); n],
        normal: vec![T::zero(); 3 * n],
        alpha: vec![T::zero(); n],
    };
    for p in 0..n {
        let a = T::one() - acc.t_final[p];
        out.alpha[p] = a;
        for c in 0..3 {
            out.color[3 * p + c] = acc.color[3 * p + c] + (T::one() - a) * bg[c];
        }
        if a > eps {
            out.depth[p] = acc.depth_raw[p] / a;
            for c in 0..3 {
                out.normal[3 * p + c] = acc.normal_raw[3 * p + c] / a;
            }
        }
    }
    out
}

fn check_len<T>(v: &[T], n: usize, what: &str) -> Result<()> {
    if v.is_empty() || v.len() == n {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} gradient has {} entries, expected {n}", v.len())))
    }
}

#[inline]
fn at<T: Real>(v: &[T], i: usize) -> T {
    if v.is_empty() {
        T::zero()
    } else {
        v[i]
    }
}

/// Reverse pass for [`render_gaussians`].
pub fn backward_gaussians<T: Real>(
    g: &GaussianSet<T>,
    cam: &CameraFrame<T>,
    out: &RenderOutput<T>,
    state: &ForwardState<T>,
    grads: &ImageGrads<T>,
) -> Result<RasterGrads<T>> {
    let (w, h) = (state.width, state.height);
    let n = w * h;
    if cam.width != w || cam.height != h || out.num_pixels() != n || g.len() != state.num_gaussians {
        return Err(Error::Contract("forward state does not match camera or Gaussians".into()));
    }
    check_len(&grads.color, 3 * n, "color")?;
    check_len(&grads.depth, n, "depth")?;
    check_len(&grads.normal, 3 * n, "normal")?;
    check_len(&grads.alpha, n, "alpha")?;

    let cfg = &state.cfg;
    let bg = cfg.background.map(T::of);
    let eps = T::of(cfg.depth_eps);
    let upstream: Vec<RawPixelGrad<T>> = (0..n)
        .into_par_iter()
        .with_min_len(1024)
        .map(|p| {
            let a = out.alpha[p];
            let gc = [at(&grads.color, 3 * p), at(&grads.color, 3 * p + 1), at(&grads.color, 3 * p + 2)];
            let mut ga = at(&grads.alpha, p) - (gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2]);
            let mut gz = T::zero();
            let mut gn = [T::zero(); 3];
            if a > eps {
                let gd = at(&grads.depth, p);
                gz = gd / a;
                ga -= gd * out.depth[p] / a;
                for c in 0..3 {
                    let g = at(&grads.normal, 3 * p + c);
                    gn[c] = g / a;
                    ga -= g * out.normal[3 * p + c] / a;
                }
            }
            RawPixelGrad {
                color: gc,
                depth: gz,
                normal: gn,
                alpha: ga,
            }
        })
        .collect();

    let splat_grads = composite::backward_tiled(&state.splats, &state.grid, &state.accum, &upstream, w, h, cfg);

    let ext = cam.extrinsic();
    let k = &cam.intrinsics;
    let per_splat: Vec<_> = (0..state.splats.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|s| project::project_backward_one(g, &state.splats[s], &state.caches[s], &ext, k, &splat_grads[s]))
        .collect();

    let mut gg = GaussianGrads::zeros_like(g);
    let mut mean2d_ndc = vec![T::zero(); g.len()];
    let mut visible = vec![false; g.len()];
    let mut d_rot = Matrix3::zeros();
    let mut d_trans = Vector3::zeros();
    let rs = g.rest_stride();
    let (hw, hh) = (T::of(w as f64 * 0.5), T::of(h as f64 * 0.5));
    for (s, r) in per_splat.iter().enumerate() {
        let i = state.splats[s].gaussian as usize;
        visible[i] = true;
        let m = &splat_grads[s].mean2d;
        let gx = m[0] * hw;
        let gy = m[1] * hh;
        mean2d_ndc[i] = (gx * gx + gy * gy).sqrt();
        for c in 0..3 {
            gg.positions[3 * i + c] += r.position[c];
            gg.log_scales[3 * i + c] += r.log_scale[c];
            gg.sh_base[3 * i + c] += r.sh_base[c];
        }
        for c in 0..4 {
            gg.quats[4 * i + c] += r.quat[c];
        }
        gg.opacity_logits[i] += r.opacity_logit;
        for (d, v) in gg.sh_rest[rs * i..rs * (i + 1)].iter_mut().zip(&r.sh_rest) {
            *d += *v;
        }
        d_rot += r.ext_rot;
        d_trans += r.ext_trans;
    }
    Ok(RasterGrads {
        gaussians: gg,
        pose_delta: cam.pose_delta_backward(&d_rot, &d_trans),
        mean2d_ndc,
        visible,
    })
}

/// A rendered subgraph view.
#[derive(Debug, Clone)]
pub struct Rendered<T: Real> {
    pub output: RenderOutput<T>,
    pub view: RenderView<T>,
    pub state: ForwardState<T>,
}

/// Assembles the subgraph for `req` and renders it from `cam`.
pub fn render<T: Real>(
    graph: &SceneGraph<T>,
    req: &ViewRequest,
    cam: &CameraFrame<T>,
    cfg: &RasterConfig,
) -> Result<Rendered<T>> {
    if !cam.valid() {
        return Err(Error::InvalidParameter(format!("camera {} is malformed", cam.frame_id)));
    }
    let view = graph.assemble(req)?;
    let (output, state) = render_gaussians(&view.gaussians, cam, cfg);
    Ok(Rendered { output, view, state })
}

/// Reverse pass for [`render`]; accumulates into `out` and returns the
/// view-level gradients (pose delta and densification statistics, indexed by
/// the view's provenance).
pub fn backward<T: Real>(
    graph: &SceneGraph<T>,
    rendered: &Rendered<T>,
    cam: &CameraFrame<T>,
    grads: &ImageGrads<T>,
    out: &mut SceneGrads<T>,
) -> Result<RasterGrads<T>> {
    let rg = backward_gaussians(&rendered.view.gaussians, cam, &rendered.output, &rendered.state, grads)?;
    rendered.view.scatter(graph, &rg.gaussians, out);
    Ok(rg)
}
