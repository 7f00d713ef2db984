//! EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Extrinsic, Intrinsics};
use crate::gaussian::{covariance, covariance_backward, quat_to_rot, quat_to_rot_backward, shortest_axis, GaussianSet};
use crate::real::{sigmoid, Real};
use crate::sh::{eval_sh, eval_sh_backward};

use super::RasterConfig;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat<T: Real> {
    /// Index into the flattened view.
    pub gaussian: u32,
    pub mean2d: Vector2<T>,
    /// `(a, b, c)` of the inverse 2D covariance `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub cov2d: [T; 3],
    pub opacity: T,
    pub rgb: [T; 3],
    pub view_depth: T,
    pub normal_cam: Vector3<T>,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the footprint.
    pub rect: [usize; 4],
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatCache<T: Real> {
    p_cam: Vector3<T>,
    rot: Matrix3<T>,
    scale: Vector3<T>,
    cov_world: Matrix3<T>,
    cov_cam: Matrix3<T>,
    jac: Matrix2x3<T>,
    clamped: [bool; 2],
    ratio: [T; 2],
    raw_rgb: [T; 3],
    dir: Vector3<T>,
    normal_axis: usize,
    normal_sign: T,
}

/// Gradients on one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGrad<T: Real> {
    pub mean2d: [T; 2],
    pub conic: [T; 3],
    pub opacity: T,
    pub rgb: [T; 3],
    pub depth: T,
    pub normal: [T; 3],
}

impl<T: Real> Default for SplatGrad<T> {
    fn default() -> Self {
        SplatGrad {
            mean2d: [T::zero(); 2],
            conic: [T::zero(); 3],
            opacity: T::zero(),
            rgb: [T::zero(); 3],
            depth: T::zero(),
            normal: [T::zero(); 3],
        }
    }
}

impl<T: Real> SplatGrad<T> {
    pub fn add(&mut self, o: &SplatGrad<T>) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.rgb[k] += o.rgb[k];
            self.normal[k] += o.normal[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Frustum limits on `x/z` and `y/z` used when linearizing the projection,
/// expressed as a margin around the image in pixels.
const JACOBIAN_MARGIN: f64 = 0.15;

fn ratio_limits<T: Real>(k: &Intrinsics<T>, width: usize, height: usize) -> [[T; 2]; 2] {
    let w = T::of(width as f64);
    let h = T::of(height as f64);
    let m = T::of(JACOBIAN_MARGIN);
    [
        [(-m * w - k.cx) / k.fx, ((T::one() + m) * w - k.cx) / k.fx],
        [(-m * h - k.cy) / k.fy, ((T::one() + m) * h - k.cy) / k.fy],
    ]
}

/// Projects one Gaussian; `None` when culled.
#[allow(clippy::too_many_arguments)]
pub(crate) fn project_one<T: Real>(
    g: &GaussianSet<T>,
    i: usize,
    ext: &Extrinsic<T>,
    center: &Vector3<T>,
    k: &Intrinsics<T>,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Option<(ProjectedSplat<T>, SplatCache<T>)> {
    let x = g.position(i);
    let p = ext.apply(&x);
    if !(p.z >= T::of(cfg.near)) {
        return None;
    }
    let rot = quat_to_rot(&g.quat(i)).ok()?;
    let scale = g.scale(i);
    let cov_world = covariance(&rot, &scale);
    let cov_cam = ext.rotation * cov_world * ext.rotation.transpose();

    let lim = ratio_limits(k, width, height);
    let rx = p.x / p.z;
    let ry = p.y / p.z;
    let cx = rx.clamp(lim[0][0], lim[0][1]);
    let cy = ry.clamp(lim[1][0], lim[1][1]);
    let iz = T::one() / p.z;
    let jac = Matrix2x3::new(k.fx * iz, T::zero(), -k.fx * cx * iz, T::zero(), k.fy * iz, -k.fy * cy * iz);
    let cov = jac * cov_cam * jac.transpose();
    let blur = T::of(cfg.blur);
    let (a, b, c) = (cov[(0, 0)] + blur, cov[(0, 1)], cov[(1, 1)] + blur);
    let det = a * c - b * b;
    if !(det > T::zero()) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean2d = Vector2::new(k.fx * rx + k.cx, k.fy * ry + k.cy);

    let opacity = sigmoid(g.opacity_logits[i]);
    let rect = footprint(&mean2d, a, c, opacity, width, height, cfg)?;

    let dir = x - center;
    let (rgb, raw_rgb) = eval_sh(&g.sh_base[3 * i..3 * i + 3], g.rest(i), &dir, if g.has_rest { g.sh.l_max } else { 0 });

    let axis = shortest_axis(&scale);
    let n_cam = ext.rotation * rot.column(axis);
    let sign = if n_cam.dot(&p) > T::zero() { -T::one() } else { T::one() };

    Some((
        ProjectedSplat {
            gaussian: i as u32,
            mean2d,
            conic,
            cov2d: [a, b, c],
            opacity,
            rgb,
            view_depth: p.z,
            normal_cam: n_cam * sign,
            rect,
        },
        SplatCache {
            p_cam: p,
            rot,
            scale,
            cov_world,
            cov_cam,
            jac,
            clamped: [cx != rx, cy != ry],
            ratio: [cx, cy],
            raw_rgb,
            dir,
            normal_axis: axis,
            normal_sign: sign,
        },
    ))
}

/// Pixel bounds of the region where `opacity * G >= alpha_min`, or `None`
/// if that region misses the image.
fn footprint<T: Real>(
    mean: &Vector2<T>,
    cov_xx: T,
    cov_yy: T,
    opacity: T,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Option<[usize; 4]> {
    let ratio = opacity.to_f64() / cfg.alpha_min;
    if ratio <= 1.0 {
        return None;
    }
    let m = (2.0 * ratio.ln()).sqrt();
    let ex = m * cov_xx.to_f64().sqrt() * (1.0 + 1e-4) + 1e-3;
    let ey = m * cov_yy.to_f64().sqrt() * (1.0 + 1e-4) + 1e-3;
    let (mx, my) = (mean.x.to_f64(), mean.y.to_f64());
    let x0 = (mx - ex - 0.5).ceil().max(0.0);
    let x1 = (mx + ex - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (my - ey - 0.5).ceil().max(0.0);
    let y1 = (my + ey - 0.5).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
}

pub(crate) fn project_all<T: Real>(
    g: &GaussianSet<T>,
    ext: &Extrinsic<T>,
    k: &Intrinsics<T>,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> (Vec<ProjectedSplat<T>>, Vec<SplatCache<T>>) {
    let center = ext.center();
    let results: Vec<_> = (0..g.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| project_one(g, i, ext, &center, k, width, height, cfg))
        .collect();
    results.into_iter().flatten().unzip()
}

/// Per-Gaussian gradients produced by one splat.
pub(crate) struct GaussianGrad<T: Real> {
    pub position: Vector3<T>,
    pub quat: nalgebra::Vector4<T>,
    pub log_scale: Vector3<T>,
    pub opacity_logit: T,
    pub sh_base: [T; 3],
    pub sh_rest: Vec<T>,
    pub ext_rot: Matrix3<T>,
    pub ext_trans: Vector3<T>,
}

pub(crate) fn project_backward_one<T: Real>(
    g: &GaussianSet<T>,
    splat: &ProjectedSplat<T>,
    cache: &SplatCache<T>,
    ext: &Extrinsic<T>,
    k: &Intrinsics<T>,
    grad: &SplatGrad<T>,
) -> GaussianGrad<T> {
    let i = splat.gaussian as usize;
    let p = cache.p_cam;
    let iz = T::one() / p.z;
    let iz2 = iz * iz;
    let two = T::of(2.0);
    let half = T::of(0.5);

    let mut dp = Vector3::zeros();
    dp.x += k.fx * iz * grad.mean2d[0];
    dp.y += k.fy * iz * grad.mean2d[1];
    dp.z -= (k.fx * p.x * grad.mean2d[0] + k.fy * p.y * grad.mean2d[1]) * iz2;
    dp.z += grad.depth;

    // conic -> 2D covariance
    let [ca, cb, cc] = splat.conic;
    let conic = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(grad.conic[0], grad.conic[1] * half, grad.conic[1] * half, grad.conic[2]);
    let g_cov = -(conic * g_conic * conic);

    // 2D covariance -> camera covariance and Jacobian
    let jac = cache.jac;
    let g_cov_cam = jac.transpose() * g_cov * jac;
    let g_jac = g_cov * jac * cache.cov_cam * two;

    dp.z -= (k.fx * g_jac[(0, 0)] + k.fy * g_jac[(1, 1)]) * iz2;
    if cache.clamped[0] {
        dp.z += k.fx * cache.ratio[0] * iz2 * g_jac[(0, 2)];
    } else {
        dp.x -= k.fx * iz2 * g_jac[(0, 2)];
        dp.z += two * k.fx * p.x * iz2 * iz * g_jac[(0, 2)];
    }
    if cache.clamped[1] {
        dp.z += k.fy * cache.ratio[1] * iz2 * g_jac[(1, 2)];
    } else {
        dp.y -= k.fy * iz2 * g_jac[(1, 2)];
        dp.z += two * k.fy * p.y * iz2 * iz * g_jac[(1, 2)];
    }

    // camera covariance -> world covariance and camera rotation
    let rw = ext.rotation;
    let g_cov_world = rw.transpose() * g_cov_cam * rw;
    let mut g_ext_rot = g_cov_cam * rw * cache.cov_world * two;

    let (mut g_rot, g_scale) = covariance_backward(&cache.rot, &cache.scale, &g_cov_world);

    // normal
    let gn = Vector3::from_column_slice(&grad.normal) * cache.normal_sign;
    let axis_vec = cache.rot.column(cache.normal_axis).into_owned();
    g_ext_rot += gn * axis_vec.transpose();
    let d_axis = rw.transpose() * gn;
    for r in 0..3 {
        g_rot[(r, cache.normal_axis)] += d_axis[r];
    }

    // position
    let x = g.position(i);
    let mut g_pos = rw.transpose() * dp;
    g_ext_rot += dp * x.transpose();
    let mut g_ext_trans = dp;

    // color
    let l_max = if g.has_rest { g.sh.l_max } else { 0 };
    let sh = eval_sh_backward(&g.sh_base[3 * i..3 * i + 3], g.rest(i), &cache.dir, l_max, &cache.raw_rgb, &grad.rgb);
    g_pos += sh.dir;
    g_ext_trans += rw * sh.dir;
    g_ext_rot += ext.translation * sh.dir.transpose();

    let g_quat = quat_to_rot_backward(&g.quat(i), &g_rot);
    let g_log_scale = g_scale.component_mul(&cache.scale);
    let a = splat.opacity;

    GaussianGrad {
        position: g_pos,
        quat: g_quat,
        log_scale: g_log_scale,
        opacity_logit: grad.opacity * a * (T::one() - a),
        sh_base: sh.base,
        sh_rest: sh.rest,
        ext_rot: g_ext_rot,
        ext_trans: g_ext_trans,
    }
}
