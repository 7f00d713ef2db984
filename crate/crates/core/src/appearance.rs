//! LiDAR-guided exposure alignment of ground-truth images, and the learnable
//! per-image color affine applied to rendered images.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraFrame, ColorAffine};
use crate::init::PointCloud;
use crate::real::Real;

/// Minimum number of projected samples for a fit.
pub const MIN_SAMPLES: usize = 30;
const REJECTION_ROUNDS: usize = 2;
const REJECTION_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Subpixel position (pixel centers at `+0.5`).
    pub u: f64,
    pub v: f64,
    pub pixel: usize,
    pub color: [f64; 3],
    pub depth: f64,
}

/// Projects colored points into `cam`, keeping the nearest point per pixel.
pub fn project_points<T: Real>(cloud: &PointCloud, cam: &CameraFrame<T>) -> Vec<Projection> {
    let cam64 = cam.cast::<f64>();
    let ext = cam64.extrinsic();
    let k = cam64.intrinsics;
    let (w, h) = (cam.width, cam.height);
    let mut best: Vec<Option<Projection>> = vec![None; w * h];
    for p in &cloud.points {
        let x = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
        let c = ext.apply(&x);
        if !(c.z > 0.0) {
            continue;
        }
        let u = k.fx * c.x / c.z + k.cx;
        let v = k.fy * c.y / c.z + k.cy;
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let pixel = v as usize * w + u as usize;
        if best[pixel].is_none_or(|b| c.z < b.depth) {
            best[pixel] = Some(Projection {
                u,
                v,
                pixel,
                color: [p[3] as f64, p[4] as f64, p[5] as f64],
                depth: c.z,
            });
        }
    }
    best.into_iter().flatten().collect()
}

/// Bilinear sample of an interleaved RGB image at a subpixel position.
pub fn sample_bilinear<T: Real>(img: &[T], w: usize, h: usize, u: f64, v: f64) -> [f64; 3] {
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xx: usize, yy: usize, c: usize| img[3 * (yy * w + xx) + c].to_f64();
    std::array::from_fn(|c| {
        let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
        let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureSolution {
    /// Row-major 3×3 gain.
    pub gain: [[f64; 3]; 3],
    pub bias: [f64; 3],
    pub inliers: usize,
    pub rms: f64,
    /// Set when the fit fell back to the identity.
    pub flagged: bool,
    /// Set when only a diagonal gain could be fitted.
    pub diagonal: bool,
}

impl ExposureSolution {
    pub fn identity(flagged: bool) -> Self {
        ExposureSolution {
            gain: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            bias: [0.0; 3],
            inliers: 0,
            rms: 0.0,
            flagged,
            diagonal: false,
        }
    }

    pub fn gain_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.gain[r][c])
    }

    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        let v = self.gain_matrix() * Vector3::from(c) + Vector3::from(self.bias);
        [v.x, v.y, v.z]
    }

    /// `clamp(gain·I + bias, 0, 1)` per pixel.
    pub fn correct<T: Real>(&self, img: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(img.len());
        for px in img.chunks(3) {
            let v = self.apply([px[0].to_f64(), px[1].to_f64(), px[2].to_f64()]);
            out.extend(v.iter().map(|&x| T::of(x.clamp(0.0, 1.0))));
        }
        out
    }
}

/// Least-squares `design · coef ≈ target`; `None` if rank-deficient.
fn solve_lsq(design: &DMatrix<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = design.clone().svd(true, true);
    let s = &svd.singular_values;
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 || s.iter().any(|&v| v < max * 1e-9) {
        return None;
    }
    svd.solve(target, 1e-12).ok()
}

fn fit(pix: &[[f64; 3]], tgt: &[[f64; 3]]) -> Option<(Matrix3<f64>, Vector3<f64>, bool)> {
    let n = pix.len();
    let full = DMatrix::from_fn(n, 4, |r, c| if c < 3 { pix[r][c] } else { 1.0 });
    let mut gain = Matrix3::zeros();
    let mut bias = Vector3::zeros();
    let mut ok = true;
    for ch in 0..3 {
        let t = DVector::from_fn(n, |r, _| tgt[r][ch]);
        match solve_lsq(&full, &t) {
            Some(x) => {
                for c in 0..3 {
                    gain[(ch, c)] = x[c];
                }
                bias[ch] = x[3];
            }
            None => {
                ok = false;
                break;
            }
        }
    }
    if ok {
        return Some((gain, bias, false));
    }
    gain = Matrix3::zeros();
    for ch in 0..3 {
        let d = DMatrix::from_fn(n, 2, |r, c| if c == 0 { pix[r][ch] } else { 1.0 });
        let t = DVector::from_fn(n, |r, _| tgt[r][ch]);
        let x = solve_lsq(&d, &t)?;
        gain[(ch, ch)] = x[0];
        bias[ch] = x[1];
    }
    Some((gain, bias, true))
}

/// Fits one image's correction from its LiDAR samples.
pub fn align_image<T: Real>(img: &[T], w: usize, h: usize, samples: &[Projection]) -> ExposureSolution {
    if samples.len() < MIN_SAMPLES {
        log::warn!("exposure alignment: {} samples < {MIN_SAMPLES}; using identity", samples.len());
        return ExposureSolution::identity(true);
    }
    let mut pix: Vec<[f64; 3]> = samples.iter().map(|s| sample_bilinear(img, w, h, s.u, s.v)).collect();
    let mut tgt: Vec<[f64; 3]> = samples.iter().map(|s| s.color).collect();
    let mut sol = None;
    for round in 0..=REJECTION_ROUNDS {
        let Some((g, b, diag)) = fit(&pix, &tgt) else {
            break;
        };
        let res: Vec<f64> = pix
            .iter()
            .zip(&tgt)
            .map(|(p, t)| (g * Vector3::from(*p) + b - Vector3::from(*t)).norm())
            .collect();
        let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
        sol = Some((g, b, diag, pix.len(), rms));
        if round == REJECTION_ROUNDS || rms == 0.0 {
            break;
        }
        let keep: Vec<usize> = (0..res.len()).filter(|&i| res[i] <= REJECTION_SIGMA * rms).collect();
        if keep.len() < MIN_SAMPLES || keep.len() == res.len() {
            break;
        }
        pix = keep.iter().map(|&i| pix[i]).collect();
        tgt = keep.iter().map(|&i| tgt[i]).collect();
    }
    match sol {
        None => {
            log::warn!("exposure alignment: rank-deficient samples; using identity");
            ExposureSolution::identity(true)
        }
        Some((g, b, diagonal, inliers, rms)) => ExposureSolution {
            gain: [0, 1, 2].map(|r| [g[(r, 0)], g[(r, 1)], g[(r, 2)]]),
            bias: [b.x, b.y, b.z],
            inliers,
            rms,
            flagged: false,
            diagonal,
        },
    }
}

/// Aligns every image of one timestamp to the LiDAR colors of that timestamp
/// and returns the solutions with the corrected images.
pub fn exposure_align<T: Real>(
    frames: &[(&[T], &CameraFrame<T>)],
    cloud: &PointCloud,
) -> Vec<(ExposureSolution, Vec<T>)> {
    frames
        .par_iter()
        .map(|(img, cam)| {
            let samples = project_points(cloud, *cam);
            let sol = align_image(img, cam.width, cam.height, &samples);
            let corrected = sol.correct(img);
            (sol, corrected)
        })
        .collect()
}

/// `M·c + b` per pixel of an interleaved RGB image.
pub fn camera_affine_apply<T: Real>(img: &[T], a: &ColorAffine<T>) -> Vec<T> {
    if a.is_identity() {
        return img.to_vec();
    }
    let mut out = Vec::with_capacity(img.len());
    for px in img.chunks(3) {
        let v = a.matrix * Vector3::new(px[0], px[1], px[2]) + a.bias;
        out.extend_from_slice(v.as_slice());
    }
    out
}

/// Gradients of [`camera_affine_apply`] on the input image and on the twelve
/// affine parameters (row-major matrix, then bias).
pub fn camera_affine_backward<T: Real>(img: &[T], a: &ColorAffine<T>, d_out: &[T]) -> (Vec<T>, [T; 12]) {
    let mt = a.matrix.transpose();
    let mut d_img = Vec::with_capacity(img.len());
    let mut dp = [T::zero(); 12];
    for (px, g) in img.chunks(3).zip(d_out.chunks(3)) {
        let gv = Vector3::new(g[0], g[1], g[2]);
        d_img.extend_from_slice((mt * gv).as_slice());
        for r in 0..3 {
            for c in 0..3 {
                dp[3 * r + c] += g[r] * px[c];
            }
            dp[9 + r] += g[r];
        }
    }
    (d_img, dp)
}
