//! Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), zero padding,
//! and its gradient with respect to the first image.

use crate::real::Real;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel<T: Real>() -> [T; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    std::array::from_fn(|i| T::of(raw[i] / s))
}

/// Separable Gaussian blur of a `w×h` plane with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
pub fn blur<T: Real>(src: &[T], w: usize, h: usize) -> Vec<T> {
    let k = kernel::<T>();
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += *kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += *kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel SSIM of one channel plus what the gradient needs.
pub struct SsimPlane<T: Real> {
    pub map: Vec<T>,
    d_mu_x: Vec<T>,
    d_exx: Vec<T>,
    d_exy: Vec<T>,
}

pub fn ssim_plane<T: Real>(x: &[T], y: &[T], w: usize, h: usize) -> SsimPlane<T> {
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mx = blur(x, w, h);
    let my = blur(y, w, h);
    let exx = blur(&xx, w, h);
    let eyy = blur(&yy, w, h);
    let exy = blur(&xy, w, h);
    let (c1, c2) = (T::of(C1), T::of(C2));
    let two = T::of(2.0);
    let n = w * h;
    let mut out = SsimPlane {
        map: vec![T::zero(); n],
        d_mu_x: vec![T::zero(); n],
        d_exx: vec![T::zero(); n],
        d_exy: vec![T::zero(); n],
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = two * ux * uy + c1;
        let a2 = two * (exy[p] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + c2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        out.map[p] = s;
        out.d_mu_x[p] = (two * uy * a2 - two * uy * a1) / den - s * (two * ux / b1 - two * ux / b2);
        out.d_exx[p] = -s / b2;
        out.d_exy[p] = two * a1 / den;
    }
    out
}

impl<T: Real> SsimPlane<T> {
    /// Gradient with respect to `x` given `dL/dmap`.
    pub fn backward(&self, x: &[T], y: &[T], d_map: &[T], w: usize, h: usize) -> Vec<T> {
        let a: Vec<T> = d_map.iter().zip(&self.d_mu_x).map(|(&g, &d)| g * d).collect();
        let b: Vec<T> = d_map.iter().zip(&self.d_exx).map(|(&g, &d)| g * d).collect();
        let c: Vec<T> = d_map.iter().zip(&self.d_exy).map(|(&g, &d)| g * d).collect();
        let (ca, cb, cc) = (blur(&a, w, h), blur(&b, w, h), blur(&c, w, h));
        let two = T::of(2.0);
        (0..w * h).map(|q| ca[q] + two * x[q] * cb[q] + y[q] * cc[q]).collect()
    }
}

/// Splits an interleaved RGB image into planes.
pub fn planes<T: Real>(img: &[T]) -> [Vec<T>; 3] {
    std::array::from_fn(|c| img.iter().skip(c).step_by(3).copied().collect())
}

/// Planes with masked-out pixels zeroed in both images, so excluded content
/// cannot leak into the windows of included pixels.
fn masked_planes<T: Real>(img: &[T], mask: Option<&[bool]>) -> [Vec<T>; 3] {
    let mut p = planes(img);
    if let Some(m) = mask {
        for plane in p.iter_mut() {
            for (v, &keep) in plane.iter_mut().zip(m) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
    }
    p
}

/// Mean SSIM over masked pixels and all channels, with the gradient w.r.t.
/// `x` (interleaved RGB). Returns `None` when the mask is empty.
pub fn ssim_masked<T: Real>(x: &[T], y: &[T], w: usize, h: usize, mask: Option<&[bool]>) -> Option<(T, Vec<T>)> {
    let count = mask.map_or(w * h, |m| m.iter().filter(|&&b| b).count());
    if count == 0 {
        return None;
    }
    let inv = T::one() / T::of((3 * count) as f64);
    let (px, py) = (masked_planes(x, mask), masked_planes(y, mask));
    let mut total = T::zero();
    let mut grad = vec![T::zero(); 3 * w * h];
    for c in 0..3 {
        let s = ssim_plane(&px[c], &py[c], w, h);
        let d_map: Vec<T> = (0..w * h)
            .map(|p| if mask.is_none_or(|m| m[p]) { inv } else { T::zero() })
            .collect();
        for p in 0..w * h {
            if mask.is_none_or(|m| m[p]) {
                total += s.map[p];
            }
        }
        let g = s.backward(&px[c], &py[c], &d_map, w, h);
        for p in 0..w * h {
            if mask.is_none_or(|m| m[p]) {
                grad[3 * p + c] = g[p];
            }
        }
    }
    Some((total * inv, grad))
}

/// Mean SSIM without gradient.
pub fn ssim_value<T: Real>(x: &[T], y: &[T], w: usize, h: usize, mask: Option<&[bool]>) -> Option<T> {
    let count = mask.map_or(w * h, |m| m.iter().filter(|&&b| b).count());
    if count == 0 {
        return None;
    }
    let (px, py) = (masked_planes(x, mask), masked_planes(y, mask));
    let mut total = T::zero();
    for c in 0..3 {
        let s = ssim_plane(&px[c], &py[c], w, h);
        for p in 0..w * h {
            if mask.is_none_or(|m| m[p]) {
                total += s.map[p];
            }
        }
    }
    Some(total / T::of((3 * count) as f64))
}
