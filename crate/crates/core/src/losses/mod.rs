//! Training objectives. Image-space terms return their value and a gradient
//! on the corresponding rendered buffer; regularizers act on parameters.

pub mod ssim;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::gaussian::GaussianSet;
use crate::real::{sigmoid, Real};
use crate::scene::SceneGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub ncc: f64,
    pub normal: f64,
    pub flatten: f64,
    pub oob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 0.8,
            depth: 0.5,
            ncc: 0.1,
            normal: 0.1,
            flatten: 1.0,
            oob: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rgb, self.depth, self.ncc, self.normal, self.flatten, self.oob];
        if all.iter().any(|w| !(*w >= 0.0)) || self.rgb > 1.0 {
            return Err(Error::Config("loss weights must be non-negative and rgb ≤ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NccConfig {
    pub patch: usize,
    pub stride: usize,
    pub sigma_eps: f64,
    /// Patches with a larger fraction of invalid pixels are skipped.
    pub max_invalid: f64,
}

impl Default for NccConfig {
    fn default() -> Self {
        NccConfig {
            patch: 32,
            stride: 16,
            sigma_eps: 1e-6,
            max_invalid: 0.2,
        }
    }
}

impl NccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
            return Err(Error::Config("ncc needs 0 < stride ≤ patch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenConfig {
    pub ratio: f64,
    pub period: usize,
}

impl Default for FlattenConfig {
    fn default() -> Self {
        FlattenConfig { ratio: 10.0, period: 10 }
    }
}

/// A scalar loss with its gradient on one buffer. `empty` is set when no
/// pixel contributed (the value is then zero).
#[derive(Debug, Clone)]
pub struct Term<T: Real> {
    pub value: T,
    pub grad: Vec<T>,
    pub empty: bool,
}

impl<T: Real> Term<T> {
    fn empty(n: usize) -> Self {
        Term {
            value: T::zero(),
            grad: vec![T::zero(); n],
            empty: true,
        }
    }
}

#[inline]
fn on(mask: Option<&[bool]>, p: usize) -> bool {
    mask.is_none_or(|m| m[p])
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute error over masked pixels and channels.
pub fn l1<T: Real>(render: &[T], gt: &[T], mask: Option<&[bool]>) -> Term<T> {
    let n = render.len() / 3;
    let count = (0..n).filter(|&p| on(mask, p)).count();
    if count == 0 {
        return Term::empty(render.len());
    }
    let inv = T::one() / T::of((3 * count) as f64);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); render.len()];
    for p in (0..n).filter(|&p| on(mask, p)) {
        for c in 0..3 {
            let d = render[3 * p + c] - gt[3 * p + c];
            value += d.abs();
            grad[3 * p + c] = sign(d) * inv;
        }
    }
    Term {
        value: value * inv,
        grad,
        empty: false,
    }
}

/// `1 - SSIM` over masked pixels.
pub fn ssim_loss<T: Real>(render: &[T], gt: &[T], w: usize, h: usize, mask: Option<&[bool]>) -> Term<T> {
    match ssim::ssim_masked(render, gt, w, h, mask) {
        None => Term::empty(render.len()),
        Some((s, g)) => Term {
            value: T::one() - s,
            grad: g.into_iter().map(|v| -v).collect(),
            empty: false,
        },
    }
}

/// `λ·L1 + (1-λ)·(1-SSIM)`; returns the combined term and the two parts.
pub fn photometric<T: Real>(
    render: &[T],
    gt: &[T],
    w: usize,
    h: usize,
    mask: Option<&[bool]>,
    lambda: f64,
) -> (Term<T>, T, T) {
    let a = l1(render, gt, mask);
    let b = ssim_loss(render, gt, w, h, mask);
    let (la, lb) = (T::of(lambda), T::of(1.0 - lambda));
    let grad = a.grad.iter().zip(&b.grad).map(|(&x, &y)| la * x + lb * y).collect();
    (
        Term {
            value: la * a.value + lb * b.value,
            grad,
            empty: a.empty,
        },
        a.value,
        b.value,
    )
}

/// A sparse depth observation at pixel index `pixel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSample {
    pub pixel: usize,
    pub depth: f64,
}

/// Mean `|1/d_pred - 1/d_lidar|` over samples whose pixel has alpha above `alpha_eps`.
pub fn depth_inv_l1<T: Real>(depth: &[T], alpha: &[T], samples: &[DepthSample], alpha_eps: f64) -> Term<T> {
    let eps = T::of(alpha_eps);
    let used: Vec<&DepthSample> = samples
        .iter()
        .filter(|s| s.depth > 0.0 && alpha[s.pixel] > eps && depth[s.pixel] > T::zero())
        .collect();
    if used.is_empty() {
        return Term::empty(depth.len());
    }
    let inv = T::one() / T::of(used.len() as f64);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); depth.len()];
    for s in used {
        let d = depth[s.pixel];
        let r = T::one() / d - T::of(1.0 / s.depth);
        value += r.abs();
        grad[s.pixel] += -sign(r) / (d * d) * inv;
    }
    Term {
        value: value * inv,
        grad,
        empty: false,
    }
}

/// Top-left corners of the `patch × patch` windows at the given stride.
fn patch_origins(w: usize, h: usize, cfg: &NccConfig) -> Vec<(usize, usize)> {
    if cfg.patch > w || cfg.patch > h {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut y = 0;
    while y + cfg.patch <= h {
        let mut x = 0;
        while x + cfg.patch <= w {
            out.push((x, y));
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    out
}

/// `1 - mean NCC` between rendered and pseudo depth over strided patches.
/// Pixels with pseudo depth ≤ 0 or outside `mask` are excluded from their
/// patch's statistics.
pub fn ncc_loss<T: Real>(
    pred: &[T],
    pseudo: &[T],
    w: usize,
    h: usize,
    mask: Option<&[bool]>,
    cfg: &NccConfig,
) -> Term<T> {
    let eps = T::of(cfg.sigma_eps);
    let mut grad = vec![T::zero(); w * h];
    let mut total = T::zero();
    let mut used = 0usize;
    let mut patch_grads: Vec<(Vec<usize>, Vec<T>)> = Vec::new();
    for (x0, y0) in patch_origins(w, h, cfg) {
        let idx: Vec<usize> = (y0..y0 + cfg.patch)
            .flat_map(|y| (x0..x0 + cfg.patch).map(move |x| y * w + x))
            .filter(|&p| pseudo[p] > T::zero() && on(mask, p))
            .collect();
        let total_px = cfg.patch * cfg.patch;
        if (total_px - idx.len()) as f64 > cfg.max_invalid * total_px as f64 || idx.is_empty() {
            continue;
        }
        let m = T::of(idx.len() as f64);
        let mean_a = idx.iter().map(|&p| pred[p]).fold(T::zero(), |s, v| s + v) / m;
        let mean_b = idx.iter().map(|&p| pseudo[p]).fold(T::zero(), |s, v| s + v) / m;
        let a: Vec<T> = idx.iter().map(|&p| pred[p] - mean_a).collect();
        let b: Vec<T> = idx.iter().map(|&p| pseudo[p] - mean_b).collect();
        let saa = a.iter().fold(T::zero(), |s, &v| s + v * v);
        let sbb = b.iter().fold(T::zero(), |s, &v| s + v * v);
        let sab = a.iter().zip(&b).fold(T::zero(), |s, (&x, &y)| s + x * y);
        let raw_a = (saa / m).sqrt();
        let sa = if raw_a > eps { raw_a } else { eps };
        let sb = {
            let v = (sbb / m).sqrt();
            if v > eps {
                v
            } else {
                eps
            }
        };
        let ncc = sab / (m * sa * sb);
        total += ncc;
        used += 1;
        // d ncc / d pred, already projected onto zero-mean vectors
        let floored = !(raw_a > eps);
        let g: Vec<T> = a
            .iter()
            .zip(&b)
            .map(|(&ai, &bi)| {
                let mut v = bi / (m * sa * sb);
                if !floored {
                    v -= ncc * ai / (m * sa * sa);
                }
                v
            })
            .collect();
        patch_grads.push((idx, g));
    }
    if used == 0 {
        return Term::empty(w * h);
    }
    let scale = -T::one() / T::of(used as f64);
    for (idx, g) in patch_grads {
        for (p, v) in idx.into_iter().zip(g) {
            grad[p] += v * scale;
        }
    }
    Term {
        value: T::one() - total / T::of(used as f64),
        grad,
        empty: false,
    }
}

/// Camera-space normals from a depth map by central differences of the
/// back-projected points. Border pixels and pixels next to invalid depth are
/// marked invalid.
pub fn pseudo_normal_from_depth<T: Real>(depth: &[T], w: usize, h: usize, k: &Intrinsics<T>) -> (Vec<T>, Vec<bool>) {
    let back = |x: usize, y: usize| -> Vector3<T> {
        let d = depth[y * w + x];
        Vector3::new(
            (T::of(x as f64 + 0.5) - k.cx) / k.fx * d,
            (T::of(y as f64 + 0.5) - k.cy) / k.fy * d,
            d,
        )
    };
    let mut n = vec![T::zero(); 3 * w * h];
    let mut valid = vec![false; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let ok = [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .all(|&(a, b)| depth[b * w + a] > T::zero());
            if !ok {
                continue;
            }
            let tx = back(x + 1, y) - back(x - 1, y);
            let ty = back(x, y + 1) - back(x, y - 1);
            let c = tx.cross(&ty);
            let len = c.norm();
            if !(len > T::zero()) {
                continue;
            }
            let mut v = c / len;
            if v.dot(&back(x, y)) > T::zero() {
                v = -v;
            }
            let p = y * w + x;
            n[3 * p..3 * p + 3].copy_from_slice(v.as_slice());
            valid[p] = true;
        }
    }
    (n, valid)
}

/// Mean per-pixel L1 (summed over channels) between rendered and pseudo
/// normals over `valid` pixels, plus anisotropic TV of the rendered normals
/// averaged over pixels that have both a right and a lower neighbor.
pub fn normal_loss<T: Real>(rendered: &[T], pseudo: &[T], valid: &[bool], w: usize, h: usize) -> Term<T> {
    let mut grad = vec![T::zero(); 3 * w * h];
    let mut value = T::zero();
    let count = valid.iter().filter(|&&v| v).count();
    if count > 0 {
        let inv = T::one() / T::of(count as f64);
        let mut s = T::zero();
        for p in (0..w * h).filter(|&p| valid[p]) {
            for c in 0..3 {
                let d = rendered[3 * p + c] - pseudo[3 * p + c];
                s += d.abs();
                grad[3 * p + c] += sign(d) * inv;
            }
        }
        value += s * inv;
    }
    if w > 1 && h > 1 {
        let inv = T::one() / T::of(((w - 1) * (h - 1)) as f64);
        let mut s = T::zero();
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let p = y * w + x;
                for q in [p + 1, p + w] {
                    for c in 0..3 {
                        let d = rendered[3 * q + c] - rendered[3 * p + c];
                        s += d.abs();
                        let g = sign(d) * inv;
                        grad[3 * q + c] += g;
                        grad[3 * p + c] -= g;
                    }
                }
            }
        }
        value += s * inv;
    }
    Term {
        value,
        grad,
        empty: count == 0,
    }
}

/// Flattening regularizer summed over a set, with the gradient on log-scales.
pub fn flatten_loss<T: Real>(g: &GaussianSet<T>, ratio: f64, grad_log_scales: Option<&mut [T]>) -> T {
    let r = T::of(ratio);
    let mut total = T::zero();
    let mut grads = grad_log_scales;
    for i in 0..g.len() {
        let s = g.scale(i);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap_or(std::cmp::Ordering::Equal));
        let (lo, mid, hi) = (idx[0], idx[1], idx[2]);
        let q = s[hi] / s[mid];
        let capped = q > r;
        total += if capped { q } else { r } - r + s[lo];
        if let Some(gr) = grads.as_deref_mut() {
            gr[3 * i + lo] += s[lo];
            if capped {
                gr[3 * i + hi] += q;
                gr[3 * i + mid] -= q;
            }
        }
    }
    total
}

/// Flattening term over one scale triple, exposed for checks.
pub fn flatten_value(s: [f64; 3], ratio: f64) -> f64 {
    let mut v = s;
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (v[2] / v[1]).max(ratio) - ratio + v[0]
}

/// `-mean log(1 - α)` over each transient node's out-of-box Gaussians,
/// summed over nodes. Gradients go on the opacity logits.
pub fn oob_loss<T: Real>(graph: &SceneGraph<T>, mut grads: Option<&mut [Vec<T>]>) -> T {
    let mut total = T::zero();
    for (ni, node) in graph.transients.iter().enumerate() {
        let idx = node.oob_indices();
        if idx.is_empty() {
            continue;
        }
        let (v, g) = oob_term(idx.iter().map(|&i| node.gaussians.opacity_logits[i]));
        total += v;
        if let Some(gs) = grads.as_deref_mut() {
            for (&i, gi) in idx.iter().zip(g) {
                gs[ni][i] += gi;
            }
        }
    }
    total
}

/// `-mean log(1 - sigmoid(l))` and its gradient on each logit.
pub fn oob_term<T: Real>(logits: impl Iterator<Item = T>) -> (T, Vec<T>) {
    let cap = T::one() - T::of(1e-6);
    let a: Vec<T> = logits.map(sigmoid).collect();
    let inv = T::one() / T::of(a.len() as f64);
    let mut v = T::zero();
    let mut g = Vec::with_capacity(a.len());
    for &ai in &a {
        if ai > cap {
            v -= (T::one() - cap).ln();
            g.push(T::zero());
        } else {
            v -= (T::one() - ai).ln();
            g.push(ai * inv);
        }
    }
    (v * inv, g)
}

/// Per-term values of one training step. Unused terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim: f64,
    pub depth: f64,
    pub ncc: f64,
    pub normal: f64,
    pub flatten: f64,
    pub oob: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the terms.
    pub fn combine(&mut self, w: &LossWeights) -> Result<f64> {
        let terms = [
            ("l1", self.l1),
            ("ssim", self.ssim),
            ("depth", self.depth),
            ("ncc", self.ncc),
            ("normal", self.normal),
            ("flatten", self.flatten),
            ("oob", self.oob),
        ];
        for (name, v) in terms {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        self.total = w.rgb * self.l1
            + (1.0 - w.rgb) * self.ssim
            + w.depth * self.depth
            + w.ncc * self.ncc
            + w.normal * self.normal
            + w.flatten * self.flatten
            + w.oob * self.oob;
        Ok(self.total)
    }

    pub const CSV_HEADER: &'static str = "l1,ssim,depth,ncc,normal,flatten,oob,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.l1, self.ssim, self.depth, self.ncc, self.normal, self.flatten, self.oob, self.total
        )
    }
}
