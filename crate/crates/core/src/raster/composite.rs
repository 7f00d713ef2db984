//! Front-to-back alpha compositing over 16×16 tiles.
//!
//! Per pixel `p` and depth-sorted splat `i`,
//! `a_i = min(0.999, opacity_i · exp(-½ dᵀ Σ'⁻¹ d))`, contributions with
//! `a_i < 1/255` are skipped, and `w_i = a_i · Π_{j<i} (1 - a_j)`. Color,
//! view depth, and camera-space normal are accumulated with the same weights;
//! depth and normal are then divided by the accumulated alpha. A splat that
//! would push transmittance below `1e-4` ends the pixel.

use rayon::prelude::*;

use super::project::{ProjectedSplat, SplatGrad};
use super::RasterConfig;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tile: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, indices into the depth-sorted splat list.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build<T: Real>(splats: &[ProjectedSplat<T>], width: usize, height: usize, tile: usize) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (s, sp) in splats.iter().enumerate() {
            let [x0, y0, x1, y1] = sp.rect;
            for ty in y0 / tile..=y1 / tile {
                for tx in x0 / tile..=x1 / tile {
                    lists[ty * tiles_x + tx].push(s as u32);
                }
            }
        }
        TileGrid {
            tile,
            tiles_x,
            tiles_y,
            lists,
        }
    }

    pub fn num_entries(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// Stable ascending sort by view depth, ties by Gaussian index.
pub fn sort_by_depth<T: Real>(splats: &mut [ProjectedSplat<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a], &splats[b]);
        sa.view_depth
            .partial_cmp(&sb.view_depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sa.gaussian.cmp(&sb.gaussian))
    });
    let sorted: Vec<_> = order.iter().map(|&i| splats[i]).collect();
    splats.copy_from_slice(&sorted);
    order
}

/// Raw per-pixel accumulations.
#[derive(Debug, Clone)]
pub struct Accum<T: Real> {
    pub color: Vec<T>,
    /// `Σ w·z`.
    pub depth_raw: Vec<T>,
    /// `Σ w·n`.
    pub normal_raw: Vec<T>,
    pub t_final: Vec<T>,
    /// Number of list entries visited before stopping.
    pub n_visited: Vec<u32>,
}

impl<T: Real> Accum<T> {
    fn new(n: usize) -> Self {
        Accum {
            color: vec![T::zero(); 3 * n],
            depth_raw: vec![T::zero(); n],
            normal_raw: vec![T::zero(); 3 * n],
            t_final: vec![T::one(); n],
            n_visited: vec![0; n],
        }
    }
}

#[inline]
fn splat_alpha<T: Real>(sp: &ProjectedSplat<T>, px: T, py: T, cfg: &RasterConfig) -> Option<(T, T, T, T, bool)> {
    let dx = px - sp.mean2d.x;
    let dy = py - sp.mean2d.y;
    let [ca, cb, cc] = sp.conic;
    let power = -T::of(0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
    if power > T::zero() {
        return None;
    }
    let g = power.exp();
    let raw = sp.opacity * g;
    let max = T::of(cfg.alpha_max);
    let clipped = raw > max;
    let a = if clipped { max } else { raw };
    if a < T::of(cfg.alpha_min) {
        return None;
    }
    Some((a, g, dx, dy, clipped))
}

#[inline]
fn in_rect<T: Real>(sp: &ProjectedSplat<T>, x: usize, y: usize) -> bool {
    let [x0, y0, x1, y1] = sp.rect;
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

/// Composites one pixel over `order` (indices into `splats`).
#[inline]
fn composite_pixel<T: Real>(
    splats: &[ProjectedSplat<T>],
    order: impl Iterator<Item = usize>,
    px: T,
    py: T,
    cfg: &RasterConfig,
) -> ([T; 3], T, [T; 3], T, u32) {
    let mut t = T::one();
    let mut c = [T::zero(); 3];
    let mut z = T::zero();
    let mut n = [T::zero(); 3];
    let mut visited = 0u32;
    let t_min = T::of(cfg.t_min);
    let (ix, iy) = (px.to_f64() as usize, py.to_f64() as usize);
    for s in order {
        let sp = &splats[s];
        visited += 1;
        if !in_rect(sp, ix, iy) {
            continue;
        }
        if let Some((a, ..)) = splat_alpha(sp, px, py, cfg) {
            let next = t * (T::one() - a);
            if next < t_min {
                visited -= 1;
                break;
            }
            let w = a * t;
            for k in 0..3 {
                c[k] += sp.rgb[k] * w;
                n[k] += sp.normal_cam[k] * w;
            }
            z += sp.view_depth * w;
            t = next;
        }
    }
    (c, z, n, t, visited)
}

pub fn forward_tiled<T: Real>(
    splats: &[ProjectedSplat<T>],
    grid: &TileGrid,
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Accum<T> {
    let tile = grid.tile;
    let tiles: Vec<_> = (0..grid.lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let list = &grid.lists[ti];
            let mut out = Vec::with_capacity(tile * tile);
            for y in ty * tile..((ty + 1) * tile).min(height) {
                for x in tx * tile..((tx + 1) * tile).min(width) {
                    let px = T::of(x as f64 + 0.5);
                    let py = T::of(y as f64 + 0.5);
                    let r = composite_pixel(splats, list.iter().map(|&s| s as usize), px, py, cfg);
                    out.push((y * width + x, r));
                }
            }
            out
        })
        .collect();
    let mut acc = Accum::new(width * height);
    for tile_out in tiles {
        for (p, (c, z, n, t, v)) in tile_out {
            acc.color[3 * p..3 * p + 3].copy_from_slice(&c);
            acc.normal_raw[3 * p..3 * p + 3].copy_from_slice(&n);
            acc.depth_raw[p] = z;
            acc.t_final[p] = t;
            acc.n_visited[p] = v;
        }
    }
    acc
}

/// Reference path: every pixel walks the full depth-sorted splat list.
/// Used only to check the tiled path.
pub fn forward_naive<T: Real>(
    splats: &[ProjectedSplat<T>],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Accum<T> {
    let mut acc = Accum::new(width * height);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let px = T::of(x as f64 + 0.5);
            let py = T::of(y as f64 + 0.5);
            let (c, z, n, t, _) = composite_pixel(splats, 0..splats.len(), px, py, cfg);
            acc.color[3 * p..3 * p + 3].copy_from_slice(&c);
            acc.normal_raw[3 * p..3 * p + 3].copy_from_slice(&n);
            acc.depth_raw[p] = z;
            acc.t_final[p] = t;
        }
    }
    acc
}

/// Upstream gradients on the raw accumulations of one pixel:
/// `Σ w·c`, `Σ w·z`, `Σ w·n` and `A = Σ w`.
#[derive(Debug, Clone, Copy)]
pub struct RawPixelGrad<T: Real> {
    pub color: [T; 3],
    pub depth: T,
    pub normal: [T; 3],
    pub alpha: T,
}

/// Reverse pass. Returns per-splat gradients, reduced over tiles in a fixed
/// order so the result does not depend on scheduling.
pub fn backward_tiled<T: Real>(
    splats: &[ProjectedSplat<T>],
    grid: &TileGrid,
    acc: &Accum<T>,
    upstream: &[RawPixelGrad<T>],
    width: usize,
    height: usize,
    cfg: &RasterConfig,
) -> Vec<SplatGrad<T>> {
    let tile = grid.tile;
    let per_tile: Vec<Vec<SplatGrad<T>>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let list = &grid.lists[ti];
            let mut local = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            for y in ty * tile..((ty + 1) * tile).min(height) {
                for x in tx * tile..((tx + 1) * tile).min(width) {
                    let p = y * width + x;
                    backward_pixel(splats, list, acc, &upstream[p], p, x, y, cfg, &mut local);
                }
            }
            local
        })
        .collect();

    let mut out = vec![SplatGrad::default(); splats.len()];
    for (ti, local) in per_tile.iter().enumerate() {
        for (k, g) in local.iter().enumerate() {
            out[grid.lists[ti][k] as usize].add(g);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_pixel<T: Real>(
    splats: &[ProjectedSplat<T>],
    list: &[u32],
    acc: &Accum<T>,
    up: &RawPixelGrad<T>,
    p: usize,
    x: usize,
    y: usize,
    cfg: &RasterConfig,
    local: &mut [SplatGrad<T>],
) {
    let px = T::of(x as f64 + 0.5);
    let py = T::of(y as f64 + 0.5);
    let one = T::one();
    let half = T::of(0.5);
    let mut t = acc.t_final[p];
    // Σ_{j>i} w_j h_j
    let mut suffix = T::zero();
    for k in (0..acc.n_visited[p] as usize).rev() {
        let sp = &splats[list[k] as usize];
        if !in_rect(sp, x, y) {
            continue;
        }
        let Some((a, g, dx, dy, clipped)) = splat_alpha(sp, px, py, cfg) else {
            continue;
        };
        let t_i = t / (one - a);
        let w = a * t_i;
        let h = up.color[0] * sp.rgb[0]
            + up.color[1] * sp.rgb[1]
            + up.color[2] * sp.rgb[2]
            + up.depth * sp.view_depth
            + up.normal[0] * sp.normal_cam[0]
            + up.normal[1] * sp.normal_cam[1]
            + up.normal[2] * sp.normal_cam[2]
            + up.alpha;
        let d_a = t_i * h - suffix / (one - a);
        suffix += w * h;
        t = t_i;

        let out = &mut local[k];
        for c in 0..3 {
            out.rgb[c] += w * up.color[c];
            out.normal[c] += w * up.normal[c];
        }
        out.depth += w * up.depth;
        if !clipped {
            out.opacity += d_a * g;
            let d_power = d_a * a;
            let [ca, cb, cc] = sp.conic;
            out.mean2d[0] += d_power * (ca * dx + cb * dy);
            out.mean2d[1] += d_power * (cb * dx + cc * dy);
            out.conic[0] -= half * dx * dx * d_power;
            out.conic[1] -= dx * dy * d_power;
            out.conic[2] -= half * dy * dy * d_power;
        }
    }
}
