//! Builds the initial scene graph from aggregated colored LiDAR, box tracks,
//! and a semisphere sky prior.

use std::collections::{BTreeMap, HashMap};
use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{unit_quat_to_rot, GaussianSet};
use crate::real::{logit, Real};
use crate::scene::{classify_static, PoseTrack};
use crate::scene::{SceneGraph, TransientNode};
use crate::sh::{ShConfig, SH_C0, SH_OFFSET};
use crate::{Error, Result};

/// Colored points `(x, y, z, r, g, b)` captured at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub traversal: u32,
    pub timestamp: f64,
    pub points: Vec<[f32; 6]>,
}

/// A labeled 3D box followed over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub node_id: u32,
    pub traversal: u32,
    pub label: String,
    /// Full extent, meters.
    pub extent: [f64; 3],
    pub times: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
    /// `(w, x, y, z)` box-to-world rotations.
    pub rotations: Vec<[f64; 4]>,
}

impl BoxTrack {
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 || self.centers.len() != n || self.rotations.len() != n {
            return Err(Error::InvalidParameter(format!("box {} has inconsistent keyframes", self.node_id)));
        }
        if self.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidParameter(format!("box {} has non-positive extent", self.node_id)));
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter(format!("box {} keyframes are not time-ordered", self.node_id)));
        }
        Ok(())
    }

    pub fn pose_track<T: Real>(&self) -> Result<PoseTrack<T>> {
        PoseTrack::new(
            self.times.clone(),
            self.rotations.iter().flatten().map(|&v| T::of(v)).collect(),
            self.centers.iter().flatten().map(|&v| T::of(v)).collect(),
        )
    }

    /// Whether `t` lies within the keyframe span.
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.times[0] && t <= self.times[self.times.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub voxel_size: f64,
    pub outlier_neighbors: usize,
    pub outlier_sigma: f64,
    pub box_tolerance: f64,
    pub sky_count: usize,
    pub initial_opacity: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            voxel_size: 0.15,
            outlier_neighbors: 20,
            outlier_sigma: 2.0,
            box_tolerance: 0.4,
            sky_count: 100_000,
            initial_opacity: 0.1,
            min_scale: 0.01,
            max_scale: 0.5,
        }
    }
}

fn xyz(p: &[f32; 6]) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Splits points into background and per-box sets (box-local frame). A point
/// belongs to a box if it lies within the box dilated by `tolerance` at the
/// cloud's timestamp.
pub fn assign_points(
    clouds: &[PointCloud],
    boxes: &[BoxTrack],
    tolerance: f64,
) -> Result<(Vec<[f32; 6]>, BTreeMap<u32, Vec<[f32; 6]>>)> {
    let mut ordered: Vec<&PointCloud> = clouds.iter().collect();
    ordered.sort_by(|a, b| (a.traversal, a.timestamp).partial_cmp(&(b.traversal, b.timestamp)).unwrap());
    let tracks: Vec<PoseTrack<f64>> = boxes.iter().map(|b| b.pose_track()).collect::<Result<_>>()?;
    let mut bg = Vec::new();
    let mut per_box: BTreeMap<u32, Vec<[f32; 6]>> = boxes.iter().map(|b| (b.node_id, Vec::new())).collect();
    for cloud in ordered {
        let poses: Vec<_> = boxes
            .iter()
            .zip(&tracks)
            .filter(|(b, _)| b.traversal == cloud.traversal && b.active_at(cloud.timestamp))
            .map(|(b, tr)| (b, tr.pose_at(cloud.timestamp)))
            .filter_map(|(b, p)| p.ok().map(|p| (b, p)))
            .collect();
        'pts: for p in &cloud.points {
            let x = xyz(p);
            for (b, pose) in &poses {
                let local = pose.rotation.transpose() * (x - pose.translation);
                if (0..3).all(|a| local[a].abs() <= 0.5 * b.extent[a] + tolerance) {
                    per_box
                        .get_mut(&b.node_id)
                        .unwrap()
                        .push([local.x as f32, local.y as f32, local.z as f32, p[3], p[4], p[5]]);
                    continue 'pts;
                }
            }
            bg.push(*p);
        }
    }
    Ok((bg, per_box))
}

/// Drops points whose mean distance to their `k` nearest neighbors exceeds
/// the global mean by more than `n_sigma` standard deviations.
pub fn remove_outliers(points: &[[f32; 6]], k: usize, n_sigma: f64) -> Vec<[f32; 6]> {
    if points.len() <= k + 1 || k == 0 {
        return points.to_vec();
    }
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
    let q = NonZero::new(k + 1).unwrap();
    let mean_d: Vec<f64> = coords
        .iter()
        .map(|c| {
            let nn = tree.nearest_n::<SquaredEuclidean>(c, q);
            // the query point itself is the first hit
            nn.iter().skip(1).map(|n| n.distance.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let n = mean_d.len() as f64;
    let mu = mean_d.iter().sum::<f64>() / n;
    let sd = (mean_d.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mu + n_sigma * sd;
    points.iter().zip(&mean_d).filter(|(_, &d)| d <= limit).map(|(p, _)| *p).collect()
}

/// One point per occupied voxel: the centroid of its points with their mean
/// color. Output is ordered by voxel key.
pub fn voxel_downsample(points: &[[f32; 6]], size: f64) -> Vec<[f32; 6]> {
    let mut cells: HashMap<[i64; 3], ([f64; 6], usize)> = HashMap::new();
    for p in points {
        let key = [0, 1, 2].map(|a| (p[a] as f64 / size).floor() as i64);
        let e = cells.entry(key).or_insert(([0.0; 6], 0));
        for c in 0..6 {
            e.0[c] += p[c] as f64;
        }
        e.1 += 1;
    }
    let mut keys: Vec<_> = cells.into_iter().collect();
    keys.sort_by_key(|(k, _)| *k);
    keys.into_iter()
        .map(|(_, (s, n))| s.map(|v| (v / n as f64) as f32))
        .collect()
}

/// Background points (cleaned and downsampled) and per-box local points.
pub fn aggregate_and_clean(
    clouds: &[PointCloud],
    boxes: &[BoxTrack],
    cfg: &InitConfig,
) -> Result<(Vec<[f32; 6]>, BTreeMap<u32, Vec<[f32; 6]>>)> {
    let (bg, per_box) = assign_points(clouds, boxes, cfg.box_tolerance)?;
    let bg = remove_outliers(&bg, cfg.outlier_neighbors, cfg.outlier_sigma);
    let bg = voxel_downsample(&bg, cfg.voxel_size);
    if bg.is_empty() {
        return Err(Error::EmptyBackground);
    }
    let per_box = per_box
        .into_iter()
        .map(|(k, v)| (k, voxel_downsample(&v, cfg.voxel_size)))
        .collect();
    Ok((bg, per_box))
}

/// Isotropic Gaussians at the given points: scale from the mean distance to
/// the three nearest neighbors, identity rotation, and the configured opacity.
pub fn gaussians_from_points<T: Real>(points: &[[f32; 6]], sh: ShConfig, has_rest: bool, cfg: &InitConfig) -> GaussianSet<T> {
    let mut g = GaussianSet::empty(sh, has_rest);
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let scales: Vec<f64> = if coords.len() < 2 {
        vec![cfg.min_scale; coords.len()]
    } else {
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
        let k = 3.min(coords.len() - 1);
        let q = NonZero::new(k + 1).unwrap();
        coords
            .iter()
            .map(|c| {
                let nn = tree.nearest_n::<SquaredEuclidean>(c, q);
                let d = nn.iter().skip(1).map(|n| n.distance.sqrt()).sum::<f64>() / k as f64;
                d.clamp(cfg.min_scale, cfg.max_scale)
            })
            .collect()
    };
    let lo = T::of(logit(cfg.initial_opacity));
    for (p, s) in points.iter().zip(&scales) {
        let base = [3, 4, 5].map(|c| T::of((p[c] as f64 - SH_OFFSET) / SH_C0));
        g.push(
            [0, 1, 2].map(|c| T::of(p[c] as f64)),
            [T::one(), T::zero(), T::zero(), T::zero()],
            [T::of(s.ln()); 3],
            lo,
            base,
            None,
        );
    }
    g
}

/// Light-gray, low-opacity Gaussians on the upper semisphere of radius
/// `2·d_max` around `center`, with polar angle in `[π/4, π/2]` from +z.
pub fn sky_init<T: Real>(
    center: [f64; 3],
    d_max: f64,
    count: usize,
    sh: ShConfig,
    rng: &mut impl Rng,
) -> GaussianSet<T> {
    let radius = 2.0 * d_max;
    let band = 2.0 * std::f64::consts::PI * (std::f64::consts::FRAC_PI_4).cos();
    let scale = (radius * (band / count.max(1) as f64).sqrt()).max(0.01);
    let base = T::of((0.8 - SH_OFFSET) / SH_C0);
    let mut g = GaussianSet::empty(sh, false);
    for _ in 0..count {
        let theta = rng.random_range(std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_2);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        g.push(
            [0, 1, 2].map(|a| T::of(center[a] + radius * d[a])),
            [T::one(), T::zero(), T::zero(), T::zero()],
            [T::of(scale.ln()); 3],
            T::of(logit(0.1)),
            [base; 3],
            None,
        );
    }
    g
}

/// Concatenates two sets (same SH layout).
pub fn append<T: Real>(dst: &mut GaussianSet<T>, src: &GaussianSet<T>) {
    dst.positions.extend_from_slice(&src.positions);
    dst.quats.extend_from_slice(&src.quats);
    dst.log_scales.extend_from_slice(&src.log_scales);
    dst.opacity_logits.extend_from_slice(&src.opacity_logits);
    dst.sh_base.extend_from_slice(&src.sh_base);
    dst.sh_rest.extend_from_slice(&src.sh_rest);
}

/// How the graph is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphLayout {
    /// One appearance node shared by every traversal.
    pub merged_appearance: bool,
    /// Model boxes as transient nodes; otherwise their points are background.
    pub transients: bool,
}

impl Default for GraphLayout {
    fn default() -> Self {
        GraphLayout {
            merged_appearance: false,
            transients: true,
        }
    }
}

/// Appearance id used for traversal `t` under `layout`.
pub fn appearance_id(layout: &GraphLayout, traversals: &[u32], t: u32) -> u32 {
    if layout.merged_appearance {
        traversals.iter().copied().min().unwrap_or(t)
    } else {
        t
    }
}

/// Builds the initial graph. `traversals` lists the training traversals;
/// clouds and boxes of other traversals are ignored.
pub fn initialize<T: Real>(
    clouds: &[PointCloud],
    boxes: &[BoxTrack],
    traversals: &[u32],
    sh: ShConfig,
    layout: &GraphLayout,
    cfg: &InitConfig,
    rng: &mut impl Rng,
) -> Result<SceneGraph<T>> {
    let clouds: Vec<PointCloud> = clouds.iter().filter(|c| traversals.contains(&c.traversal)).cloned().collect();
    let boxes: Vec<BoxTrack> = if layout.transients {
        boxes.iter().filter(|b| traversals.contains(&b.traversal)).cloned().collect()
    } else {
        Vec::new()
    };
    for b in &boxes {
        b.validate()?;
    }
    let (bg, per_box) = aggregate_and_clean(&clouds, &boxes, cfg)?;
    let mut graph = SceneGraph::new(sh);
    graph.static_node = gaussians_from_points(&bg, sh, false, cfg);

    let n = bg.len() as f64;
    let center = [0, 1, 2].map(|a| bg.iter().map(|p| p[a] as f64).sum::<f64>() / n);
    let c = Vector3::from(center);
    let d_max = bg.iter().map(|p| (xyz(p) - c).norm()).fold(0.0, f64::max);
    if cfg.sky_count > 0 {
        let mut sky: GaussianSet<T> = sky_init(center, d_max.max(1.0), cfg.sky_count, sh, rng);
        // larger sky splats would be culled by the first density step
        let cap = T::of(cfg.max_scale.ln());
        sky.log_scales.iter_mut().for_each(|v: &mut T| *v = v.min(cap));
        append(&mut graph.static_node, &sky);
    }

    let mut ids: Vec<u32> = traversals.iter().map(|&t| appearance_id(layout, traversals, t)).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        graph.add_appearance(id);
    }

    for b in &boxes {
        let pts = &per_box[&b.node_id];
        let mut track = b.pose_track::<T>()?;
        let is_static = classify_static(&track);
        if is_static {
            track.make_constant();
        }
        graph.transients.push(TransientNode {
            traversal: b.traversal,
            node_id: b.node_id,
            gaussians: gaussians_from_points(pts, sh, true, cfg),
            size: Vector3::from(b.extent.map(T::of)),
            pose_track: track,
            tolerance: T::of(cfg.box_tolerance),
            is_static_object: is_static,
        });
    }
    graph.validate()?;
    Ok(graph)
}

/// Box-to-world transform of a local point at keyframe `k`, for generators.
pub fn box_point_to_world(b: &BoxTrack, k: usize, local: [f64; 3]) -> [f64; 3] {
    let q = Vector4::from(b.rotations[k]).normalize();
    let r = unit_quat_to_rot(&q);
    let w = r * Vector3::from(local) + Vector3::from(b.centers[k]);
    [w.x, w.y, w.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(n: usize, step: f64) -> Vec<[f32; 6]> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push([(i as f64 * step) as f32, (j as f64 * step) as f32, 0.0, 0.5, 0.5, 0.5]);
            }
        }
        v
    }

    #[test]
    fn voxel_grid_density_and_idempotence() {
        let pts = plane(40, 0.05);
        let d = voxel_downsample(&pts, 0.15);
        assert!(d.len() <= 14 * 14);
        let mut keys: Vec<_> = d.iter().map(|p| [0, 1, 2].map(|a| (p[a] as f64 / 0.15).floor() as i64)).collect();
        keys.dedup();
        assert_eq!(keys.len(), d.len());
        assert_eq!(voxel_downsample(&d, 0.15), d);
    }

    #[test]
    fn isolated_outlier_removed() {
        let mut pts = plane(32, 0.1);
        pts.truncate(1000);
        pts.push([50.0, 50.0, 20.0, 1.0, 0.0, 0.0]);
        let out = remove_outliers(&pts, 20, 2.0);
        assert!(out.iter().all(|p| p[2] == 0.0));
        assert!(out.len() >= 990);
    }

    #[test]
    fn box_containment() {
        let b = BoxTrack {
            node_id: 7,
            traversal: 0,
            label: "car".into(),
            extent: [2.0, 1.0, 1.0],
            times: vec![0.0, 1.0],
            centers: vec![[10.0, 0.0, 0.5], [12.0, 0.0, 0.5]],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; 2],
        };
        let cloud = PointCloud {
            traversal: 0,
            timestamp: 0.5,
            points: vec![[11.3, 0.2, 0.6, 1.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0, 1.0, 0.0]],
        };
        let (bg, per) = assign_points(&[cloud], &[b], 0.4).unwrap();
        assert_eq!(bg.len(), 1);
        let p = per[&7][0];
        assert!((p[0] - 0.3).abs() < 1e-5 && (p[1] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn gaussian_init_rules() {
        let cfg = InitConfig::default();
        let g: GaussianSet<f64> = gaussians_from_points(&[[1.0, 2.0, 3.0, 0.5, 0.5, 0.5]], ShConfig::default(), false, &cfg);
        assert!((g.scale(0)[0] - 0.01).abs() < 1e-12);
        assert!(g.sh_base.iter().all(|&v| v.abs() < 1e-12));
        assert!((g.opacity(0) - 0.1).abs() < 1e-9);
        let grid: GaussianSet<f64> = gaussians_from_points(&plane(10, 0.2), ShConfig::default(), false, &cfg);
        // interior points: 4 neighbors at h, nearest three all at h
        let s = grid.scale(5 * 10 + 5)[0];
        assert!((s - 0.2).abs() < 1e-6, "{s}");
    }

    #[test]
    fn sky_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: GaussianSet<f64> = sky_init([0.0; 3], 100.0, 100_000, ShConfig::default(), &mut rng);
        assert_eq!(g.len(), 100_000);
        for i in 0..g.len() {
            let p = g.position(i);
            assert!((p.norm() - 200.0).abs() < 1e-6);
            let theta = (p.z / p.norm()).acos();
            assert!((std::f64::consts::FRAC_PI_4 - 1e-12..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&theta));
        }
    }
}
