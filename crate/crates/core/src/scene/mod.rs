//! The multi-traversal scene graph.
//!
//! One static node holds the background geometry and the direction-invariant
//! color (`sh_base`). Each traversal owns an appearance node with the higher
//! SH bands for every static Gaussian. Transient nodes live in box-local
//! coordinates, belong to exactly one traversal, and carry a rigid pose track.

mod pose;

pub use pose::{classify_static, PoseSample, PoseTrack, EXTRAPOLATION_SLACK, STATIC_MOTION_THRESHOLD};

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::gaussian::{quat_mul, quat_mul_backward, GaussianGrads, GaussianSet};
use crate::real::Real;
use crate::sh::ShConfig;
use crate::{Error, Result};

/// Default box tolerance for the out-of-box test and point assignment, meters.
pub const DEFAULT_BOX_TOLERANCE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceNode<T: Real> {
    pub traversal: u32,
    /// `rest_stride` floats per static Gaussian.
    pub residuals: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientNode<T: Real> {
    pub traversal: u32,
    pub node_id: u32,
    pub gaussians: GaussianSet<T>,
    /// Full box extent, meters.
    pub size: Vector3<T>,
    pub pose_track: PoseTrack<T>,
    pub tolerance: T,
    pub is_static_object: bool,
}

impl<T: Real> TransientNode<T> {
    /// World-frame positions and quaternions of this node's Gaussians at `t`.
    pub fn to_world(&self, t: f64) -> Result<(Vec<T>, Vec<T>)> {
        let pose = self.pose_track.pose_at(t)?;
        let n = self.gaussians.len();
        let mut pos = Vec::with_capacity(3 * n);
        let mut quats = Vec::with_capacity(4 * n);
        for i in 0..n {
            let (x, q) = transform_gaussian(&pose, &self.gaussians.position(i), &self.gaussians.quat(i));
            pos.extend_from_slice(x.as_slice());
            quats.extend_from_slice(q.as_slice());
        }
        Ok((pos, quats))
    }

    /// Local indices of Gaussians outside the tolerance-dilated box.
    pub fn oob_indices(&self) -> Vec<usize> {
        let half = T::of(0.5);
        (0..self.gaussians.len())
            .filter(|&i| {
                let x = self.gaussians.position(i);
                (0..3).any(|a| x[a].abs() > half * self.size[a] + self.tolerance)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> TransientNode<U> {
        TransientNode {
            traversal: self.traversal,
            node_id: self.node_id,
            gaussians: self.gaussians.cast(),
            size: self.size.map(|v| U::of(v.to_f64())),
            pose_track: self.pose_track.cast(),
            tolerance: U::of(self.tolerance.to_f64()),
            is_static_object: self.is_static_object,
        }
    }
}

fn transform_gaussian<T: Real>(
    pose: &PoseSample<T>,
    x: &Vector3<T>,
    q: &Vector4<T>,
) -> (Vector3<T>, Vector4<T>) {
    let xw = pose.rotation * x + pose.translation;
    let qw = quat_mul(&pose.quat, q);
    (xw, qw / qw.norm())
}

/// `transient_to_world` as a free function.
pub fn transient_to_world<T: Real>(node: &TransientNode<T>, t: f64) -> Result<(Vec<T>, Vec<T>)> {
    node.to_world(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph<T: Real> {
    pub sh: ShConfig,
    /// Background Gaussians; `has_rest` is false.
    pub static_node: GaussianSet<T>,
    pub appearance: BTreeMap<u32, AppearanceNode<T>>,
    pub transients: Vec<TransientNode<T>>,
    /// Camera centers of each training traversal, used to pick the nearest
    /// appearance for novel trajectories.
    pub trajectories: BTreeMap<u32, Vec<[f64; 3]>>,
}

/// Which node a flattened Gaussian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Static,
    Transient(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub node: NodeRef,
    pub local: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRequest {
    /// Appearance node supplying the static higher bands.
    pub appearance: u32,
    /// Traversal whose transient nodes are included; `None` renders background only.
    pub transients: Option<u32>,
    pub time: f64,
}

impl ViewRequest {
    pub fn traversal(traversal: u32, time: f64) -> Self {
        ViewRequest {
            appearance: traversal,
            transients: Some(traversal),
            time,
        }
    }
}

#[derive(Debug, Clone)]
struct TransientSegment<T: Real> {
    node: usize,
    start: usize,
    pose: PoseSample<T>,
}

/// Flattened Gaussians for one (traversal, time), ready for the rasterizer.
#[derive(Debug, Clone)]
pub struct RenderView<T: Real> {
    pub gaussians: GaussianSet<T>,
    pub provenance: Vec<Provenance>,
    pub static_count: usize,
    appearance: u32,
    segments: Vec<TransientSegment<T>>,
}

impl<T: Real> RenderView<T> {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn appearance(&self) -> u32 {
        self.appearance
    }

    /// Routes view-space gradients back onto the graph's parameters.
    pub fn scatter(&self, graph: &SceneGraph<T>, view: &GaussianGrads<T>, out: &mut SceneGrads<T>) {
        let ns = self.static_count;
        let rs = graph.sh.rest_stride();
        let sg = &mut out.static_node;
        add(&mut sg.positions, &view.positions[..3 * ns]);
        add(&mut sg.quats, &view.quats[..4 * ns]);
        add(&mut sg.log_scales, &view.log_scales[..3 * ns]);
        add(&mut sg.opacity_logits, &view.opacity_logits[..ns]);
        add(&mut sg.sh_base, &view.sh_base[..3 * ns]);
        if let Some(res) = out.appearance.get_mut(&self.appearance) {
            add(res, &view.sh_rest[..rs * ns]);
        }

        for seg in &self.segments {
            let node = &graph.transients[seg.node];
            let tg = &mut out.transients[seg.node];
            let g = &node.gaussians;
            let n = g.len();
            let s = seg.start;
            let pose = &seg.pose;
            let mut d_rot = Matrix3::zeros();
            let mut d_trans = Vector3::zeros();
            let mut d_quat = Vector4::zeros();
            for i in 0..n {
                let v = s + i;
                let dxw = Vector3::from_column_slice(&view.positions[3 * v..3 * v + 3]);
                let xl = g.position(i);
                let dxl = pose.rotation.transpose() * dxw;
                d_rot += dxw * xl.transpose();
                d_trans += dxw;
                for c in 0..3 {
                    tg.gaussians.positions[3 * i + c] += dxl[c];
                }

                let ql = g.quat(i);
                let prod = quat_mul(&pose.quat, &ql);
                let pn = prod.norm();
                let u = prod / pn;
                let dqw = Vector4::from_column_slice(&view.quats[4 * v..4 * v + 4]);
                let dprod = (dqw - u * u.dot(&dqw)) / pn;
                let (dqp, dql) = quat_mul_backward(&pose.quat, &ql, &dprod);
                d_quat += dqp;
                for c in 0..4 {
                    tg.gaussians.quats[4 * i + c] += dql[c];
                }
            }
            add(&mut tg.gaussians.log_scales, &view.log_scales[3 * s..3 * (s + n)]);
            add(&mut tg.gaussians.opacity_logits, &view.opacity_logits[s..s + n]);
            add(&mut tg.gaussians.sh_base, &view.sh_base[3 * s..3 * (s + n)]);
            add(&mut tg.gaussians.sh_rest, &view.sh_rest[rs * s..rs * (s + n)]);
            d_quat += pose.rotation_grad_to_quat(&d_rot);
            pose.backward(&d_quat, &d_trans, &mut tg.rotations, &mut tg.translations);
        }
    }
}

fn add<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Gradient buffers shaped like a [`SceneGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads<T: Real> {
    pub static_node: GaussianGrads<T>,
    pub appearance: BTreeMap<u32, Vec<T>>,
    pub transients: Vec<TransientGrads<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientGrads<T: Real> {
    pub gaussians: GaussianGrads<T>,
    pub rotations: Vec<T>,
    pub translations: Vec<T>,
}

impl<T: Real> SceneGrads<T> {
    pub fn zeros_like(graph: &SceneGraph<T>) -> Self {
        SceneGrads {
            static_node: GaussianGrads::zeros_like(&graph.static_node),
            appearance: graph
                .appearance
                .iter()
                .map(|(&k, a)| (k, vec![T::zero(); a.residuals.len()]))
                .collect(),
            transients: graph
                .transients
                .iter()
                .map(|t| TransientGrads {
                    gaussians: GaussianGrads::zeros_like(&t.gaussians),
                    rotations: vec![T::zero(); t.pose_track.rotations.len()],
                    translations: vec![T::zero(); t.pose_track.translations.len()],
                })
                .collect(),
        }
    }
}

impl<T: Real> SceneGraph<T> {
    pub fn new(sh: ShConfig) -> Self {
        SceneGraph {
            sh,
            static_node: GaussianSet::empty(sh, false),
            appearance: BTreeMap::new(),
            transients: Vec::new(),
            trajectories: BTreeMap::new(),
        }
    }

    /// Adds an appearance node with zero residuals for every static Gaussian.
    pub fn add_appearance(&mut self, traversal: u32) {
        let n = self.static_node.len() * self.sh.rest_stride();
        self.appearance.insert(
            traversal,
            AppearanceNode {
                traversal,
                residuals: vec![T::zero(); n],
            },
        );
    }

    pub fn num_gaussians(&self) -> usize {
        self.static_node.len() + self.transients.iter().map(|t| t.gaussians.len()).sum::<usize>()
    }

    /// Structural invariants: array lengths agree, residual blocks track the
    /// static node, and transients own full SH blocks.
    pub fn validate(&self) -> Result<()> {
        self.static_node.check()?;
        if self.static_node.has_rest {
            return Err(Error::Contract("static node must not own higher SH bands".into()));
        }
        let expect = self.static_node.len() * self.sh.rest_stride();
        for (k, a) in &self.appearance {
            if a.traversal != *k || a.residuals.len() != expect {
                return Err(Error::Contract(format!(
                    "appearance node {k} has {} residual floats, expected {expect}",
                    a.residuals.len()
                )));
            }
        }
        for t in &self.transients {
            t.gaussians.check()?;
            if !t.gaussians.has_rest {
                return Err(Error::Contract("transient nodes own full SH blocks".into()));
            }
        }
        Ok(())
    }

    /// Flattens the subgraph for `req`: static Gaussians with the chosen
    /// appearance residuals, then the world-transformed transients of the
    /// requested traversal.
    pub fn assemble(&self, req: &ViewRequest) -> Result<RenderView<T>> {
        let app = self
            .appearance
            .get(&req.appearance)
            .ok_or(Error::MissingAppearance(req.appearance))?;
        let ns = self.static_node.len();
        let mut g = GaussianSet {
            sh: self.sh,
            has_rest: true,
            positions: self.static_node.positions.clone(),
            quats: self.static_node.quats.clone(),
            log_scales: self.static_node.log_scales.clone(),
            opacity_logits: self.static_node.opacity_logits.clone(),
            sh_base: self.static_node.sh_base.clone(),
            sh_rest: app.residuals.clone(),
        };
        let mut provenance: Vec<Provenance> = (0..ns as u32)
            .map(|local| Provenance {
                node: NodeRef::Static,
                local,
            })
            .collect();
        let mut segments = Vec::new();
        if let Some(trav) = req.transients {
            for (ni, node) in self.transients.iter().enumerate() {
                if node.traversal != trav {
                    continue;
                }
                let pose = node.pose_track.pose_at(req.time)?;
                let start = g.len();
                let src = &node.gaussians;
                for i in 0..src.len() {
                    let (x, q) = transform_gaussian(&pose, &src.position(i), &src.quat(i));
                    g.positions.extend_from_slice(x.as_slice());
                    g.quats.extend_from_slice(q.as_slice());
                    provenance.push(Provenance {
                        node: NodeRef::Transient(ni as u32),
                        local: i as u32,
                    });
                }
                g.log_scales.extend_from_slice(&src.log_scales);
                g.opacity_logits.extend_from_slice(&src.opacity_logits);
                g.sh_base.extend_from_slice(&src.sh_base);
                g.sh_rest.extend_from_slice(&src.sh_rest);
                segments.push(TransientSegment {
                    node: ni,
                    start,
                    pose,
                });
            }
        }
        Ok(RenderView {
            gaussians: g,
            provenance,
            static_count: ns,
            appearance: req.appearance,
            segments,
        })
    }

    /// Training traversal whose camera path is closest (mean closest-point
    /// distance) to `query`; ties go to the lowest id.
    pub fn select_appearance(&self, query: &[[f64; 3]]) -> Result<u32> {
        if self.appearance.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut best: Option<(u32, f64)> = None;
        for &t in self.appearance.keys() {
            let d = match self.trajectories.get(&t) {
                Some(path) if !path.is_empty() && !query.is_empty() => mean_closest_distance(query, path),
                _ => f64::INFINITY,
            };
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((t, d));
            }
        }
        Ok(best.map(|(t, _)| t).unwrap_or(0))
    }

    pub fn cast<U: Real>(&self) -> SceneGraph<U> {
        SceneGraph {
            sh: self.sh,
            static_node: self.static_node.cast(),
            appearance: self
                .appearance
                .iter()
                .map(|(&k, a)| {
                    (
                        k,
                        AppearanceNode {
                            traversal: a.traversal,
                            residuals: crate::real::cast_vec(&a.residuals),
                        },
                    )
                })
                .collect(),
            transients: self.transients.iter().map(|t| t.cast()).collect(),
            trajectories: self.trajectories.clone(),
        }
    }
}

fn mean_closest_distance(query: &[[f64; 3]], path: &[[f64; 3]]) -> f64 {
    let dist = |a: &[f64; 3], b: &[f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    query
        .iter()
        .map(|q| path.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / query.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{covariance, quat_to_rot};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_4;

    fn set_with(points: &[[f64; 3]], has_rest: bool) -> GaussianSet<f64> {
        let mut g = GaussianSet::empty(ShConfig::default(), has_rest);
        for p in points {
            g.push(*p, [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 0.0, [0.1, 0.2, 0.3], None);
        }
        g
    }

    fn node(traversal: u32, points: &[[f64; 3]], rot: [f64; 4], trans: [f64; 3]) -> TransientNode<f64> {
        TransientNode {
            traversal,
            node_id: 0,
            gaussians: set_with(points, true),
            size: Vector3::new(2.0, 2.0, 2.0),
            pose_track: PoseTrack::new(vec![0.0, 1.0], [rot, rot].concat(), [trans, trans].concat()).unwrap(),
            tolerance: 0.5,
            is_static_object: false,
        }
    }

    fn graph() -> SceneGraph<f64> {
        let mut g = SceneGraph::new(ShConfig::default());
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        g.static_node = set_with(&pts, false);
        g.add_appearance(0);
        g.add_appearance(1);
        g.transients.push(node(0, &[[0.0; 3]; 5], [1.0, 0.0, 0.0, 0.0], [0.0; 3]));
        g
    }

    #[test]
    fn identity_and_translation() {
        let n = node(0, &[[0.5, -0.2, 0.1]], [1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        let (x, q) = n.to_world(0.5).unwrap();
        assert_eq!(x, vec![0.5, -0.2, 0.1]);
        assert_eq!(q, vec![1.0, 0.0, 0.0, 0.0]);
        let n = node(0, &[[0.0; 3]], [1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        let (x, q) = n.to_world(0.5).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        assert_eq!(q, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rotation_moves_covariance_consistently() {
        let mut n = node(0, &[[1.0, 0.0, 0.0]], [FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()], [1.0, 1.0, 0.0]);
        n.gaussians.quats = vec![0.9, 0.2, -0.3, 0.1];
        n.gaussians.log_scales = vec![0.3, -0.5, -1.2];
        let (x, q) = n.to_world(0.0).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
        let r_node = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = n.gaussians.scale(0);
        let local = covariance(&quat_to_rot(&n.gaussians.quat(0)).unwrap(), &s);
        let world = covariance(&quat_to_rot(&Vector4::from_column_slice(&q)).unwrap(), &s);
        assert_abs_diff_eq!(world, r_node * local * r_node.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn rigid_motion_preserves_distances() {
        let pts = [[0.3, 0.1, -0.2], [1.0, -0.5, 0.7], [-0.4, 0.9, 0.2]];
        let n = node(0, &pts, [0.7, 0.2, -0.5, 0.3], [4.0, -1.0, 2.0]);
        let (x, _) = n.to_world(0.2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let dl = (Vector3::from(pts[a]) - Vector3::from(pts[b])).norm();
                let dw = (Vector3::from_column_slice(&x[3 * a..3 * a + 3])
                    - Vector3::from_column_slice(&x[3 * b..3 * b + 3]))
                .norm();
                assert_abs_diff_eq!(dl, dw, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn subgraph_counts_and_isolation() {
        let g = graph();
        let v = g.assemble(&ViewRequest::traversal(0, 0.5)).unwrap();
        assert_eq!(v.len(), 15);
        assert!(v.provenance[..10].iter().all(|p| p.node == NodeRef::Static));
        assert!(v.provenance[10..].iter().all(|p| p.node == NodeRef::Transient(0)));
        let v = g.assemble(&ViewRequest::traversal(1, 0.5)).unwrap();
        assert_eq!(v.len(), 10);
        assert!(matches!(
            g.assemble(&ViewRequest::traversal(7, 0.5)),
            Err(Error::MissingAppearance(7))
        ));
    }

    #[test]
    fn out_of_box() {
        let n = node(0, &[[0.0; 3]], [1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        assert!(n.oob_indices().is_empty());
        let n = node(0, &[[1.6, 0.0, 0.0], [1.4, 0.0, 0.0], [0.0, -1.7, 0.0]], [1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(n.oob_indices(), vec![0, 2]);
    }

    #[test]
    fn appearance_selection() {
        let mut g = graph();
        assert!(SceneGraph::<f64>::new(ShConfig::default()).select_appearance(&[[0.0; 3]]).is_err());
        g.trajectories.insert(0, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        g.trajectories.insert(1, vec![[0.0, 3.0, 0.0], [1.0, 3.0, 0.0]]);
        assert_eq!(g.select_appearance(&[[0.5, 2.9, 0.0]]).unwrap(), 1);
        assert_eq!(g.select_appearance(&[[0.0, 0.0, 0.0]]).unwrap(), 0);
        assert_eq!(g.select_appearance(&[[0.0, 1.5, 0.0]]).unwrap(), 0);
        let mut single = graph();
        single.appearance.remove(&1);
        single.transients.clear();
        assert_eq!(single.select_appearance(&[[5.0, 5.0, 5.0]]).unwrap(), 0);
    }

    #[test]
    fn validation_catches_lockstep_violation() {
        let mut g = graph();
        g.validate().unwrap();
        g.appearance.get_mut(&1).unwrap().residuals.pop();
        assert!(g.validate().is_err());
    }
}
