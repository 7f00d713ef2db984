//! Adaptive density control: clone small under-reconstructed Gaussians,
//! split large ones, cull transparent or oversized ones, and periodically
//! reset opacities. Appearance residuals and Adam moments follow every
//! reordering of the static node.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaussian::{gather_rows, quat_to_rot, GaussianSet};
use crate::raster::RasterGrads;
use crate::real::logit;
use crate::scene::{NodeRef, RenderView, SceneGraph};
use crate::{Error, Result};

use super::{Optimizer, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// Mean NDC-space gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Largest scale (m) below which a candidate is cloned rather than split.
    pub split_scale: f64,
    pub split_factor: f64,
    pub cull_scale: f64,
    pub cull_opacity: f64,
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    pub reset_interval: usize,
    /// Opacity assigned by a reset (as an upper bound).
    pub reset_opacity: f64,
    /// Growth stops once the graph holds this many Gaussians.
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            grad_threshold: 0.001,
            split_scale: 0.2,
            split_factor: 1.6,
            cull_scale: 0.5,
            cull_opacity: 0.005,
            interval: 100,
            start: 500,
            stop: 15_000,
            reset_interval: 3000,
            reset_opacity: 0.01,
            max_gaussians: 3_000_000,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_threshold > 0.0
            && self.split_scale > 0.0
            && self.split_factor > 1.0
            && self.cull_scale >= self.split_scale
            && (0.0..1.0).contains(&self.cull_opacity)
            && self.interval > 0
            && (0.0..1.0).contains(&self.reset_opacity);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid density control settings".into()))
        }
    }

    pub fn densify_at(&self, step: usize) -> bool {
        step >= self.start && step <= self.stop && step > 0 && step.is_multiple_of(self.interval)
    }

    pub fn reset_at(&self, step: usize) -> bool {
        self.reset_interval > 0 && step > 0 && step <= self.stop && step.is_multiple_of(self.reset_interval)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl NodeStats {
    fn new(n: usize) -> Self {
        NodeStats {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Screen-space gradient statistics since the last densification.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensityStats {
    pub static_node: NodeStats,
    pub transients: Vec<NodeStats>,
}

impl DensityStats {
    pub fn new(graph: &SceneGraph<f32>) -> Self {
        DensityStats {
            static_node: NodeStats::new(graph.static_node.len()),
            transients: graph.transients.iter().map(|t| NodeStats::new(t.gaussians.len())).collect(),
        }
    }

    pub fn accumulate(&mut self, view: &RenderView<f32>, rg: &RasterGrads<f32>) {
        for (k, p) in view.provenance.iter().enumerate() {
            if !rg.visible[k] {
                continue;
            }
            let st = match p.node {
                NodeRef::Static => &mut self.static_node,
                NodeRef::Transient(i) => &mut self.transients[i as usize],
            };
            let l = p.local as usize;
            st.grad_sum[l] += rg.mean2d_ndc[k] as f64;
            st.count[l] += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub culled: usize,
    pub before: usize,
    pub after: usize,
}

impl DensityReport {
    fn add(&mut self, o: DensityReport) {
        self.cloned += o.cloned;
        self.split += o.split;
        self.culled += o.culled;
        self.before += o.before;
        self.after += o.after;
    }
}

/// New row order: `(source row, fresh)` plus the indices (into the new
/// order) of split children whose geometry must be resampled.
struct Plan {
    rows: Vec<(usize, bool)>,
    children: Vec<usize>,
    report: DensityReport,
}

fn plan(set: &GaussianSet<f32>, stats: &NodeStats, cfg: &DensityConfig, allow_growth: bool) -> Plan {
    let n = set.len();
    let mut rows = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    let mut report = DensityReport {
        before: n,
        ..Default::default()
    };
    for i in 0..n {
        let s = set.max_scale(i) as f64;
        if (set.opacity(i) as f64) < cfg.cull_opacity || s > cfg.cull_scale {
            report.culled += 1;
            continue;
        }
        let hot = allow_growth && stats.count.get(i).is_some_and(|_| stats.mean(i) > cfg.grad_threshold);
        if hot && s >= cfg.split_scale {
            splits.push(i);
            continue;
        }
        rows.push((i, false));
        if hot {
            clones.push(i);
        }
    }
    report.cloned = clones.len();
    report.split = splits.len();
    rows.extend(clones.iter().map(|&i| (i, true)));
    let mut children = Vec::with_capacity(2 * splits.len());
    for &i in &splits {
        for _ in 0..2 {
            children.push(rows.len());
            rows.push((i, true));
        }
    }
    report.after = rows.len();
    Plan { rows, children, report }
}

fn apply_geometry<R: Rng>(set: &mut GaussianSet<f32>, children: &[usize], factor: f64, rng: &mut R) {
    let shrink = (factor as f32).ln();
    for &c in children {
        let rot = quat_to_rot(&set.quat(c)).unwrap_or_else(|_| Matrix3::identity());
        let s = set.scale(c);
        let z = Vector3::from_fn(|_, _| rng.sample::<f32, _>(StandardNormal));
        let x = set.position(c) + rot * s.component_mul(&z);
        set.positions[3 * c..3 * c + 3].copy_from_slice(x.as_slice());
        for v in &mut set.log_scales[3 * c..3 * c + 3] {
            *v -= shrink;
        }
    }
}

fn gather_set(set: &GaussianSet<f32>, rows: &[(usize, bool)]) -> GaussianSet<f32> {
    let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
    set.gather(&idx)
}

fn gather_moments(opt: &mut Optimizer, slot: Slot, stride: usize, rows: &[(usize, bool)]) {
    if let Some(m) = opt.moments_mut(slot) {
        if m.m.is_empty() {
            return;
        }
        m.gather(stride, rows);
    }
}

/// One densify-and-prune pass. Statistics are reset afterwards.
pub fn density_control<R: Rng>(
    graph: &mut SceneGraph<f32>,
    opt: &mut Optimizer,
    stats: &mut DensityStats,
    cfg: &DensityConfig,
    rng: &mut R,
) -> Result<DensityReport> {
    let allow_growth = graph.num_gaussians() < cfg.max_gaussians;
    let mut total = DensityReport::default();

    let p = plan(&graph.static_node, &stats.static_node, cfg, allow_growth);
    let mut set = gather_set(&graph.static_node, &p.rows);
    apply_geometry(&mut set, &p.children, cfg.split_factor, rng);
    graph.static_node = set;
    let idx: Vec<usize> = p.rows.iter().map(|r| r.0).collect();
    let rs = graph.sh.rest_stride();
    for (t, node) in graph.appearance.iter_mut() {
        node.residuals = gather_rows(&node.residuals, rs, &idx);
        gather_moments(opt, Slot::Appearance(*t), rs, &p.rows);
    }
    for (slot, stride) in [
        (Slot::StaticPositions, 3),
        (Slot::StaticQuats, 4),
        (Slot::StaticScales, 3),
        (Slot::StaticOpacities, 1),
        (Slot::StaticDc, 3),
    ] {
        gather_moments(opt, slot, stride, &p.rows);
    }
    total.add(p.report);

    for (k, node) in graph.transients.iter_mut().enumerate() {
        let p = plan(&node.gaussians, &stats.transients[k], cfg, allow_growth);
        let mut set = gather_set(&node.gaussians, &p.rows);
        apply_geometry(&mut set, &p.children, cfg.split_factor, rng);
        let rs = set.rest_stride();
        node.gaussians = set;
        for (slot, stride) in [
            (Slot::TransientPositions(k), 3),
            (Slot::TransientQuats(k), 4),
            (Slot::TransientScales(k), 3),
            (Slot::TransientOpacities(k), 1),
            (Slot::TransientDc(k), 3),
            (Slot::TransientRest(k), rs),
        ] {
            gather_moments(opt, slot, stride, &p.rows);
        }
        total.add(p.report);
    }

    *stats = DensityStats::new(graph);
    graph.validate()?;
    Ok(total)
}

/// Clamps every opacity to at most `max_opacity` and clears the opacity moments.
pub fn reset_opacity(graph: &mut SceneGraph<f32>, opt: &mut Optimizer, max_opacity: f64) {
    let cap = logit(max_opacity as f32);
    let clamp = |v: &mut Vec<f32>| v.iter_mut().for_each(|x| *x = x.min(cap));
    clamp(&mut graph.static_node.opacity_logits);
    for t in graph.transients.iter_mut() {
        clamp(&mut t.gaussians.opacity_logits);
    }
    for (slot, m) in opt.moments.iter_mut() {
        if matches!(slot, Slot::StaticOpacities | Slot::TransientOpacities(_)) {
            m.m.iter_mut().for_each(|v| *v = 0.0);
            m.v.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
