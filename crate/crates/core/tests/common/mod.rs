#![allow(dead_code)]

use mtgs::camera::{CameraFrame, Intrinsics};
use mtgs::gaussian::GaussianSet;
use mtgs::sh::ShConfig;
use mtgs::Real;
use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at the origin looking down +z.
pub fn camera<T: Real>(w: usize, h: usize) -> CameraFrame<T> {
    let f = T::of(w as f64);
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: T::of(w as f64 / 2.0),
        cy: T::of(h as f64 / 2.0),
    };
    CameraFrame::new(0, 0, 0.0, w, h, k, Matrix4::identity())
}

/// Random Gaussians in front of a [`camera`] of the given aspect.
pub fn random_set<T: Real>(r: &mut ChaCha8Rng, n: usize, has_rest: bool, scale: (f64, f64)) -> GaussianSet<T> {
    let sh = ShConfig::default();
    let mut g = GaussianSet::empty(sh, has_rest);
    let stride = sh.rest_stride();
    for _ in 0..n {
        let z: f64 = r.random_range(2.0..8.0);
        let pos = [
            T::of(r.random_range(-0.5..0.5) * z),
            T::of(r.random_range(-0.4..0.4) * z),
            T::of(z),
        ];
        let q = [0; 4].map(|_| T::of(r.random_range(-1.0..1.0)));
        let ls = [0; 3].map(|_| T::of(r.random_range(scale.0..scale.1).ln()));
        let logit = T::of(r.random_range(-2.0..3.0));
        let base = [0; 3].map(|_| T::of(r.random_range(-1.5..1.5)));
        let rest: Vec<T> = (0..stride).map(|_| T::of(r.random_range(-0.3..0.3))).collect();
        g.push(pos, q, ls, logit, base, Some(&rest));
    }
    g
}

/// Relative error with a floor so exact zeros compare sensibly.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let a = f(&v);
            v[i] = x[i] - h;
            let b = f(&v);
            v[i] = x[i];
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with its index.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(*a, *n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

pub mod criteria;

pub mod fd {
    //! A tiny two-traversal scene for checking the full training objective
    //! against finite differences.

    use mtgs::camera::{look_at, CameraFrame, ColorAffine};
    use mtgs::gaussian::GaussianSet;
    use mtgs::losses::{DepthSample, NccConfig};
    use mtgs::scene::{PoseTrack, SceneGraph, TransientNode, ViewRequest};
    use mtgs::sh::ShConfig;
    use mtgs::train::objective::{view_objective, FrameTargets, ObjectiveConfig};
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const W: usize = 16;
    pub const H: usize = 16;

    /// Large, semi-transparent Gaussians covering every pixel, so no pixel
    /// sits on the 1/255 cutoff, the opacity clip, or early termination.
    fn covering(r: &mut ChaCha8Rng, n: usize, z0: f64, has_rest: bool) -> GaussianSet<f64> {
        let mut g = GaussianSet::empty(ShConfig::default(), has_rest);
        let stride = g.sh.rest_stride();
        for k in 0..n {
            let z = z0 + k as f64 * 0.7 + r.random_range(0.0..0.3);
            let pos = [r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), z];
            let q = [0; 4].map(|_| r.random_range(-1.0..1.0f64));
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let q = q.map(|v| v / qn);
            let ls = [r.random_range(2.5..3.0f64).ln(), r.random_range(3.5..4.0f64).ln(), r.random_range(0.3..0.6f64).ln()];
            let logit = r.random_range(-1.0..0.0);
            let base = [0; 3].map(|_| r.random_range(-0.8..0.8));
            let rest: Vec<f64> = (0..stride).map(|_| r.random_range(-0.15..0.15)).collect();
            g.push(pos, q, ls, logit, base, has_rest.then_some(&rest[..]));
        }
        g
    }

    pub struct Fixture {
        pub graph: SceneGraph<f64>,
        pub cams: Vec<CameraFrame<f64>>,
        pub targets: Vec<FrameTargets<f64>>,
        pub cfg: ObjectiveConfig,
    }

    /// 3 static Gaussians, one transient node of 2 Gaussians (one outside its
    /// box) in traversal 0, and one camera per traversal.
    pub fn fixture(r: &mut ChaCha8Rng) -> Fixture {
        let sh = ShConfig::default();
        let mut graph = SceneGraph::new(sh);
        graph.static_node = covering(r, 3, 4.0, false);
        for t in [0, 1] {
            graph.add_appearance(t);
            let res = &mut graph.appearance.get_mut(&t).unwrap().residuals;
            res.iter_mut().for_each(|v| *v = r.random_range(-0.15..0.15));
        }
        let mut tg = covering(r, 2, 0.0, true);
        tg.positions = vec![0.1, -0.2, 0.1, 0.6, 0.15, -0.1];
        let track = PoseTrack::new(
            vec![0.0, 1.0],
            vec![1.0, 0.05, -0.03, 0.02, 0.98, 0.0, 0.1, -0.05],
            vec![0.1, 0.0, 5.0, -0.1, 0.1, 5.5],
        )
        .unwrap();
        graph.transients.push(TransientNode {
            traversal: 0,
            node_id: 0,
            gaussians: tg,
            size: Vector3::new(1.0, 1.0, 1.0),
            pose_track: track,
            tolerance: 0.05,
            is_static_object: false,
        });
        graph.validate().unwrap();

        let mut cams = Vec::new();
        let mut targets = Vec::new();
        for t in [0u32, 1] {
            let mut cam = super::camera::<f64>(W, H);
            cam.frame_id = t as usize;
            cam.traversal = t;
            cam.timestamp = 0.4;
            let eye = Vector3::new(0.2 - 0.3 * t as f64, -0.1, -0.3);
            cam.world_to_camera = look_at(&eye, &Vector3::new(0.0, 0.05, 6.0), &Vector3::new(0.0, -1.0, 0.0));
            cam.pose_delta = [0.01, -0.02, 0.015, 0.01, 0.005, -0.01];
            let mut p = [0.0; 12];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k < 9 && k % 4 == 0 { 1.0 } else { 0.0 } + r.random_range(-0.05..0.05);
            }
            cam.affine = ColorAffine::from_params(&p);
            let image: Vec<f64> = (0..3 * W * H).map(|_| r.random_range(0.0..1.0)).collect();
            let pseudo: Vec<f64> = (0..W * H)
                .map(|p| 5.0 + 0.05 * (p % W) as f64 + 0.03 * (p / W) as f64 + r.random_range(0.0..0.5))
                .collect();
            let lidar: Vec<DepthSample> = (0..W * H)
                .step_by(7)
                .map(|p| DepthSample {
                    pixel: p,
                    depth: r.random_range(3.0..8.0),
                })
                .collect();
            targets.push(FrameTargets::new(image, pseudo, lidar, &cam));
            cams.push(cam);
        }
        let cfg = ObjectiveConfig {
            ncc: NccConfig {
                patch: 8,
                stride: 4,
                ..NccConfig::default()
            },
            ..ObjectiveConfig::default()
        };
        Fixture { graph, cams, targets, cfg }
    }

    /// Named views into every learnable tensor: `(group, slice)`.
    pub fn groups(f: &mut Fixture) -> Vec<(&'static str, &mut [f64])> {
        let (g, cams) = (&mut f.graph, &mut f.cams);
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        let s = &mut g.static_node;
        out.push(("positions", &mut s.positions));
        out.push(("quats", &mut s.quats));
        out.push(("scales", &mut s.log_scales));
        out.push(("opacities", &mut s.opacity_logits));
        out.push(("sh_base", &mut s.sh_base));
        for a in g.appearance.values_mut() {
            out.push(("appearance residuals", &mut a.residuals));
        }
        let t = &mut g.transients[0];
        out.push(("transient positions", &mut t.gaussians.positions));
        out.push(("transient quats", &mut t.gaussians.quats));
        out.push(("transient scales", &mut t.gaussians.log_scales));
        out.push(("transient opacities", &mut t.gaussians.opacity_logits));
        out.push(("transient sh_base", &mut t.gaussians.sh_base));
        out.push(("transient sh_rest", &mut t.gaussians.sh_rest));
        out.push(("transient rotation", &mut t.pose_track.rotations));
        out.push(("transient translation", &mut t.pose_track.translations));
        for c in cams.iter_mut() {
            out.push(("camera pose delta", &mut c.pose_delta));
        }
        out
    }

    fn requests() -> [ViewRequest; 2] {
        [ViewRequest::traversal(0, 0.4), ViewRequest::traversal(1, 0.4)]
    }

    /// Sum of the total loss over both views.
    pub fn total(f: &Fixture) -> f64 {
        requests()
            .iter()
            .enumerate()
            .map(|(k, req)| view_objective(&f.graph, req, &f.cams[k], &f.targets[k], &f.cfg).unwrap().loss.total)
            .sum()
    }

    /// Analytic gradient in the layout of [`groups`], plus both affines.
    pub fn analytic(f: &Fixture) -> (Vec<f64>, Vec<f64>) {
        let mut flat = Vec::new();
        let mut pose = Vec::new();
        let mut affine = Vec::new();
        let mut sum: Option<mtgs::scene::SceneGrads<f64>> = None;
        for (k, req) in requests().iter().enumerate() {
            let o = view_objective(&f.graph, req, &f.cams[k], &f.targets[k], &f.cfg).unwrap();
            pose.extend_from_slice(&o.pose_delta);
            affine.extend_from_slice(&o.affine);
            sum = Some(match sum {
                None => o.grads,
                Some(mut s) => {
                    add(&mut s, &o.grads);
                    s
                }
            });
        }
        let s = sum.unwrap();
        let g = &s.static_node;
        for v in [&g.positions, &g.quats, &g.log_scales, &g.opacity_logits, &g.sh_base] {
            flat.extend_from_slice(v);
        }
        for a in s.appearance.values() {
            flat.extend_from_slice(a);
        }
        let t = &s.transients[0];
        let tg = &t.gaussians;
        for v in [&tg.positions, &tg.quats, &tg.log_scales, &tg.opacity_logits, &tg.sh_base, &tg.sh_rest, &t.rotations, &t.translations] {
            flat.extend_from_slice(v);
        }
        flat.extend_from_slice(&pose);
        (flat, affine)
    }

    fn add(a: &mut mtgs::scene::SceneGrads<f64>, b: &mtgs::scene::SceneGrads<f64>) {
        let acc = |x: &mut Vec<f64>, y: &Vec<f64>| x.iter_mut().zip(y).for_each(|(p, q)| *p += *q);
        let (x, y) = (&mut a.static_node, &b.static_node);
        acc(&mut x.positions, &y.positions);
        acc(&mut x.quats, &y.quats);
        acc(&mut x.log_scales, &y.log_scales);
        acc(&mut x.opacity_logits, &y.opacity_logits);
        acc(&mut x.sh_base, &y.sh_base);
        acc(&mut x.sh_rest, &y.sh_rest);
        for (k, v) in a.appearance.iter_mut() {
            acc(v, &b.appearance[k]);
        }
        for (x, y) in a.transients.iter_mut().zip(&b.transients) {
            let (p, q) = (&mut x.gaussians, &y.gaussians);
            acc(&mut p.positions, &q.positions);
            acc(&mut p.quats, &q.quats);
            acc(&mut p.log_scales, &q.log_scales);
            acc(&mut p.opacity_logits, &q.opacity_logits);
            acc(&mut p.sh_base, &q.sh_base);
            acc(&mut p.sh_rest, &q.sh_rest);
            acc(&mut x.rotations, &y.rotations);
            acc(&mut x.translations, &y.translations);
        }
    }

    /// Signs of every L1 residual of the normal term (data and TV). The loss
    /// is not differentiable where one of them crosses zero.
    pub fn kinks(f: &Fixture) -> Vec<bool> {
        let mut sig = Vec::new();
        for (k, req) in requests().iter().enumerate() {
            let o = view_objective(&f.graph, req, &f.cams[k], &f.targets[k], &f.cfg).unwrap();
            let n = &o.output.normal;
            let t = &f.targets[k];
            for p in (0..W * H).filter(|&p| t.normal_valid[p]) {
                sig.extend((0..3).map(|c| n[3 * p + c] > t.pseudo_normal[3 * p + c]));
            }
            for y in 0..H - 1 {
                for x in 0..W - 1 {
                    let p = y * W + x;
                    for q in [p + 1, p + W] {
                        sig.extend((0..3).map(|c| n[3 * q + c] > n[3 * p + c]));
                    }
                }
            }
        }
        sig
    }

    pub struct GroupCheck {
        pub name: String,
        pub worst: f64,
        pub checked: usize,
        /// Coordinates whose central difference straddles a kink.
        pub skipped: usize,
    }

    /// Per group: worst relative error of the analytic gradient against
    /// central differences with step `h`, over coordinates where the loss
    /// is differentiable across the whole stencil.
    pub fn check(f: &mut Fixture, h: f64) -> Vec<GroupCheck> {
        let (an, an_affine) = analytic(f);
        let base = kinks(f);
        let mut results: Vec<GroupCheck> = Vec::new();
        let probe = |f: &mut Fixture, set: &mut dyn FnMut(&mut Fixture, f64), x0: f64, a: f64, out: &mut GroupCheck| {
            set(f, x0 + h);
            let (lp, kp) = (total(f), kinks(f));
            set(f, x0 - h);
            let (lm, km) = (total(f), kinks(f));
            set(f, x0);
            if kp != base || km != base {
                out.skipped += 1;
                return;
            }
            let n = (lp - lm) / (2.0 * h);
            let e = super::rel_err(a, n);
            if std::env::var("FD_DEBUG").is_ok() && e > 1e-5 {
                eprintln!("{} analytic {a} numeric {n}", out.name);
            }
            out.worst = out.worst.max(e);
            out.checked += 1;
        };
        let mut offset = 0;
        let n_groups = groups(f).len();
        for gi in 0..n_groups {
            let (name, len) = {
                let gs = groups(f);
                (gs[gi].0, gs[gi].1.len())
            };
            let mut out = GroupCheck { name: name.to_string(), worst: 0.0, checked: 0, skipped: 0 };
            for i in 0..len {
                let x0 = groups(f)[gi].1[i];
                probe(f, &mut |f, v| groups(f)[gi].1[i] = v, x0, an[offset + i], &mut out);
            }
            offset += len;
            results.push(out);
        }
        // affine parameters live on the cameras
        let mut out = GroupCheck { name: "camera affine".into(), worst: 0.0, checked: 0, skipped: 0 };
        for k in 0..2 {
            for i in 0..12 {
                let x0 = f.cams[k].affine.to_params()[i];
                let mut set = |f: &mut Fixture, v: f64| {
                    let mut p = f.cams[k].affine.to_params();
                    p[i] = v;
                    f.cams[k].affine = ColorAffine::from_params(&p);
                };
                probe(f, &mut set, x0, an_affine[12 * k + i], &mut out);
            }
        }
        results.push(out);
        results
    }
}
