mod common;

use approx::assert_abs_diff_eq;
use common::*;
use mtgs::camera::{look_at, CameraFrame};
use mtgs::gaussian::GaussianSet;
use mtgs::raster::{backward_gaussians, render, render_gaussians, render_gaussians_naive, ImageGrads, RasterConfig};
use mtgs::real::logit;
use mtgs::scene::{SceneGraph, ViewRequest};
use mtgs::sh::{ShConfig, SH_C0};
use nalgebra::Vector3;
use rand::Rng;

fn single(pos: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3]) -> GaussianSet<f64> {
    let mut g = GaussianSet::empty(ShConfig::default(), true);
    let base = rgb.map(|c| (c - 0.5) / SH_C0);
    g.push(pos, [1.0, 0.0, 0.0, 0.0], [scale.ln(); 3], logit(opacity), base, None);
    g
}

#[test]
fn projects_on_axis_point_to_principal_point() {
    let mut cam = camera::<f64>(100, 100);
    cam.intrinsics.fx = 100.0;
    cam.intrinsics.fy = 100.0;
    let sigma = 0.2;
    let g = single([0.0, 0.0, 10.0], sigma, 0.9, [0.5; 3]);
    let cfg = RasterConfig::default();
    let (_, st) = render_gaussians(&g, &cam, &cfg);
    let s = &st.splats()[0];
    assert_abs_diff_eq!(s.mean2d.x, 50.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.mean2d.y, 50.0, epsilon = 1e-12);
    let expect = (100.0 * sigma / 10.0f64).powi(2) + cfg.blur;
    assert_abs_diff_eq!(s.cov2d[0], expect, epsilon = 1e-9);
    assert_abs_diff_eq!(s.cov2d[2], expect, epsilon = 1e-9);
    assert_abs_diff_eq!(s.cov2d[1], 0.0, epsilon = 1e-12);
}

#[test]
fn near_plane_culls() {
    let cam = camera::<f64>(32, 32);
    let g = single([0.0, 0.0, 0.1], 0.01, 0.9, [0.5; 3]);
    let (out, st) = render_gaussians(&g, &cam, &RasterConfig::default());
    assert_eq!(st.num_splats(), 0);
    assert!(out.alpha.iter().all(|&a| a == 0.0));
}

#[test]
fn opaque_single_splat() {
    let cam = camera::<f64>(16, 16);
    let g = single([0.0, 0.0, 4.0], 10.0, 1.0 - 1e-9, [0.2, 0.4, 0.9]);
    let (out, _) = render_gaussians(&g, &cam, &RasterConfig::default());
    let p = 8 * 16 + 8;
    // alpha saturates at the 0.999 clip
    assert_abs_diff_eq!(out.alpha[p], 0.999, epsilon = 1e-6);
    assert_abs_diff_eq!(out.color[3 * p + 2], 0.9 * 0.999, epsilon = 1e-6);
    assert_abs_diff_eq!(out.depth[p], 4.0, epsilon = 1e-9);
}

#[test]
fn two_half_transparent_splats() {
    let cam = camera::<f64>(16, 16);
    let mut g = single([0.0, 0.0, 3.0], 50.0, 0.5, [1.0, 0.0, 0.0]);
    let far = single([0.0, 0.0, 6.0], 50.0, 0.5, [0.0, 1.0, 0.0]);
    g.push([0.0, 0.0, 6.0], [1.0, 0.0, 0.0, 0.0], [50f64.ln(); 3], far.opacity_logits[0], [far.sh_base[0], far.sh_base[1], far.sh_base[2]], None);
    let (out, _) = render_gaussians(&g, &cam, &RasterConfig::default());
    // pixel whose center sits on the optical axis up to the half-pixel offset
    let p = 8 * 16 + 8;
    assert_abs_diff_eq!(out.color[3 * p], 0.5, epsilon = 1e-4);
    assert_abs_diff_eq!(out.color[3 * p + 1], 0.25, epsilon = 1e-4);
    assert_abs_diff_eq!(out.alpha[p], 0.75, epsilon = 1e-4);
    assert_abs_diff_eq!(out.depth[p], (0.5 * 3.0 + 0.25 * 6.0) / 0.75, epsilon = 1e-3);
}

#[test]
fn nearer_opaque_splat_wins() {
    let cam = camera::<f64>(32, 32);
    let mut g = single([0.0, 0.0, 8.0], 0.5, 0.99, [0.0, 0.0, 1.0]);
    g.push([0.0, 0.0, 3.0], [1.0, 0.0, 0.0, 0.0], [0.3f64.ln(); 3], logit(0.99), [(1.0 - 0.5) / SH_C0, -0.5 / SH_C0, -0.5 / SH_C0], None);
    let (out, _) = render_gaussians(&g, &cam, &RasterConfig::default());
    let p = 16 * 32 + 16;
    assert!(out.color[3 * p] > 0.9);
    assert!(out.color[3 * p + 2] < 0.05);
}

#[test]
fn tiled_matches_naive() {
    let mut r = rng(7);
    let cfg = RasterConfig::default();
    for _ in 0..10 {
        let n = r.random_range(1..150);
        let g: GaussianSet<f64> = random_set(&mut r, n, true, (0.02, 0.6));
        let cam = camera::<f64>(48, 40);
        let (a, _) = render_gaussians(&g, &cam, &cfg);
        let b = render_gaussians_naive(&g, &cam, &cfg);
        for (x, y) in a.color.iter().zip(&b.color) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn weights_and_transmittance_sum_to_one() {
    let mut r = rng(3);
    let cfg = RasterConfig::default();
    let mut g: GaussianSet<f32> = random_set(&mut r, 120, false, (0.05, 0.8));
    // constant white color so the color channel accumulates Σ w
    for v in g.sh_base.iter_mut() {
        *v = (0.5 / SH_C0) as f32;
    }
    let cam = camera::<f32>(40, 32);
    let (out, _) = render_gaussians(&g, &cam, &cfg);
    for p in 0..out.num_pixels() {
        let s = out.color[3 * p] + (1.0 - out.alpha[p]);
        assert!((s - 1.0).abs() < 1e-5, "{s}");
    }
}

#[test]
fn empty_scene_renders_background() {
    let cam = camera::<f32>(20, 10);
    let cfg = RasterConfig {
        background: [0.1, 0.2, 0.3],
        ..Default::default()
    };
    let g = GaussianSet::<f32>::empty(ShConfig::default(), true);
    let (out, _) = render_gaussians(&g, &cam, &cfg);
    assert!(out.alpha.iter().all(|&a| a == 0.0));
    assert!(out.color.chunks(3).all(|c| c == [0.1, 0.2, 0.3]));
}

#[test]
fn rendering_is_deterministic() {
    let mut r = rng(11);
    let g: GaussianSet<f32> = random_set(&mut r, 300, true, (0.02, 0.5));
    let cam = camera::<f32>(64, 48);
    let cfg = RasterConfig::default();
    let (a, sa) = render_gaussians(&g, &cam, &cfg);
    let (b, sb) = render_gaussians(&g, &cam, &cfg);
    assert_eq!(a, b);
    let grads = ImageGrads {
        color: (0..a.color.len()).map(|i| (i % 7) as f32 * 0.1 - 0.3).collect(),
        ..Default::default()
    };
    let ga = backward_gaussians(&g, &cam, &a, &sa, &grads).unwrap();
    let gb = backward_gaussians(&g, &cam, &b, &sb, &grads).unwrap();
    assert_eq!(ga.gaussians, gb.gaussians);
}

#[test]
fn invariant_under_global_rigid_transform() {
    let mut r = rng(5);
    // view-dependent bands are not rotated with the scene, so use band 0 only
    let g: GaussianSet<f64> = random_set(&mut r, 80, false, (0.05, 0.4));
    let cam = camera::<f64>(40, 30);
    let cfg = RasterConfig::default();
    let (a, _) = render_gaussians(&g, &cam, &cfg);

    let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.5, 1.1);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let t = Vector3::new(3.0, -2.0, 5.0);
    let mut moved = g.clone();
    for i in 0..g.len() {
        let x = rot * g.position(i) + t;
        moved.positions[3 * i..3 * i + 3].copy_from_slice(x.as_slice());
        let qi = g.quat(i);
        let qi = nalgebra::Quaternion::new(qi[0], qi[1], qi[2], qi[3]);
        let p = q.quaternion() * qi;
        moved.quats[4 * i..4 * i + 4].copy_from_slice(&[p.w, p.i, p.j, p.k]);
    }
    // W' = W · M⁻¹
    let m_inv = nalgebra::Isometry3::from_parts(t.into(), q).inverse().to_homogeneous();
    let mut cam2 = cam.clone();
    cam2.world_to_camera = cam.world_to_camera * m_inv;
    let (b, _) = render_gaussians(&moved, &cam2, &cfg);
    for (x, y) in a.color.iter().zip(&b.color) {
        assert!((x - y).abs() < 1e-5);
    }
    for (x, y) in a.depth.iter().zip(&b.depth) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng(2);
    let g: GaussianSet<f64> = random_set(&mut r, 20, true, (0.1, 0.5));
    let cam = camera::<f64>(32, 32);
    let (out, st) = render_gaussians(&g, &cam, &RasterConfig::default());
    let gr = backward_gaussians(&g, &cam, &out, &st, &ImageGrads::zeros(32 * 32)).unwrap();
    assert!(gr.gaussians.positions.iter().chain(&gr.gaussians.sh_rest).all(|&v| v == 0.0));
    assert!(gr.pose_delta.iter().all(|&v| v == 0.0));
}

#[test]
fn mismatched_state_is_a_contract_error() {
    let mut r = rng(2);
    let g: GaussianSet<f64> = random_set(&mut r, 5, true, (0.1, 0.5));
    let cam = camera::<f64>(16, 16);
    let (out, st) = render_gaussians(&g, &cam, &RasterConfig::default());
    let other = camera::<f64>(8, 8);
    assert!(backward_gaussians(&g, &other, &out, &st, &ImageGrads::default()).is_err());
    let bad = ImageGrads {
        color: vec![0.0; 5],
        ..Default::default()
    };
    assert!(backward_gaussians(&g, &cam, &out, &st, &bad).is_err());
}

// ---- finite-difference checks -------------------------------------------------

/// Gaussians large enough to cover the whole image, so no pixel sits on the
/// 1/255 cutoff, the opacity clip, or early termination.
fn covering_set(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> GaussianSet<f64> {
    let mut g = GaussianSet::empty(ShConfig::default(), true);
    let stride = g.sh.rest_stride();
    for k in 0..n {
        let z = 4.0 + k as f64 * 0.7 + r.random_range(0.0..0.3);
        let pos = [r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), z];
        let q = [0; 4].map(|_| r.random_range(-1.0..1.0f64));
        let ls = [r.random_range(2.5..3.0f64).ln(), r.random_range(3.5..4.0f64).ln(), r.random_range(0.3..0.6f64).ln()];
        let logit = r.random_range(-1.0..0.0);
        let base = [0; 3].map(|_| r.random_range(-0.8..0.8));
        let rest: Vec<f64> = (0..stride).map(|_| r.random_range(-0.15..0.15)).collect();
        g.push(pos, q, ls, logit, base, Some(&rest));
    }
    g
}

fn tilted_camera(w: usize, h: usize) -> CameraFrame<f64> {
    let mut cam = camera::<f64>(w, h);
    cam.world_to_camera = look_at(&Vector3::new(0.2, -0.1, -0.3), &Vector3::new(0.0, 0.05, 6.0), &Vector3::new(0.0, -1.0, 0.0));
    cam.pose_delta = [0.01, -0.02, 0.015, 0.01, 0.005, -0.01];
    cam
}

fn pack(g: &GaussianSet<f64>, cam: &CameraFrame<f64>) -> Vec<f64> {
    [&g.positions[..], &g.quats, &g.log_scales, &g.opacity_logits, &g.sh_base, &g.sh_rest, &cam.pose_delta].concat()
}

fn unpack(v: &[f64], g: &mut GaussianSet<f64>, cam: &mut CameraFrame<f64>) {
    let mut o = 0;
    for dst in [&mut g.positions, &mut g.quats, &mut g.log_scales, &mut g.opacity_logits, &mut g.sh_base, &mut g.sh_rest] {
        let n = dst.len();
        dst.copy_from_slice(&v[o..o + n]);
        o += n;
    }
    cam.pose_delta.copy_from_slice(&v[o..o + 6]);
}

fn check_fd(g: &GaussianSet<f64>, cam: &CameraFrame<f64>, grads: &ImageGrads<f64>) {
    let cfg = RasterConfig::default();
    let loss = |g: &GaussianSet<f64>, cam: &CameraFrame<f64>| {
        let (o, _) = render_gaussians(g, cam, &cfg);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&o.color, &grads.color) + dot(&o.depth, &grads.depth) + dot(&o.normal, &grads.normal) + dot(&o.alpha, &grads.alpha)
    };
    let (out, st) = render_gaussians(g, cam, &cfg);
    let an = backward_gaussians(g, cam, &out, &st, grads).unwrap();
    let analytic = [
        &an.gaussians.positions[..],
        &an.gaussians.quats,
        &an.gaussians.log_scales,
        &an.gaussians.opacity_logits,
        &an.gaussians.sh_base,
        &an.gaussians.sh_rest,
        &an.pose_delta,
    ]
    .concat();
    let x0 = pack(g, cam);
    let (mut gg, mut cc) = (g.clone(), cam.clone());
    let numeric = numeric_grad(&x0, 1e-4, |x| {
        unpack(x, &mut gg, &mut cc);
        loss(&gg, &cc)
    });
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    let i = worst.1;
    assert!(worst.0 < 1e-4, "param {i}: analytic {} numeric {} (rel {})", analytic[i], numeric[i], worst.0);
}

#[test]
fn single_splat_mean_color_gradient() {
    let mut r = rng(17);
    let g = covering_set(&mut r, 1);
    let cam = tilted_camera(16, 16);
    let n = 16 * 16;
    let grads = ImageGrads {
        color: vec![1.0 / (3 * n) as f64; 3 * n],
        ..Default::default()
    };
    check_fd(&g, &cam, &grads);
}

#[test]
fn five_splat_all_outputs_gradient() {
    let mut r = rng(23);
    let g = covering_set(&mut r, 5);
    let cam = tilted_camera(16, 16);
    let n = 16 * 16;
    let mut w = |k: usize| (0..k).map(|_| r.random_range(-1.0..1.0) / n as f64).collect::<Vec<f64>>();
    let grads = ImageGrads {
        color: w(3 * n),
        depth: w(n),
        normal: w(3 * n),
        alpha: w(n),
    };
    check_fd(&g, &cam, &grads);
}

#[test]
fn subgraph_render_ignores_other_traversals() {
    let mut r = rng(1);
    let mut graph = SceneGraph::<f64>::new(ShConfig::default());
    let s = random_set::<f64>(&mut r, 30, false, (0.05, 0.4));
    graph.static_node = s;
    graph.add_appearance(0);
    graph.add_appearance(1);
    let cam = camera::<f64>(32, 24);
    let cfg = RasterConfig::default();
    let a = render(&graph, &ViewRequest::traversal(0, 0.0), &cam, &cfg).unwrap();
    let res = &mut graph.appearance.get_mut(&1).unwrap().residuals;
    res.iter_mut().for_each(|v| *v = 0.7);
    let b = render(&graph, &ViewRequest::traversal(0, 0.0), &cam, &cfg).unwrap();
    assert_eq!(a.output, b.output);
}
