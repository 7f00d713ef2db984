//! Property checks shared by the integration tests and the acceptance
//! target. Each returns a one-line summary on success and the first
//! violation on failure.

use mtgs::appearance::{align_image, project_points};
use mtgs::gaussian::GaussianSet;
use mtgs::init::PointCloud;
use mtgs::io::checkpoint::encode_checkpoint;
use mtgs::io::synth::{synth_scene, write_synth, SynthConfig};
use mtgs::io::{load_checkpoint, load_scene, save_checkpoint, save_scene, SceneManifest};
use mtgs::losses::*;
use mtgs::raster::{render, render_gaussians, render_gaussians_naive, RasterConfig};
use mtgs::real::logit;
use mtgs::scene::{SceneGraph, TransientNode, ViewRequest};
use mtgs::sh::{ShConfig, SH_C0};
use mtgs::train::{TrainConfig, Trainer};
use nalgebra::Vector3;
use rand::Rng;

use super::{camera, fd, random_set, rng};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Analytic vs central-difference gradients of the full two-view loss.
pub fn gradients() -> Outcome {
    let mut f = fd::fixture(&mut rng(5));
    let results = fd::check(&mut f, 1e-4);
    let (checked, skipped) = results.iter().fold((0, 0), |a, g| (a.0 + g.checked, a.1 + g.skipped));
    ensure(skipped * 20 < checked, || format!("{skipped} of {} coordinates straddle a kink", checked + skipped))?;
    let mut worst = (String::new(), 0.0f64);
    for g in &results {
        ensure(g.checked > 0, || format!("{}: no coordinate checked", g.name))?;
        if g.worst > worst.1 {
            worst = (g.name.clone(), g.worst);
        }
    }
    ensure(worst.1 < 1e-4, || format!("{}: max relative error {:.2e}", worst.0, worst.1))?;
    Ok(format!(
        "{} groups, {checked} coordinates (+{skipped} at L1 kinks), max rel err {:.2e} ({})",
        results.len(),
        worst.1,
        worst.0
    ))
}

/// Tiled rasterizer vs the per-pixel full-sort reference.
pub fn tiled_vs_naive() -> Outcome {
    let mut r = rng(11);
    let cfg = RasterConfig::default();
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let n = r.random_range(1..=200);
        let g: GaussianSet<f32> = random_set(&mut r, n, true, (0.02, 0.6));
        let cam = camera::<f32>(64, 48);
        let (a, _) = render_gaussians(&g, &cam, &cfg);
        let b = render_gaussians_naive(&g, &cam, &cfg);
        for (x, y) in a.color.iter().zip(&b.color).chain(a.alpha.iter().zip(&b.alpha)) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst < 1e-6, || format!("max channel difference {worst:e}"))?;
    Ok(format!("50 scenes, max channel difference {worst:e}"))
}

fn static_graph(seed: u64) -> SceneGraph<f32> {
    let mut r = rng(seed);
    let mut g = SceneGraph::new(ShConfig::default());
    g.static_node = random_set(&mut r, 60, false, (0.05, 0.5));
    for t in [0, 1] {
        g.add_appearance(t);
    }
    g
}

fn render_static(g: &SceneGraph<f32>, t: u32) -> Vec<f32> {
    let cam = camera::<f32>(48, 36);
    render(g, &ViewRequest::traversal(t, 0.0), &cam, &RasterConfig::default()).unwrap().output.color
}

/// Shared residuals render identically; zeroing one node only changes its traversal.
pub fn appearance_decomposition() -> Outcome {
    let mut g = static_graph(4);
    let mut r = rng(9);
    let shared: Vec<f32> = (0..g.appearance[&0].residuals.len()).map(|_| r.random_range(-0.3..0.3)).collect();
    for a in g.appearance.values_mut() {
        a.residuals.clone_from(&shared);
    }
    let (a0, a1) = (render_static(&g, 0), render_static(&g, 1));
    ensure(a0 == a1, || "equal residuals rendered differently".into())?;
    g.appearance.get_mut(&1).unwrap().residuals.iter_mut().for_each(|v| *v = 0.0);
    let (b0, b1) = (render_static(&g, 0), render_static(&g, 1));
    ensure(b0 == a0, || "zeroing traversal 1 changed traversal 0".into())?;
    ensure(b1 != a1, || "zeroing traversal 1 did not change its render".into())?;
    Ok("equal residuals bit-identical; zeroing is local to its traversal".into())
}

/// `Σ α_i T_i + T_final = 1` per pixel.
pub fn transmittance() -> Outcome {
    let mut r = rng(3);
    let cfg = RasterConfig::default();
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let n = r.random_range(1..200);
        let mut g: GaussianSet<f32> = random_set(&mut r, n, false, (0.05, 0.8));
        // white everywhere, so the color channel accumulates Σ α_i T_i
        g.sh_base.iter_mut().for_each(|v| *v = (0.5 / SH_C0) as f32);
        let cam = camera::<f32>(40, 32);
        let (out, _) = render_gaussians(&g, &cam, &cfg);
        for p in 0..out.num_pixels() {
            worst = worst.max((out.color[3 * p] + (1.0 - out.alpha[p]) - 1.0).abs());
        }
    }
    ensure(worst < 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("20 scenes, max deviation {worst:e}"))
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= 1e-6, || format!("{name}: got {got}, want {want}"))
}

/// Every worked example of the loss terms.
pub fn loss_examples() -> Outcome {
    let (w, h) = (16, 16);
    let mut r = rng(2);
    let img: Vec<f64> = (0..3 * w * h).map(|_| r.random_range(0.0..1.0)).collect();

    let (t, _, _) = photometric(&img, &img, w, h, None, 0.8);
    close("photometric identical", t.value, 0.0)?;
    let mut other = img.clone();
    let mut mask = vec![true; w * h];
    for p in [5, 77, 200] {
        other[3 * p] += 0.3;
    }
    // masking a pixel also removes it from every SSIM window sum
    for p in 0..w * h {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        if [5usize, 77, 200].iter().any(|&q| ((q % w) as i64 - x).abs() <= 5 && ((q / w) as i64 - y).abs() <= 5) {
            mask[p] = false;
        }
    }
    let (t, _, _) = photometric(&other, &img, w, h, Some(&mask), 0.8);
    close("photometric masked", t.value, 0.0)?;

    let s = |p, d| DepthSample { pixel: p, depth: d };
    let ones = vec![1.0f64; 4];
    close("depth exact", depth_inv_l1(&[3.0, 4.0, 5.0, 6.0], &ones, &[s(0, 3.0), s(1, 4.0), s(3, 6.0)], 1e-4).value, 0.0)?;
    close("depth 2 vs 1", depth_inv_l1(&[2.0f64], &[1.0], &[s(0, 1.0)], 1e-4).value, 0.5)?;
    close("depth 10 vs 10.1", depth_inv_l1(&[10.0f64], &[1.0], &[s(0, 10.1)], 1e-4).value, (0.1 - 1.0 / 10.1f64).abs())?;

    let ncc = NccConfig { patch: 8, stride: 4, ..NccConfig::default() };
    let pred: Vec<f64> = (0..w * h).map(|_| r.random_range(2.0..9.0)).collect();
    let scaled: Vec<f64> = pred.iter().map(|d| 2.5 * d + 1.0).collect();
    close("ncc affine", ncc_loss(&pred, &scaled, w, h, None, &ncc).value, 0.0)?;
    let flipped: Vec<f64> = pred.iter().map(|d| 20.0 - d).collect();
    close("ncc anti-correlated", ncc_loss(&pred, &flipped, w, h, None, &ncc).value, 2.0)?;

    let k = camera::<f64>(w, h).intrinsics;
    let mut plane = vec![5.0f64; w * h];
    let (n, valid) = pseudo_normal_from_depth(&plane, w, h, &k);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = y * w + x;
            ensure(valid[p], || format!("plane pixel {p} invalid"))?;
            close("plane normal", (n[3 * p] - 0.0).abs() + (n[3 * p + 1] - 0.0).abs() + (n[3 * p + 2] + 1.0).abs(), 0.0)?;
        }
    }
    plane[5 * w + 5] = 0.0;
    let (_, valid) = pseudo_normal_from_depth(&plane, w, h, &k);
    ensure(!valid[5 * w + 6] && !valid[4 * w + 5], || "neighbor of invalid depth stayed valid".into())?;

    let all = vec![true; w * h];
    let nconst: Vec<f64> = (0..w * h).flat_map(|_| [0.1, -0.2, -0.97]).collect();
    close("normal equal", normal_loss(&nconst, &nconst, &all, w, h).value, 0.0)?;
    let shifted: Vec<f64> = nconst.iter().map(|v| v + 0.05).collect();
    close("normal offset", normal_loss(&nconst, &shifted, &all, w, h).value, 0.15)?;

    close("flatten isotropic", flatten_value([1.0, 1.0, 1.0], 10.0), 1.0)?;
    close("flatten elongated", flatten_value([100.0, 1.0, 0.01], 10.0), 90.01)?;
    close("flatten capped", flatten_value([5.0, 1.0, 0.2], 10.0), 0.2)?;

    let mut graph: SceneGraph<f64> = SceneGraph::new(ShConfig::default());
    graph.add_appearance(0);
    let mut tg = GaussianSet::empty(ShConfig::default(), true);
    let rest = vec![0.0; tg.sh.rest_stride()];
    for (x, a) in [(0.0, 0.5), (0.1, 0.9)] {
        tg.push([x, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [-2.0; 3], logit(a), [0.0; 3], Some(&rest));
    }
    graph.transients.push(TransientNode {
        traversal: 0,
        node_id: 0,
        gaussians: tg,
        size: Vector3::new(2.0, 2.0, 2.0),
        pose_track: mtgs::scene::PoseTrack::new(vec![0.0], vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 3]).unwrap(),
        tolerance: 0.5,
        is_static_object: false,
    });
    close("oob in box", oob_loss(&graph, None), 0.0)?;
    let l = |a: f64| (a / (1.0 - a)).ln();
    close("oob one", oob_term([l(0.5)].into_iter()).0, 0.5f64.ln().abs())?;
    close("oob two", oob_term([l(0.5), l(0.9)].into_iter()).0, (0.5f64.ln().abs() + 0.1f64.ln().abs()) / 2.0)?;

    let wts = LossWeights::default();
    close("total zero", LossBreakdown::default().combine(&wts).unwrap(), 0.0)?;
    let mut b = LossBreakdown { l1: 1.0, ..Default::default() };
    close("total l1 only", b.combine(&wts).unwrap(), 0.8)?;
    Ok("photometric, depth, ncc, pseudo-normal, normal, flatten, oob and total examples".into())
}

/// Undo a `0.5·c + 0.05` exposure corruption from LiDAR colors.
pub fn exposure_recovery() -> Outcome {
    let (w, h) = (64, 48);
    let cam = camera::<f64>(w, h);
    let clean: Vec<f64> = (0..w * h)
        .flat_map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            [0.5 + 0.4 * (0.3 * x).sin(), 0.5 + 0.4 * (0.2 * y + 1.0).cos(), 0.5 + 0.3 * (0.1 * (x + y)).sin()]
        })
        .collect();
    let mut r = rng(8);
    let mut cloud = PointCloud {
        traversal: 0,
        timestamp: 0.0,
        points: (0..400)
            .map(|_| {
                let z = r.random_range(3.0..20.0);
                [r.random_range(-0.45..0.45) * z, r.random_range(-0.35..0.35) * z, z, 0.0, 0.0, 0.0].map(|v| v as f32)
            })
            .collect(),
    };
    // colors are what a perfectly exposed camera sees at each projection
    let probe = project_points(&cloud, &cam);
    ensure(probe.len() > 100, || format!("only {} points project", probe.len()))?;
    let mut kept = Vec::new();
    for p in &probe {
        let c = mtgs::appearance::sample_bilinear(&clean, w, h, p.u, p.v);
        // the test camera sits at the world origin
        let x = (p.u - cam.intrinsics.cx) / cam.intrinsics.fx * p.depth;
        let y = (p.v - cam.intrinsics.cy) / cam.intrinsics.fy * p.depth;
        kept.push([x, y, p.depth, c[0], c[1], c[2]].map(|v| v as f32));
    }
    cloud.points = kept;
    let samples = project_points(&cloud, &cam);
    let corrupted: Vec<f64> = clean.iter().map(|c| 0.5 * c + 0.05).collect();
    let sol = align_image(&corrupted, w, h, &samples);
    ensure(!sol.flagged, || "alignment flagged".into())?;
    let fixed = sol.correct(&corrupted);
    let worst = fixed.iter().zip(&clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-3, || format!("max pixel error after correction {worst:e}"))?;
    Ok(format!("gain {:.4}, bias {:.4}, max pixel error {worst:.1e}", sol.gain[0][0], sol.bias[0]))
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        width: 64,
        height: 48,
        focal: 44.0,
        frames_per_traversal: 3,
        ..SynthConfig::default()
    }
}

/// Checkpoint and manifest round trips, plus LiDAR/depth agreement in the
/// synthetic scene.
pub fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = synth_scene(&small_synth()).map_err(|e| e.to_string())?;

    let manifest = save_scene(dir.path(), &scene.dataset).map_err(|e| e.to_string())?;
    let loaded = load_scene(&manifest).map_err(|e| e.to_string())?;
    ensure(loaded == scene.dataset, || "scene differs after save/load".into())?;
    let m = SceneManifest::read(&manifest).map_err(|e| e.to_string())?;
    let m2_path = dir.path().join("manifest2.json");
    m.write(&m2_path).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&manifest).unwrap() == std::fs::read(&m2_path).unwrap(), || "manifest bytes differ".into())?;

    let mut cfg = TrainConfig::default().scaled_to(20);
    cfg.init.sky_count = 0;
    let mut tr = Trainer::new(&loaded, cfg).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        tr.step().map_err(|e| e.to_string())?;
    }
    let ck = tr.checkpoint().map_err(|e| e.to_string())?;
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &ck).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(back == ck, || "checkpoint differs after save/load".into())?;
    ensure(encode_checkpoint(&back).unwrap() == std::fs::read(&path).unwrap(), || "checkpoint bytes differ".into())?;

    write_synth(&dir.path().join("synth"), &scene).map_err(|e| e.to_string())?;
    let worst = lidar_depth_gap(&scene.dataset);
    ensure(worst < 1e-4, || format!("LiDAR vs depth map gap {worst:e}"))?;
    Ok(format!("checkpoint ({} Gaussians) and manifest bit-exact; LiDAR vs depth gap {worst:.1e}", ck.graph.num_gaussians()))
}

/// Largest difference between a LiDAR return and the depth map at its pixel.
pub fn lidar_depth_gap(d: &mtgs::io::TraversalDataset) -> f64 {
    let mut worst = 0.0f64;
    for f in d.frames() {
        for s in d.lidar_samples(f) {
            worst = worst.max((s.depth - f.pseudo_depth[s.pixel] as f64).abs());
        }
    }
    worst
}
