//! Acceptance run: one PASS/FAIL line per criterion and a summary.
//! Failures are reported without a non-zero exit so the rest of the test
//! suite still runs; set `MTGS_ACCEPTANCE_STRICT=1` to fail hard.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::criteria::{self, Outcome};
use mtgs::io::synth::{synth_scene, SynthScene, SynthConfig};
use mtgs::metrics::Aggregate;
use mtgs::train::eval::{evaluate_traversals, evaluate_training_views, EvalOptions};
use mtgs::train::{TrainConfig, Trainer};

const STEPS: usize = 2000;
const SEED: u64 = 0;

struct Run {
    train_psnr: f64,
    held_out: Aggregate,
    report_json: String,
    secs: f64,
}

fn train(scene: &SynthScene, variant: &str, mut cfg: TrainConfig) -> Result<Run, String> {
    let t0 = Instant::now();
    cfg.seed = SEED;
    // the synthetic street has no sky
    cfg.init.sky_count = 0;
    let data = &scene.dataset;
    let mut tr = Trainer::new(data, cfg).map_err(|e| format!("{variant}: {e}"))?;
    while tr.step < tr.config.steps {
        tr.step().map_err(|e| format!("{variant} step {}: {e}", tr.step))?;
    }
    let train = evaluate_training_views(&tr, data).map_err(|e| e.to_string())?;
    let held = evaluate_traversals(&tr.graph, data, &data.held_out_ids(), &EvalOptions::default()).map_err(|e| e.to_string())?;
    let run = Run {
        train_psnr: train.aggregate.psnr,
        held_out: held.aggregate,
        report_json: serde_json::to_string(&held).map_err(|e| e.to_string())?,
        secs: t0.elapsed().as_secs_f64(),
    };
    eprintln!(
        "  [{variant}] {:.0}s, {} Gaussians, train PSNR {:.2}, held-out PSNR {:.2} / affine {:.2} / AbsRel {:.4} / SSIM {:.3}",
        run.secs,
        tr.graph.num_gaussians(),
        run.train_psnr,
        run.held_out.psnr,
        run.held_out.psnr_affine,
        run.held_out.absrel,
        run.held_out.ssim
    );
    Ok(run)
}

fn base() -> TrainConfig {
    TrainConfig::default().scaled_to(STEPS)
}

fn multi_traversal(a: &Run, b: &Run) -> Outcome {
    let (pa, pb) = (a.held_out.psnr_affine, b.held_out.psnr_affine);
    let (ra, rb) = (a.held_out.absrel, b.held_out.absrel);
    let msg = format!(
        "affine PSNR {pa:.2} vs {pb:.2} dB, AbsRel {ra:.4} vs {rb:.4}, train PSNR {:.2}; {:.0}s for both runs",
        a.train_psnr,
        a.secs + b.secs
    );
    if pa - pb >= 1.0 && 2.0 * ra <= rb && a.train_psnr > 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation(full: &Run, name: &str, ab: &Run) -> Result<String, String> {
    let (pf, pa) = (full.held_out.psnr_affine, ab.held_out.psnr_affine);
    let (rf, ra) = (full.held_out.absrel, ab.held_out.absrel);
    let rel = (ra - rf) / rf;
    let msg = format!("{name}: affine PSNR {pa:.2} ({:+.2} dB), AbsRel {ra:.4} ({:+.1}%)", pa - pf, 100.0 * rel);
    if pa <= pf && (pf - pa > 0.2 || rel > 0.1) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    match &outcome {
        Ok(m) => println!("[PASS] {id:>2} {name}: {m}"),
        Err(m) => println!("[FAIL] {id:>2} {name}: {m}"),
    }
    outcome.is_ok()
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn timed(f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let o = guarded(f);
    let s = t0.elapsed().as_secs_f64();
    o.map(|m| format!("{m} ({s:.1}s)")).map_err(|m| format!("{m} ({s:.1}s)"))
}

fn main() {
    let mut results = Vec::new();
    results.push(report(1, "gradient correctness", timed(criteria::gradients)));
    results.push(report(2, "tiled vs naive compositing", timed(criteria::tiled_vs_naive)));
    results.push(report(3, "appearance decomposition", timed(criteria::appearance_decomposition)));
    results.push(report(4, "transmittance identity", timed(criteria::transmittance)));
    results.push(report(5, "loss worked examples", timed(criteria::loss_examples)));
    results.push(report(6, "exposure alignment recovery", timed(criteria::exposure_recovery)));

    eprintln!("training on the synthetic street ({STEPS} steps per run)");
    let scene = synth_scene(&SynthConfig::default()).expect("synthetic scene");
    let runs = guarded(|| {
        let a = train(&scene, "full", base())?;
        let mut c = base();
        c.single_traversal = true;
        c.traversals = vec![0];
        let b = train(&scene, "single traversal", c)?;
        Ok((a, b))
    });
    let (full, single) = match runs {
        Ok(r) => (Some(r.0), Some(r.1)),
        Err(e) => {
            eprintln!("  {e}");
            (None, None)
        }
    };
    let c7 = match (&full, &single) {
        (Some(a), Some(b)) => multi_traversal(a, b),
        _ => Err("training failed".into()),
    };
    results.push(report(7, "multi-traversal benefit", c7));

    let c8 = guarded(|| {
        let a = full.as_ref().ok_or("training failed")?;
        let mut c = base();
        c.no_appearance = true;
        let p = train(&scene, "no appearance node", c)?;
        let mut c = base();
        c.no_transient = true;
        let t = train(&scene, "no transient node", c)?;
        let r = [ablation(a, "appearance node removed", &p), ablation(a, "transient node removed", &t)];
        let text = r.iter().map(|x| x.as_ref().unwrap_or_else(|e| e).clone()).collect::<Vec<_>>().join("; ");
        if r.iter().all(|x| x.is_ok()) {
            Ok(text)
        } else {
            Err(text)
        }
    });
    results.push(report(8, "ablation directions", c8));

    let c9 = guarded(|| {
        let a = full.as_ref().ok_or("training failed")?;
        let again = train(&scene, "full, repeated", base())?;
        if again.report_json == a.report_json && again.train_psnr.to_bits() == a.train_psnr.to_bits() {
            Ok(format!("held-out report identical ({} bytes)", a.report_json.len()))
        } else {
            Err("repeated run produced different metrics".into())
        }
    });
    results.push(report(9, "determinism", c9));

    results.push(report(10, "format round trips", timed(criteria::round_trips)));
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var_os("MTGS_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
