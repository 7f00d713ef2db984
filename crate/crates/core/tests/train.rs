use mtgs::io::synth::{synth_scene, SynthConfig};
use mtgs::io::TraversalDataset;
use mtgs::train::eval::{evaluate_traversals, EvalOptions};
use mtgs::train::{TrainConfig, Trainer};

fn data() -> TraversalDataset {
    let cfg = SynthConfig {
        width: 48,
        height: 36,
        focal: 33.0,
        frames_per_traversal: 3,
        ..SynthConfig::default()
    };
    synth_scene(&cfg).unwrap().dataset
}

fn config(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::default().scaled_to(steps);
    c.init.sky_count = 0;
    c
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data();
    let mut full = Trainer::new(&d, config(40)).unwrap();
    for _ in 0..40 {
        full.step().unwrap();
    }
    let mut first = Trainer::new(&d, config(40)).unwrap();
    for _ in 0..17 {
        first.step().unwrap();
    }
    let mut resumed = Trainer::resume(&d, first.checkpoint().unwrap()).unwrap();
    while resumed.step < 40 {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.checkpoint().unwrap(), full.checkpoint().unwrap());
}

#[test]
fn training_reduces_photometric_error() {
    let d = data();
    let mut c = TrainConfig { steps: 150, ..TrainConfig::default() };
    c.init.sky_count = 0;
    let mut t = Trainer::new(&d, c).unwrap();
    let l1 = |t: &mut Trainer| -> f64 { (0..10).map(|_| t.step().unwrap().loss.l1).sum() };
    let first = l1(&mut t);
    while t.step < 140 {
        t.step().unwrap();
    }
    let last = l1(&mut t);
    assert!(last < 0.7 * first, "L1 {first} -> {last}");
}

#[test]
fn ablation_layouts() {
    let d = data();
    let mut c = config(1);
    c.single_traversal = true;
    c.traversals = vec![0];
    let t = Trainer::new(&d, c).unwrap();
    assert_eq!(t.graph.appearance.len(), 1);
    assert!(t.graph.transients.is_empty());
    // held-out traversals fall back to the nearest trained appearance node
    let r = evaluate_traversals(&t.graph, &d, &d.held_out_ids(), &EvalOptions::default()).unwrap();
    assert_eq!(r.frames.len(), 3);

    let mut c = config(1);
    c.no_appearance = true;
    let t = Trainer::new(&d, c).unwrap();
    assert_eq!(t.graph.appearance.len(), 1);
    assert!(!t.graph.transients.is_empty());

    let mut c = config(1);
    c.no_transient = true;
    let t = Trainer::new(&d, c).unwrap();
    assert_eq!(t.graph.appearance.len(), 3);
    assert!(t.graph.transients.is_empty());
}
