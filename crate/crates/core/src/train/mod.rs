//! The training loop: frame sampling, loss and gradients, per-group Adam,
//! density control, logging, and checkpoints.

pub mod eval;
pub mod objective;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::exposure_align;
use crate::camera::{CameraFrame, ColorAffine};
use crate::init::{appearance_id, initialize, GraphLayout, InitConfig};
use crate::io::checkpoint::{save_checkpoint, CameraState, Checkpoint};
use crate::io::formats::write_atomic;
use crate::io::TraversalDataset;
use crate::losses::{FlattenConfig, LossBreakdown, LossWeights, NccConfig};
use crate::optim::density::{density_control, reset_opacity, DensityConfig, DensityReport, DensityStats};
use crate::optim::{default_schedules, validate_schedules, Optimizer, ParamGroupSchedule, Slot};
use crate::raster::RasterConfig;
use crate::scene::{SceneGraph, ViewRequest};
use crate::sh::ShConfig;
use crate::{Error, Result};

pub use objective::{view_objective, FrameTargets, Objective, ObjectiveConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub sh_degree: usize,
    pub weights: LossWeights,
    pub ncc: NccConfig,
    pub flatten: FlattenConfig,
    pub density: DensityConfig,
    pub raster: RasterConfig,
    pub init: InitConfig,
    pub schedules: Vec<ParamGroupSchedule>,
    /// Learn a per-frame rigid pose correction.
    pub pose_opt: bool,
    /// Learn a per-frame color affine.
    pub affine_opt: bool,
    /// Align training images to the LiDAR colors before training.
    pub exposure_align: bool,
    /// One appearance node shared by all traversals, no transient nodes.
    pub single_traversal: bool,
    /// Transient boxes are treated as background.
    pub no_transient: bool,
    /// One appearance node shared by all traversals (transients kept).
    pub no_appearance: bool,
    /// Training traversals; empty means every non-held-out traversal.
    pub traversals: Vec<u32>,
    /// Loss rows are recorded every this many steps (0 disables).
    pub log_interval: usize,
    /// Periodic checkpoints every this many steps (0 disables).
    pub checkpoint_interval: usize,
    pub depth_alpha_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            seed: 0,
            sh_degree: 3,
            weights: LossWeights::default(),
            ncc: NccConfig::default(),
            flatten: FlattenConfig::default(),
            density: DensityConfig::default(),
            raster: RasterConfig::default(),
            init: InitConfig::default(),
            schedules: default_schedules(),
            pose_opt: true,
            affine_opt: true,
            exposure_align: false,
            single_traversal: false,
            no_transient: false,
            no_appearance: false,
            traversals: Vec::new(),
            log_interval: 1,
            checkpoint_interval: 0,
            depth_alpha_eps: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ShConfig::new(self.sh_degree)?;
        self.weights.validate()?;
        self.ncc.validate()?;
        self.density.validate()?;
        validate_schedules(&self.schedules)?;
        if self.flatten.ratio <= 0.0 {
            return Err(Error::Config("flatten ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> GraphLayout {
        GraphLayout {
            merged_appearance: self.single_traversal || self.no_appearance,
            transients: !(self.single_traversal || self.no_transient),
        }
    }

    /// Scales every warmup and the density-control schedule to a run of
    /// `steps` instead of the 30k-step reference run.
    pub fn scaled_to(mut self, steps: usize) -> Self {
        let f = steps as f64 / 30_000.0;
        let scale = |v: usize| ((v as f64 * f).round() as usize).max(1);
        for s in &mut self.schedules {
            if s.warmup_steps > 0 {
                s.warmup_steps = scale(s.warmup_steps);
            }
        }
        let d = &mut self.density;
        d.start = scale(d.start);
        d.stop = scale(d.stop);
        d.interval = scale(d.interval);
        d.reset_interval = scale(d.reset_interval);
        self.steps = steps;
        self
    }
}

/// One supervised view.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub camera: CameraFrame<f32>,
    pub targets: FrameTargets<f32>,
    pub appearance: u32,
    pub transients: Option<u32>,
}

impl TrainFrame {
    pub fn request(&self) -> ViewRequest {
        ViewRequest {
            appearance: self.appearance,
            transients: self.transients,
            time: self.camera.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub frame: usize,
    pub gaussians: usize,
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub graph: SceneGraph<f32>,
    pub frames: Vec<TrainFrame>,
    pub optimizer: Optimizer,
    pub stats: DensityStats,
    pub step: usize,
    pub history: Vec<StepLog>,
    pub density_log: Vec<(usize, DensityReport)>,
    sampler: ChaCha8Rng,
    density_rng: ChaCha8Rng,
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_DENSITY: u64 = 3;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Resolves the training traversal list against the dataset.
pub fn training_traversals(data: &TraversalDataset, cfg: &TrainConfig) -> Result<Vec<u32>> {
    if cfg.traversals.is_empty() {
        let ids = data.training_ids();
        if ids.is_empty() {
            return Err(Error::Config("dataset has no training traversals".into()));
        }
        return Ok(ids);
    }
    for t in &cfg.traversals {
        if data.traversal(*t).is_none() {
            return Err(Error::Config(format!("unknown traversal {t}")));
        }
    }
    let mut ids = cfg.traversals.clone();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn build_frames(data: &TraversalDataset, cfg: &TrainConfig, ids: &[u32]) -> Vec<TrainFrame> {
    let layout = cfg.layout();
    let mut frames = Vec::new();
    for &t in ids {
        let trav = data.traversal(t).expect("checked traversal");
        for f in &trav.frames {
            let mut camera = f.camera.cast::<f32>();
            camera.use_pose_delta = cfg.pose_opt;
            let mut image = f.image.clone();
            if cfg.exposure_align {
                let sol = exposure_align(&[(&image[..], &camera)], &data.clouds[f.cloud]);
                image = sol.into_iter().next().expect("one frame in, one out").1;
            }
            let targets = FrameTargets::new(image, f.pseudo_depth.clone(), data.lidar_samples(f), &camera);
            frames.push(TrainFrame {
                camera,
                targets,
                appearance: appearance_id(&layout, ids, t),
                transients: layout.transients.then_some(t),
            });
        }
    }
    frames
}

fn set_trajectories(graph: &mut SceneGraph<f32>, data: &TraversalDataset, cfg: &TrainConfig, ids: &[u32]) {
    let layout = cfg.layout();
    let mut paths: BTreeMap<u32, Vec<[f64; 3]>> = BTreeMap::new();
    for &t in ids {
        paths.entry(appearance_id(&layout, ids, t)).or_default().extend(data.trajectory(t));
    }
    graph.trajectories = paths;
}

impl Trainer {
    /// Initializes the graph from the dataset's LiDAR and boxes.
    pub fn new(data: &TraversalDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ids = training_traversals(data, &config)?;
        let sh = ShConfig::new(config.sh_degree)?;
        let mut rng = stream(config.seed, STREAM_INIT);
        let mut graph = initialize::<f32>(&data.clouds, &data.boxes, &ids, sh, &config.layout(), &config.init, &mut rng)?;
        set_trajectories(&mut graph, data, &config, &ids);
        let frames = build_frames(data, &config, &ids);
        let optimizer = Optimizer::new(config.schedules.clone(), config.steps)?;
        Ok(Trainer {
            stats: DensityStats::new(&graph),
            sampler: stream(config.seed, STREAM_SAMPLER),
            density_rng: stream(config.seed, STREAM_DENSITY),
            config,
            graph,
            frames,
            optimizer,
            step: 0,
            history: Vec::new(),
            density_log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(data: &TraversalDataset, ck: Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.extra["config"].clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let ids = training_traversals(data, &config)?;
        let mut frames = build_frames(data, &config, &ids);
        if ck.cameras.len() != frames.len() {
            return Err(Error::Config("checkpoint cameras do not match the dataset".into()));
        }
        for (f, c) in frames.iter_mut().zip(&ck.cameras) {
            if f.camera.frame_id != c.frame_id {
                return Err(Error::Config(format!("checkpoint camera {} does not match frame {}", c.frame_id, f.camera.frame_id)));
            }
            f.camera.pose_delta = c.pose_delta;
            f.camera.affine = ColorAffine::from_params(&c.affine);
        }
        let word = |k: &str| -> Result<u128> {
            ck.extra[k]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")))
        };
        let mut sampler = stream(config.seed, STREAM_SAMPLER);
        sampler.set_word_pos(word("sampler_word_pos")?);
        let mut density_rng = stream(config.seed, STREAM_DENSITY);
        density_rng.set_word_pos(word("density_word_pos")?);
        let optimizer = match ck.optimizer {
            Some(o) => o,
            None => Optimizer::new(config.schedules.clone(), config.steps)?,
        };
        // Statistics since the last densification are not persisted.
        Ok(Trainer {
            stats: DensityStats::new(&ck.graph),
            graph: ck.graph,
            frames,
            optimizer,
            step: ck.step,
            history: Vec::new(),
            density_log: Vec::new(),
            sampler,
            density_rng,
            config,
        })
    }

    fn objective_config(&self) -> ObjectiveConfig {
        let c = &self.config;
        ObjectiveConfig {
            weights: c.weights,
            ncc: c.ncc,
            flatten_ratio: c.flatten.ratio,
            flatten: c.flatten.period > 0 && self.step.is_multiple_of(c.flatten.period),
            raster: c.raster,
            depth_alpha_eps: c.depth_alpha_eps,
        }
    }

    /// One optimization step on a uniformly sampled frame.
    pub fn step(&mut self) -> Result<StepLog> {
        let fi = self.sampler.random_range(0..self.frames.len());
        let frame = &self.frames[fi];
        let req = frame.request();
        let obj = view_objective(&self.graph, &req, &frame.camera, &frame.targets, &self.objective_config())?;
        let loss = obj.loss;
        self.stats.accumulate(&obj.view, &obj.raster);
        self.apply(fi, &req, obj);

        self.step += 1;
        let d = self.config.density;
        if d.densify_at(self.step) {
            let r = density_control(&mut self.graph, &mut self.optimizer, &mut self.stats, &d, &mut self.density_rng)?;
            log::debug!("step {}: density {:?}", self.step, r);
            self.density_log.push((self.step, r));
        }
        if d.reset_at(self.step) {
            reset_opacity(&mut self.graph, &mut self.optimizer, d.reset_opacity);
        }
        Ok(StepLog {
            step: self.step,
            frame: self.frames[fi].camera.frame_id,
            gaussians: self.graph.num_gaussians(),
            loss,
        })
    }

    /// Adam on the static node, the rendered appearance node, the rendered
    /// traversal's transients, and the frame's camera corrections.
    fn apply(&mut self, fi: usize, req: &ViewRequest, obj: Objective<f32>) {
        let s = self.step;
        let opt = &mut self.optimizer;
        let (g, gr) = (&mut self.graph, obj.grads);
        let st = &mut g.static_node;
        opt.update(Slot::StaticPositions, s, &mut st.positions, &gr.static_node.positions);
        opt.update(Slot::StaticQuats, s, &mut st.quats, &gr.static_node.quats);
        opt.update(Slot::StaticScales, s, &mut st.log_scales, &gr.static_node.log_scales);
        opt.update(Slot::StaticOpacities, s, &mut st.opacity_logits, &gr.static_node.opacity_logits);
        opt.update(Slot::StaticDc, s, &mut st.sh_base, &gr.static_node.sh_base);
        if let (Some(node), Some(grad)) = (g.appearance.get_mut(&req.appearance), gr.appearance.get(&req.appearance)) {
            opt.update(Slot::Appearance(req.appearance), s, &mut node.residuals, grad);
        }
        if let Some(trav) = req.transients {
            for (k, (node, tg)) in g.transients.iter_mut().zip(&gr.transients).enumerate() {
                if node.traversal != trav {
                    continue;
                }
                let n = &mut node.gaussians;
                opt.update(Slot::TransientPositions(k), s, &mut n.positions, &tg.gaussians.positions);
                opt.update(Slot::TransientQuats(k), s, &mut n.quats, &tg.gaussians.quats);
                opt.update(Slot::TransientScales(k), s, &mut n.log_scales, &tg.gaussians.log_scales);
                opt.update(Slot::TransientOpacities(k), s, &mut n.opacity_logits, &tg.gaussians.opacity_logits);
                opt.update(Slot::TransientDc(k), s, &mut n.sh_base, &tg.gaussians.sh_base);
                opt.update(Slot::TransientRest(k), s, &mut n.sh_rest, &tg.gaussians.sh_rest);
                opt.update(Slot::TransientRotations(k), s, &mut node.pose_track.rotations, &tg.rotations);
                opt.update(Slot::TransientTranslations(k), s, &mut node.pose_track.translations, &tg.translations);
            }
        }
        let cam = &mut self.frames[fi].camera;
        if self.config.pose_opt {
            opt.update(Slot::PoseDelta(fi), s, &mut cam.pose_delta, &obj.pose_delta);
        }
        if self.config.affine_opt {
            let mut p = cam.affine.to_params();
            opt.update(Slot::Affine(fi), s, &mut p, &obj.affine);
            cam.affine = ColorAffine::from_params(&p);
        }
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            graph: self.graph.clone(),
            optimizer: Some(self.optimizer.clone()),
            cameras: self
                .frames
                .iter()
                .map(|f| CameraState {
                    frame_id: f.camera.frame_id,
                    pose_delta: f.camera.pose_delta,
                    affine: f.camera.affine.to_params(),
                })
                .collect(),
            step: self.step,
            extra: serde_json::json!({
                "config": serde_json::to_value(&self.config)?,
                "sampler_word_pos": self.sampler.get_word_pos().to_string(),
                "density_word_pos": self.density_rng.get_word_pos().to_string(),
            }),
        })
    }

    /// Runs until `config.steps`. With an output directory, writes
    /// `train_log.csv`, periodic checkpoints, and `final.ckpt`; a non-finite
    /// loss aborts after saving the last good state as `last_good.ckpt`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        let ckpt = |name: &str| out.map(|d| d.join(name));
        while self.step < self.config.steps {
            let log = match self.step_logged() {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(p) = ckpt("last_good.ckpt") {
                        save_checkpoint(&p, &self.checkpoint()?)?;
                        log::error!("non-finite loss at step {}; saved {}", self.step, p.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if self.config.log_interval > 0 && log.step % self.config.log_interval == 0 {
                log::info!(
                    "step {:6}  loss {:.5}  gaussians {}",
                    log.step,
                    log.loss.total,
                    log.gaussians
                );
            }
            let ci = self.config.checkpoint_interval;
            if let Some(p) = ckpt(&format!("step_{:06}.ckpt", log.step)).filter(|_| ci > 0 && log.step % ci == 0) {
                save_checkpoint(&p, &self.checkpoint()?)?;
            }
        }
        if let Some(dir) = out {
            write_atomic(&dir.join("train_log.csv"), self.log_csv().as_bytes())?;
            save_checkpoint(&dir.join("final.ckpt"), &self.checkpoint()?)?;
        }
        Ok(())
    }

    /// [`Trainer::step`] with the loss recorded in the history.
    pub fn step_logged(&mut self) -> Result<StepLog> {
        let log = self.step()?;
        if self.config.log_interval > 0 && log.step % self.config.log_interval == 0 {
            self.history.push(log.clone());
        }
        Ok(log)
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("step,frame,gaussians,{}\n", LossBreakdown::CSV_HEADER);
        for l in &self.history {
            let _ = writeln!(s, "{},{},{},{}", l.step, l.frame, l.gaussians, l.loss.csv_row());
        }
        s
    }
}
