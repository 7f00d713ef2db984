//! Adam with per-group learning-rate schedules.

pub mod density;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroupSchedule {
    pub name: String,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub eps: f64,
}

impl ParamGroupSchedule {
    fn new(name: &str, initial_lr: f64, final_lr: f64, warmup_steps: usize) -> Self {
        ParamGroupSchedule {
            name: name.into(),
            initial_lr,
            final_lr,
            warmup_steps,
            eps: if name == "means" { 1e-15 } else { 1e-8 },
        }
    }

    /// Exponential interpolation from initial to final over `total` steps,
    /// times a linear warmup from zero.
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { (step as f64 / total as f64).clamp(0.0, 1.0) };
        let base = (self.initial_lr.ln() * (1.0 - t) + self.final_lr.ln() * t).exp();
        if self.warmup_steps > 0 && step < self.warmup_steps {
            base * step as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

/// Group names, in a fixed order.
pub const GROUPS: [&str; 12] = [
    "means",
    "static.features_dc",
    "appearance.features_rest",
    "transient.features_dc",
    "transient.feature_rest",
    "opacities",
    "scales",
    "quats",
    "camera_pose_opt",
    "camera_affine",
    "ins_rotation",
    "ins_translation",
];

pub fn default_schedules() -> Vec<ParamGroupSchedule> {
    vec![
        ParamGroupSchedule::new("means", 8e-4, 8e-6, 0),
        ParamGroupSchedule::new("static.features_dc", 1.25e-4, 1.25e-4, 0),
        ParamGroupSchedule::new("appearance.features_rest", 1.25e-4, 1.25e-4, 0),
        ParamGroupSchedule::new("transient.features_dc", 2.5e-3, 2.5e-3, 0),
        ParamGroupSchedule::new("transient.feature_rest", 1.25e-4, 1.25e-4, 0),
        ParamGroupSchedule::new("opacities", 5e-2, 5e-2, 0),
        ParamGroupSchedule::new("scales", 5e-3, 5e-3, 0),
        ParamGroupSchedule::new("quats", 1e-3, 1e-3, 0),
        ParamGroupSchedule::new("camera_pose_opt", 1e-4, 5e-7, 1500),
        ParamGroupSchedule::new("camera_affine", 1e-3, 1e-4, 5000),
        ParamGroupSchedule::new("ins_rotation", 1e-5, 1e-6, 0),
        ParamGroupSchedule::new("ins_translation", 5e-4, 1e-4, 0),
    ]
}

/// Checks that `schedules` covers exactly the known groups with positive rates.
pub fn validate_schedules(schedules: &[ParamGroupSchedule]) -> Result<()> {
    let mut names: Vec<&str> = schedules.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    let mut want = GROUPS.to_vec();
    want.sort_unstable();
    if names != want {
        return Err(Error::Config(format!("schedules must cover exactly {GROUPS:?}")));
    }
    if schedules.iter().any(|s| !(s.initial_lr > 0.0 && s.final_lr > 0.0)) {
        return Err(Error::Config("learning rates must be positive".into()));
    }
    Ok(())
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Reorders rows of width `stride`: `(source, fresh)`; fresh rows start at zero.
    pub fn gather(&mut self, stride: usize, rows: &[(usize, bool)]) {
        let pick = |src: &[f32]| -> Vec<f32> {
            let mut out = Vec::with_capacity(rows.len() * stride);
            for &(r, fresh) in rows {
                if fresh {
                    out.extend(std::iter::repeat_n(0.0, stride));
                } else {
                    out.extend_from_slice(&src[r * stride..(r + 1) * stride]);
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// One Adam update with bias correction. Returns `false` (and leaves
/// everything untouched) if any gradient is non-finite.
pub fn adam_step(params: &mut [f32], grads: &[f32], st: &mut AdamMoments, lr: f64, eps: f64) -> bool {
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    if st.m.len() != params.len() {
        *st = AdamMoments {
            step: st.step,
            ..AdamMoments::zeros(params.len())
        };
    }
    st.step += 1;
    let bc1 = 1.0 - BETA1.powi(st.step as i32);
    let bc2 = 1.0 - BETA2.powi(st.step as i32);
    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
        let mh = st.m[i] as f64 / bc1;
        let vh = st.v[i] as f64 / bc2;
        params[i] -= (lr * mh / (vh.sqrt() + eps)) as f32;
    }
    true
}

/// Identifies one learnable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    StaticPositions,
    StaticQuats,
    StaticScales,
    StaticOpacities,
    StaticDc,
    Appearance(u32),
    TransientPositions(usize),
    TransientQuats(usize),
    TransientScales(usize),
    TransientOpacities(usize),
    TransientDc(usize),
    TransientRest(usize),
    TransientRotations(usize),
    TransientTranslations(usize),
    /// Per training frame.
    PoseDelta(usize),
    Affine(usize),
}

impl Slot {
    pub fn group(&self) -> &'static str {
        match self {
            Slot::StaticPositions | Slot::TransientPositions(_) => "means",
            Slot::StaticQuats | Slot::TransientQuats(_) => "quats",
            Slot::StaticScales | Slot::TransientScales(_) => "scales",
            Slot::StaticOpacities | Slot::TransientOpacities(_) => "opacities",
            Slot::StaticDc => "static.features_dc",
            Slot::Appearance(_) => "appearance.features_rest",
            Slot::TransientDc(_) => "transient.features_dc",
            Slot::TransientRest(_) => "transient.feature_rest",
            Slot::TransientRotations(_) => "ins_rotation",
            Slot::TransientTranslations(_) => "ins_translation",
            Slot::PoseDelta(_) => "camera_pose_opt",
            Slot::Affine(_) => "camera_affine",
        }
    }

    /// Stable text key used in checkpoints.
    pub fn key(&self) -> String {
        match self {
            Slot::StaticPositions => "static.positions".into(),
            Slot::StaticQuats => "static.quats".into(),
            Slot::StaticScales => "static.log_scales".into(),
            Slot::StaticOpacities => "static.opacity_logits".into(),
            Slot::StaticDc => "static.sh_base".into(),
            Slot::Appearance(t) => format!("appearance.{t}.residuals"),
            Slot::TransientPositions(i) => format!("transient.{i}.positions"),
            Slot::TransientQuats(i) => format!("transient.{i}.quats"),
            Slot::TransientScales(i) => format!("transient.{i}.log_scales"),
            Slot::TransientOpacities(i) => format!("transient.{i}.opacity_logits"),
            Slot::TransientDc(i) => format!("transient.{i}.sh_base"),
            Slot::TransientRest(i) => format!("transient.{i}.sh_rest"),
            Slot::TransientRotations(i) => format!("transient.{i}.rotations"),
            Slot::TransientTranslations(i) => format!("transient.{i}.translations"),
            Slot::PoseDelta(i) => format!("camera.{i}.pose_delta"),
            Slot::Affine(i) => format!("camera.{i}.affine"),
        }
    }

    pub fn from_key(k: &str) -> Option<Slot> {
        let parts: Vec<&str> = k.split('.').collect();
        Some(match parts.as_slice() {
            ["static", "positions"] => Slot::StaticPositions,
            ["static", "quats"] => Slot::StaticQuats,
            ["static", "log_scales"] => Slot::StaticScales,
            ["static", "opacity_logits"] => Slot::StaticOpacities,
            ["static", "sh_base"] => Slot::StaticDc,
            ["appearance", t, "residuals"] => Slot::Appearance(t.parse().ok()?),
            ["transient", i, f] => {
                let i = i.parse().ok()?;
                match *f {
                    "positions" => Slot::TransientPositions(i),
                    "quats" => Slot::TransientQuats(i),
                    "log_scales" => Slot::TransientScales(i),
                    "opacity_logits" => Slot::TransientOpacities(i),
                    "sh_base" => Slot::TransientDc(i),
                    "sh_rest" => Slot::TransientRest(i),
                    "rotations" => Slot::TransientRotations(i),
                    "translations" => Slot::TransientTranslations(i),
                    _ => return None,
                }
            }
            ["camera", i, "pose_delta"] => Slot::PoseDelta(i.parse().ok()?),
            ["camera", i, "affine"] => Slot::Affine(i.parse().ok()?),
            _ => return None,
        })
    }
}

/// Adam state for every tensor plus the schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub schedules: BTreeMap<String, ParamGroupSchedule>,
    pub moments: BTreeMap<Slot, AdamMoments>,
    pub total_steps: usize,
    /// Per-group count of skipped (non-finite) updates.
    pub skipped: BTreeMap<String, u64>,
}

impl Optimizer {
    pub fn new(schedules: Vec<ParamGroupSchedule>, total_steps: usize) -> Result<Self> {
        validate_schedules(&schedules)?;
        Ok(Optimizer {
            schedules: schedules.into_iter().map(|s| (s.name.clone(), s)).collect(),
            moments: BTreeMap::new(),
            total_steps,
            skipped: BTreeMap::new(),
        })
    }

    pub fn lr(&self, slot: Slot, step: usize) -> f64 {
        self.schedules[slot.group()].lr(step, self.total_steps)
    }

    /// Updates one tensor in place.
    pub fn update(&mut self, slot: Slot, step: usize, params: &mut [f32], grads: &[f32]) {
        let sched = &self.schedules[slot.group()];
        let lr = sched.lr(step, self.total_steps);
        let eps = sched.eps;
        let st = self.moments.entry(slot).or_insert_with(|| AdamMoments::zeros(params.len()));
        if !adam_step(params, grads, st, lr, eps) {
            *self.skipped.entry(slot.group().to_string()).or_default() += 1;
            log::warn!("non-finite gradient in {}; update skipped", slot.key());
        }
    }

    pub fn moments_mut(&mut self, slot: Slot) -> Option<&mut AdamMoments> {
        self.moments.get_mut(&slot)
    }
}
