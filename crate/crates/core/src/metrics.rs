//! Masked evaluation metrics and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::losses::ssim::ssim_value;
use crate::losses::DepthSample;

/// Score reported for a perfect match.
pub const PSNR_CAP: f64 = 100.0;
/// Depth metrics ignore ground truth beyond this range, meters.
pub const MAX_EVAL_DEPTH: f64 = 80.0;
pub const DELTA_THRESHOLD: f64 = 1.25;

fn masked_pixels(n: usize, mask: Option<&[bool]>) -> Vec<usize> {
    (0..n).filter(|&p| mask.is_none_or(|m| m[p])).collect()
}

fn mse_to_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` over masked pixels; `None` for an empty mask.
pub fn psnr(render: &[f32], gt: &[f32], mask: Option<&[bool]>) -> Option<f64> {
    let px = masked_pixels(render.len() / 3, mask);
    if px.is_empty() {
        return None;
    }
    let mut se = 0.0;
    for &p in &px {
        for c in 0..3 {
            let d = render[3 * p + c] as f64 - gt[3 * p + c] as f64;
            se += d * d;
        }
    }
    Some(mse_to_psnr(se / (3 * px.len()) as f64))
}

/// PSNR after fitting `a·render + b` to `gt` per channel by least squares.
pub fn psnr_affine(render: &[f32], gt: &[f32], mask: Option<&[bool]>) -> Option<f64> {
    let px = masked_pixels(render.len() / 3, mask);
    if px.is_empty() {
        return None;
    }
    let n = px.len() as f64;
    let mut se = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = px.iter().map(|&p| render[3 * p + c] as f64).collect();
        let y: Vec<f64> = px.iter().map(|&p| gt[3 * p + c] as f64).collect();
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        // a constant render only admits an offset
        let a = if sxx > 1e-12 * n { sxy / sxx } else { 0.0 };
        let b = my - a * mx;
        se += x.iter().zip(&y).map(|(xv, yv)| (a * xv + b - yv).powi(2)).sum::<f64>();
    }
    Some(mse_to_psnr(se / (3.0 * n)))
}

pub fn ssim_metric(render: &[f32], gt: &[f32], w: usize, h: usize, mask: Option<&[bool]>) -> Option<f64> {
    let x: Vec<f64> = render.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    ssim_value(&x, &y, w, h, mask)
}

/// `(AbsRel, δ<1.25)` at masked-in samples with `0 < d ≤ 80 m`.
pub fn depth_metrics(pred: &[f32], samples: &[DepthSample], mask: Option<&[bool]>) -> Option<(f64, f64)> {
    let used: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.depth > 0.0 && s.depth <= MAX_EVAL_DEPTH && mask.is_none_or(|m| m[s.pixel]))
        .map(|s| (pred[s.pixel] as f64, s.depth))
        .collect();
    if used.is_empty() {
        return None;
    }
    let n = used.len() as f64;
    let absrel = used.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
    let delta = used
        .iter()
        .filter(|(p, g)| *p > 0.0 && (p / g).max(g / p) < DELTA_THRESHOLD)
        .count() as f64
        / n;
    Some((absrel, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: usize,
    pub traversal: u32,
    pub psnr: Option<f64>,
    pub psnr_affine: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub pixels: usize,
    pub depth_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub psnr_affine: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: Aggregate,
    /// Feature-based metrics are not computed; kept for schema stability.
    pub lpips: Option<f64>,
    pub dino_similarity: Option<f64>,
    pub config: serde_json::Value,
}

pub const REPORT_SCHEMA: &str = "mtgs.eval.v1";

impl EvalReport {
    /// Equal-weight means over frames that produced each value.
    pub fn new(frames: Vec<FrameMetrics>, config: serde_json::Value) -> Self {
        let mean = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| {
            let v: Vec<f64> = frames.iter().filter_map(f).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let aggregate = Aggregate {
            psnr: mean(&|f| f.psnr),
            psnr_affine: mean(&|f| f.psnr_affine),
            ssim: mean(&|f| f.ssim),
            absrel: mean(&|f| f.absrel),
            delta1: mean(&|f| f.delta1),
        };
        EvalReport {
            schema: REPORT_SCHEMA.into(),
            frames,
            aggregate,
            lpips: None,
            dino_similarity: None,
            config,
        }
    }

    /// Checks the fields a consumer relies on.
    pub fn validate_json(v: &serde_json::Value) -> bool {
        let agg = &v["aggregate"];
        v["schema"] == REPORT_SCHEMA
            && v["frames"].is_array()
            && ["psnr", "psnr_affine", "ssim", "absrel", "delta1"]
                .iter()
                .all(|k| agg.get(*k).is_some())
            && v["frames"].as_array().unwrap().iter().all(|f| f.get("frame_id").is_some() && f.get("psnr").is_some())
    }

    pub fn table(&self) -> String {
        let mut s = String::from("frame  trav   psnr    psnr_aff  ssim    absrel  delta1\n");
        let f = |v: Option<f64>| v.map_or("   -   ".to_string(), |x| format!("{x:7.3}"));
        for m in &self.frames {
            s += &format!(
                "{:5}  {:4}  {}  {}  {}  {}  {}\n",
                m.frame_id,
                m.traversal,
                f(m.psnr),
                f(m.psnr_affine),
                f(m.ssim),
                f(m.absrel),
                f(m.delta1)
            );
        }
        let a = &self.aggregate;
        s += &format!(
            "mean         {:7.3}  {:7.3}  {:7.3}  {:7.3}  {:7.3}\n",
            a.psnr, a.psnr_affine, a.ssim, a.absrel, a.delta1
        );
        s
    }
}
