//! Keyframed rigid pose tracks for transient nodes.
//!
//! Keyframe rotations are stored as quaternions and are optimizer
//! parameters, as are the translations. Between keyframes the translation is
//! interpolated linearly and the rotation by normalized quaternion lerp.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::gaussian::{quat_to_rot, quat_to_rot_backward, unit_quat_to_rot};
use crate::real::Real;
use crate::{Error, Result};

/// How far outside the keyframe span a timestamp may fall and still snap to
/// the nearest keyframe, in seconds.
pub const EXTRAPOLATION_SLACK: f64 = 0.1;

/// Objects moving less than this over their whole track are treated as
/// static, in meters.
pub const STATIC_MOTION_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack<T: Real> {
    pub times: Vec<f64>,
    /// Four per keyframe, `(w, x, y, z)`.
    pub rotations: Vec<T>,
    /// Three per keyframe.
    pub translations: Vec<T>,
    /// A constant track returns its single keyframe for every timestamp.
    pub constant: bool,
}

/// A pose evaluated at one timestamp, with what is needed to push gradients
/// back onto the keyframes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample<T: Real> {
    /// Unit quaternion.
    pub quat: Vector4<T>,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    k0: usize,
    k1: usize,
    w: T,
    sign: T,
    raw: Vector4<T>,
}

impl<T: Real> PoseTrack<T> {
    pub fn new(times: Vec<f64>, rotations: Vec<T>, translations: Vec<T>) -> Result<Self> {
        let n = times.len();
        if n == 0 || rotations.len() != 4 * n || translations.len() != 3 * n {
            return Err(Error::InvalidParameter(
                "pose track arrays are empty or inconsistent".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter(
                "pose track times are not sorted".into(),
            ));
        }
        for k in 0..n {
            quat_to_rot(&Vector4::from_column_slice(&rotations[4 * k..4 * k + 4]))?;
        }
        Ok(PoseTrack {
            times,
            rotations,
            translations,
            constant: false,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn key_rotation(&self, k: usize) -> Vector4<T> {
        Vector4::from_column_slice(&self.rotations[4 * k..4 * k + 4])
    }

    pub fn key_translation(&self, k: usize) -> Vector3<T> {
        Vector3::from_column_slice(&self.translations[3 * k..3 * k + 3])
    }

    /// Largest distance between any two keyframe translations.
    pub fn max_displacement(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for a in 0..n {
            for b in a + 1..n {
                let d = (self.key_translation(a) - self.key_translation(b)).norm().to_f64();
                best = best.max(d);
            }
        }
        best
    }

    /// Collapses the track onto its first keyframe.
    pub fn make_constant(&mut self) {
        self.times.truncate(1);
        self.rotations.truncate(4);
        self.translations.truncate(3);
        self.constant = true;
    }

    pub fn pose_at(&self, t: f64) -> Result<PoseSample<T>> {
        let n = self.len();
        let (k0, k1, w) = if self.constant || n == 1 {
            if !self.constant
                && (t < self.times[0] - EXTRAPOLATION_SLACK || t > self.times[0] + EXTRAPOLATION_SLACK)
            {
                return Err(self.out_of_range(t));
            }
            (0, 0, 0.0)
        } else if t <= self.times[0] {
            if t < self.times[0] - EXTRAPOLATION_SLACK {
                return Err(self.out_of_range(t));
            }
            (0, 0, 0.0)
        } else if t >= self.times[n - 1] {
            if t > self.times[n - 1] + EXTRAPOLATION_SLACK {
                return Err(self.out_of_range(t));
            }
            (n - 1, n - 1, 0.0)
        } else {
            let k = self.times.partition_point(|&x| x <= t) - 1;
            let span = self.times[k + 1] - self.times[k];
            let w = if span > 0.0 { (t - self.times[k]) / span } else { 0.0 };
            if w == 0.0 {
                (k, k, 0.0)
            } else {
                (k, k + 1, w)
            }
        };
        let w = T::of(w);
        let q0 = self.key_rotation(k0);
        let q1 = self.key_rotation(k1);
        let sign = if q0.dot(&q1) < T::zero() { -T::one() } else { T::one() };
        let raw = q0 * (T::one() - w) + q1 * (w * sign);
        let quat = raw.normalize();
        let translation = self.key_translation(k0) * (T::one() - w) + self.key_translation(k1) * w;
        Ok(PoseSample {
            quat,
            rotation: unit_quat_to_rot(&quat),
            translation,
            k0,
            k1,
            w,
            sign,
            raw,
        })
    }

    fn out_of_range(&self, t: f64) -> Error {
        Error::OutOfRange {
            t,
            start: self.times[0],
            end: self.times[self.len() - 1],
        }
    }

    pub fn cast<U: Real>(&self) -> PoseTrack<U> {
        PoseTrack {
            times: self.times.clone(),
            rotations: crate::real::cast_vec(&self.rotations),
            translations: crate::real::cast_vec(&self.translations),
            constant: self.constant,
        }
    }
}

impl<T: Real> PoseSample<T> {
    /// Accumulates keyframe gradients given `dL/dquat` (on the unit quaternion)
    /// and `dL/dtranslation`.
    pub fn backward(
        &self,
        d_quat: &Vector4<T>,
        d_translation: &Vector3<T>,
        d_rotations: &mut [T],
        d_translations: &mut [T],
    ) {
        let n = self.raw.norm();
        let d_raw = (d_quat - self.quat * self.quat.dot(d_quat)) / n;
        let one = T::one();
        for c in 0..4 {
            d_rotations[4 * self.k0 + c] += d_raw[c] * (one - self.w);
            d_rotations[4 * self.k1 + c] += d_raw[c] * self.w * self.sign;
        }
        for c in 0..3 {
            d_translations[3 * self.k0 + c] += d_translation[c] * (one - self.w);
            d_translations[3 * self.k1 + c] += d_translation[c] * self.w;
        }
    }

    /// `dL/dquat` contribution from a gradient on the rotation matrix.
    pub fn rotation_grad_to_quat(&self, d_rot: &Matrix3<T>) -> Vector4<T> {
        quat_to_rot_backward(&self.quat, d_rot)
    }
}

/// True when the track's keyframes never move more than 3 m apart.
pub fn classify_static<T: Real>(track: &PoseTrack<T>) -> bool {
    track.max_displacement() < STATIC_MOTION_THRESHOLD
}
