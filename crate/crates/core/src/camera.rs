//! Pinhole camera frames with a learnable rigid pose correction and a
//! learnable per-image color affine.
//!
//! Camera space follows the OpenCV convention: x right, y down, z forward.
//! The pose correction `δ = (ρ, φ)` is applied on the left of the
//! world-to-camera transform: `R' = R(φ)·R`, `t' = R(φ)·t + ρ`, where `R(φ)`
//! is the rotation of the quaternion `normalize(1, φ/2)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::gaussian::{quat_to_rot_backward, unit_quat_to_rot};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn matrix(&self) -> Matrix3<T> {
        let z = T::zero();
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, T::one())
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::of(self.fx.to_f64()),
            fy: U::of(self.fy.to_f64()),
            cx: U::of(self.cx.to_f64()),
            cy: U::of(self.cy.to_f64()),
        }
    }
}

/// Per-image color transform `c' = M·c + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorAffine<T: Real> {
    pub matrix: Matrix3<T>,
    pub bias: Vector3<T>,
}

impl<T: Real> Default for ColorAffine<T> {
    fn default() -> Self {
        ColorAffine {
            matrix: Matrix3::identity(),
            bias: Vector3::zeros(),
        }
    }
}

impl<T: Real> ColorAffine<T> {
    pub const PARAMS: usize = 12;

    /// Row-major matrix followed by the bias.
    pub fn from_params(p: &[T]) -> Self {
        ColorAffine {
            matrix: Matrix3::from_row_slice(&p[..9]),
            bias: Vector3::from_column_slice(&p[9..12]),
        }
    }

    pub fn to_params(&self) -> [T; 12] {
        let m = &self.matrix;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)],
            m[(2, 1)], m[(2, 2)], self.bias.x, self.bias.y, self.bias.z,
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == Matrix3::identity() && self.bias == Vector3::zeros()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame<T: Real> {
    pub frame_id: usize,
    pub traversal: u32,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<T>,
    /// World-to-camera transform; bottom row `(0, 0, 0, 1)`.
    pub world_to_camera: Matrix4<T>,
    /// `(ρx, ρy, ρz, φx, φy, φz)`.
    pub pose_delta: [T; 6],
    pub use_pose_delta: bool,
    pub affine: ColorAffine<T>,
}

/// Effective rigid transform used for projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsic<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Extrinsic<T> {
    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl<T: Real> CameraFrame<T> {
    pub fn new(
        frame_id: usize,
        traversal: u32,
        timestamp: f64,
        width: usize,
        height: usize,
        intrinsics: Intrinsics<T>,
        world_to_camera: Matrix4<T>,
    ) -> Self {
        CameraFrame {
            frame_id,
            traversal,
            timestamp,
            width,
            height,
            intrinsics,
            world_to_camera,
            pose_delta: [T::zero(); 6],
            use_pose_delta: true,
            affine: ColorAffine::default(),
        }
    }

    pub fn base_extrinsic(&self) -> Extrinsic<T> {
        Extrinsic {
            rotation: self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// The corrected world-to-camera transform actually used for rendering.
    pub fn extrinsic(&self) -> Extrinsic<T> {
        let base = self.base_extrinsic();
        if !self.use_pose_delta {
            return base;
        }
        let d = &self.pose_delta;
        let r = delta_rotation(&d[3..6]);
        Extrinsic {
            rotation: r * base.rotation,
            translation: r * base.translation + Vector3::new(d[0], d[1], d[2]),
        }
    }

    /// Maps gradients on the effective extrinsic to the pose-delta parameters.
    pub fn pose_delta_backward(&self, d_rot: &Matrix3<T>, d_trans: &Vector3<T>) -> [T; 6] {
        if !self.use_pose_delta {
            return [T::zero(); 6];
        }
        let base = self.base_extrinsic();
        let d_delta_rot = d_rot * base.rotation.transpose() + d_trans * base.translation.transpose();
        let half = T::of(0.5);
        let phi = &self.pose_delta[3..6];
        let q = Vector4::new(T::one(), phi[0] * half, phi[1] * half, phi[2] * half);
        let dq = quat_to_rot_backward(&q, &d_delta_rot);
        [d_trans.x, d_trans.y, d_trans.z, dq[1] * half, dq[2] * half, dq[3] * half]
    }

    pub fn valid(&self) -> bool {
        let w = &self.world_to_camera;
        let bottom = w[(3, 0)] == T::zero()
            && w[(3, 1)] == T::zero()
            && w[(3, 2)] == T::zero()
            && w[(3, 3)] == T::one();
        bottom
            && self.intrinsics.fx > T::zero()
            && self.intrinsics.fy > T::zero()
            && self.width > 0
            && self.height > 0
    }

    pub fn cast<U: Real>(&self) -> CameraFrame<U> {
        CameraFrame {
            frame_id: self.frame_id,
            traversal: self.traversal,
            timestamp: self.timestamp,
            width: self.width,
            height: self.height,
            intrinsics: self.intrinsics.cast(),
            world_to_camera: self.world_to_camera.map(|v| U::of(v.to_f64())),
            pose_delta: self.pose_delta.map(|v| U::of(v.to_f64())),
            use_pose_delta: self.use_pose_delta,
            affine: ColorAffine {
                matrix: self.affine.matrix.map(|v| U::of(v.to_f64())),
                bias: self.affine.bias.map(|v| U::of(v.to_f64())),
            },
        }
    }
}

pub fn delta_rotation<T: Real>(phi: &[T]) -> Matrix3<T> {
    let half = T::of(0.5);
    let q = Vector4::new(T::one(), phi[0] * half, phi[1] * half, phi[2] * half);
    unit_quat_to_rot(&q.normalize())
}

/// World-to-camera matrix for a camera at `eye` looking at `target`, with
/// `up` the approximate world up direction (OpenCV axes).
pub fn look_at<T: Real>(eye: &Vector3<T>, target: &Vector3<T>, up: &Vector3<T>) -> Matrix4<T> {
    let forward = (target - eye).normalize();
    let right = forward.cross(up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    Extrinsic {
        rotation: r,
        translation: -(r * eye),
    }
    .to_matrix()
}
