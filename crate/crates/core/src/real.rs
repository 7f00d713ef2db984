//! Scalar abstraction so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

use nalgebra::RealField;

pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Inverse of [`sigmoid`], clamped away from the endpoints.
#[inline]
pub fn logit<T: Real>(p: T) -> T {
    let eps = T::of(1e-6);
    let p = p.clamp(eps, T::one() - eps);
    (p / (T::one() - p)).ln()
}

/// Converts a slice between precisions.
pub fn cast_vec<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::of(x.to_f64())).collect()
}
