//! Real spherical harmonics up to band 3, using the constant table common to
//! splatting renderers. Colors are `Σ β·Y + 0.5`, clamped at zero.

use nalgebra::Vector3;

use crate::real::Real;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Color offset added after SH evaluation.
pub const SH_OFFSET: f64 = 0.5;

/// Maximum supported band limit.
pub const MAX_DEGREE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ShConfig {
    pub l_max: usize,
}

impl Default for ShConfig {
    fn default() -> Self {
        ShConfig { l_max: 3 }
    }
}

impl ShConfig {
    pub fn new(l_max: usize) -> crate::Result<Self> {
        if l_max > MAX_DEGREE {
            return Err(crate::Error::InvalidParameter(format!(
                "SH band limit {l_max} exceeds {MAX_DEGREE}"
            )));
        }
        Ok(ShConfig { l_max })
    }

    /// Coefficients per color channel, `(l_max+1)^2`.
    pub fn coeffs_per_channel(&self) -> usize {
        num_coeffs(self.l_max)
    }

    /// Floats in one Gaussian's higher-band block (`((l_max+1)^2 - 1) * 3`).
    pub fn rest_stride(&self) -> usize {
        rest_stride(self.l_max)
    }
}

pub const fn num_coeffs(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

pub const fn rest_stride(l_max: usize) -> usize {
    (num_coeffs(l_max) - 1) * 3
}

/// Basis values `Y_k(d)` for a unit direction, `k = l^2 + l + m`.
pub fn basis<T: Real>(d: &Vector3<T>, l_max: usize) -> [T; 16] {
    let c = T::of;
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [T::zero(); 16];
    b[0] = c(SH_C0);
    if l_max >= 1 {
        b[1] = -c(SH_C1) * y;
        b[2] = c(SH_C1) * z;
        b[3] = -c(SH_C1) * x;
    }
    if l_max >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = c(SH_C2[0]) * x * y;
        b[5] = c(SH_C2[1]) * y * z;
        b[6] = c(SH_C2[2]) * (c(2.0) * zz - xx - yy);
        b[7] = c(SH_C2[3]) * x * z;
        b[8] = c(SH_C2[4]) * (xx - yy);
        if l_max >= 3 {
            b[9] = c(SH_C3[0]) * y * (c(3.0) * xx - yy);
            b[10] = c(SH_C3[1]) * x * y * z;
            b[11] = c(SH_C3[2]) * y * (c(4.0) * zz - xx - yy);
            b[12] = c(SH_C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy);
            b[13] = c(SH_C3[4]) * x * (c(4.0) * zz - xx - yy);
            b[14] = c(SH_C3[5]) * z * (xx - yy);
            b[15] = c(SH_C3[6]) * x * (xx - c(3.0) * yy);
        }
    }
    b
}

/// Partial derivatives of each basis function with respect to (x, y, z),
/// treating the components as independent.
pub fn basis_grad<T: Real>(d: &Vector3<T>, l_max: usize) -> [Vector3<T>; 16] {
    let c = T::of;
    let z0 = T::zero();
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [Vector3::zeros(); 16];
    if l_max >= 1 {
        g[1] = Vector3::new(z0, -c(SH_C1), z0);
        g[2] = Vector3::new(z0, z0, c(SH_C1));
        g[3] = Vector3::new(-c(SH_C1), z0, z0);
    }
    if l_max >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = Vector3::new(y, x, z0) * c(SH_C2[0]);
        g[5] = Vector3::new(z0, z, y) * c(SH_C2[1]);
        g[6] = Vector3::new(-c(2.0) * x, -c(2.0) * y, c(4.0) * z) * c(SH_C2[2]);
        g[7] = Vector3::new(z, z0, x) * c(SH_C2[3]);
        g[8] = Vector3::new(c(2.0) * x, -c(2.0) * y, z0) * c(SH_C2[4]);
        if l_max >= 3 {
            g[9] = Vector3::new(c(6.0) * x * y, c(3.0) * xx - c(3.0) * yy, z0) * c(SH_C3[0]);
            g[10] = Vector3::new(y * z, x * z, x * y) * c(SH_C3[1]);
            g[11] = Vector3::new(
                -c(2.0) * x * y,
                c(4.0) * zz - xx - c(3.0) * yy,
                c(8.0) * y * z,
            ) * c(SH_C3[2]);
            g[12] = Vector3::new(
                -c(6.0) * x * z,
                -c(6.0) * y * z,
                c(6.0) * zz - c(3.0) * xx - c(3.0) * yy,
            ) * c(SH_C3[3]);
            g[13] = Vector3::new(
                c(4.0) * zz - c(3.0) * xx - yy,
                -c(2.0) * x * y,
                c(8.0) * x * z,
            ) * c(SH_C3[4]);
            g[14] = Vector3::new(c(2.0) * x * z, -c(2.0) * y * z, xx - yy) * c(SH_C3[5]);
            g[15] = Vector3::new(c(3.0) * xx - c(3.0) * yy, -c(6.0) * x * y, z0) * c(SH_C3[6]);
        }
    }
    g
}

/// Evaluates view-dependent color. `rest` holds the `l >= 1` coefficients as
/// `[coeff][channel]`; `dir` need not be normalized. Returns the clamped color
/// and the pre-clamp value.
pub fn eval_sh<T: Real>(
    base: &[T],
    rest: &[T],
    dir: &Vector3<T>,
    l_max: usize,
) -> ([T; 3], [T; 3]) {
    let n = dir.norm();
    let d = if n > T::zero() { dir / n } else { Vector3::z() };
    let b = basis(&d, l_max);
    let mut raw = [T::zero(); 3];
    for ch in 0..3 {
        let mut acc = b[0] * base[ch];
        for k in 1..num_coeffs(l_max) {
            acc += b[k] * rest[(k - 1) * 3 + ch];
        }
        raw[ch] = acc + T::of(SH_OFFSET);
    }
    let clamped = [
        raw[0].max(T::zero()),
        raw[1].max(T::zero()),
        raw[2].max(T::zero()),
    ];
    (clamped, raw)
}

/// Gradients of [`eval_sh`] given the upstream gradient on the clamped color.
pub struct ShGrad<T: Real> {
    pub base: [T; 3],
    pub rest: Vec<T>,
    pub dir: Vector3<T>,
}

pub fn eval_sh_backward<T: Real>(
    _base: &[T],
    rest: &[T],
    dir: &Vector3<T>,
    l_max: usize,
    raw: &[T; 3],
    d_color: &[T; 3],
) -> ShGrad<T> {
    let n = dir.norm();
    let d = if n > T::zero() { dir / n } else { Vector3::z() };
    let b = basis(&d, l_max);
    let bg = basis_grad(&d, l_max);
    let g: [T; 3] = std::array::from_fn(|c| if raw[c] > T::zero() { d_color[c] } else { T::zero() });
    let mut out = ShGrad {
        base: [b[0] * g[0], b[0] * g[1], b[0] * g[2]],
        rest: vec![T::zero(); rest_stride(l_max)],
        dir: Vector3::zeros(),
    };
    let mut d_unit = Vector3::zeros();
    for k in 1..num_coeffs(l_max) {
        let mut s = T::zero();
        for ch in 0..3 {
            out.rest[(k - 1) * 3 + ch] = b[k] * g[ch];
            s += rest[(k - 1) * 3 + ch] * g[ch];
        }
        d_unit += bg[k] * s;
    }
    if n > T::zero() {
        out.dir = (d_unit - d * d.dot(&d_unit)) / n;
    }
    out
}
