//! Gaussian parameter storage and the geometric building blocks: quaternion
//! rotations, covariance construction, and the shortest-axis normal.
//!
//! Quaternions are stored `(w, x, y, z)` and normalized inside every
//! conversion, so the optimizer may leave them off the unit sphere.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::real::{sigmoid, Real};
use crate::sh::{rest_stride, ShConfig};
use crate::{Error, Result};

/// Structure-of-arrays Gaussian parameters. All per-Gaussian arrays are flat
/// with fixed strides: positions 3, quats 4, log-scales 3, opacity logits 1,
/// `sh_base` 3, `sh_rest` [`GaussianSet::rest_stride`] (zero when the set does
/// not own higher bands).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet<T: Real> {
    pub sh: ShConfig,
    pub has_rest: bool,
    pub positions: Vec<T>,
    pub quats: Vec<T>,
    pub log_scales: Vec<T>,
    pub opacity_logits: Vec<T>,
    pub sh_base: Vec<T>,
    pub sh_rest: Vec<T>,
}

impl<T: Real> GaussianSet<T> {
    pub fn empty(sh: ShConfig, has_rest: bool) -> Self {
        GaussianSet {
            sh,
            has_rest,
            positions: Vec::new(),
            quats: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_base: Vec::new(),
            sh_rest: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rest_stride(&self) -> usize {
        if self.has_rest {
            rest_stride(self.sh.l_max)
        } else {
            0
        }
    }

    /// Appends one Gaussian. `rest` is ignored for sets without higher bands.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        position: [T; 3],
        quat: [T; 4],
        log_scale: [T; 3],
        opacity_logit: T,
        base: [T; 3],
        rest: Option<&[T]>,
    ) {
        self.positions.extend_from_slice(&position);
        self.quats.extend_from_slice(&quat);
        self.log_scales.extend_from_slice(&log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh_base.extend_from_slice(&base);
        if self.has_rest {
            let stride = self.rest_stride();
            match rest {
                Some(r) => self.sh_rest.extend_from_slice(&r[..stride]),
                None => self.sh_rest.extend(std::iter::repeat_n(T::zero(), stride)),
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        let ok = self.positions.len() == 3 * n
            && self.quats.len() == 4 * n
            && self.log_scales.len() == 3 * n
            && self.sh_base.len() == 3 * n
            && self.sh_rest.len() == self.rest_stride() * n;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "gaussian arrays disagree on length (n = {n})"
            )))
        }
    }

    pub fn position(&self, i: usize) -> Vector3<T> {
        Vector3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn quat(&self, i: usize) -> Vector4<T> {
        Vector4::from_column_slice(&self.quats[4 * i..4 * i + 4])
    }

    pub fn scale(&self, i: usize) -> Vector3<T> {
        Vector3::from_column_slice(&self.log_scales[3 * i..3 * i + 3]).map(|v| v.exp())
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn rest(&self, i: usize) -> &[T] {
        let s = self.rest_stride();
        &self.sh_rest[s * i..s * (i + 1)]
    }

    /// Largest activated scale of Gaussian `i`, in meters.
    pub fn max_scale(&self, i: usize) -> T {
        let s = self.scale(i);
        s.x.max(s.y).max(s.z)
    }

    /// Keeps rows `rows[k]` (in that order, duplicates allowed).
    pub fn gather(&self, rows: &[usize]) -> Self {
        let rs = self.rest_stride();
        GaussianSet {
            sh: self.sh,
            has_rest: self.has_rest,
            positions: gather_rows(&self.positions, 3, rows),
            quats: gather_rows(&self.quats, 4, rows),
            log_scales: gather_rows(&self.log_scales, 3, rows),
            opacity_logits: gather_rows(&self.opacity_logits, 1, rows),
            sh_base: gather_rows(&self.sh_base, 3, rows),
            sh_rest: gather_rows(&self.sh_rest, rs, rows),
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        use crate::real::cast_vec;
        GaussianSet {
            sh: self.sh,
            has_rest: self.has_rest,
            positions: cast_vec(&self.positions),
            quats: cast_vec(&self.quats),
            log_scales: cast_vec(&self.log_scales),
            opacity_logits: cast_vec(&self.opacity_logits),
            sh_base: cast_vec(&self.sh_base),
            sh_rest: cast_vec(&self.sh_rest),
        }
    }
}

/// Gradient buffers with the same layout as [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads<T: Real> {
    pub positions: Vec<T>,
    pub quats: Vec<T>,
    pub log_scales: Vec<T>,
    pub opacity_logits: Vec<T>,
    pub sh_base: Vec<T>,
    pub sh_rest: Vec<T>,
}

impl<T: Real> GaussianGrads<T> {
    pub fn zeros_like(set: &GaussianSet<T>) -> Self {
        let n = set.len();
        GaussianGrads {
            positions: vec![T::zero(); 3 * n],
            quats: vec![T::zero(); 4 * n],
            log_scales: vec![T::zero(); 3 * n],
            opacity_logits: vec![T::zero(); n],
            sh_base: vec![T::zero(); 3 * n],
            sh_rest: vec![T::zero(); set.rest_stride() * n],
        }
    }
}

pub fn gather_rows<T: Copy>(data: &[T], stride: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        out.extend_from_slice(&data[r * stride..(r + 1) * stride]);
    }
    out
}

/// Rotation matrix from a (possibly unnormalized) quaternion `(w, x, y, z)`.
pub fn quat_to_rot<T: Real>(q: &Vector4<T>) -> Result<Matrix3<T>> {
    let n = q.norm();
    if !(n > T::of(1e-12)) {
        return Err(Error::InvalidParameter(
            "quaternion has zero norm".to_string(),
        ));
    }
    Ok(unit_quat_to_rot(&(q / n)))
}

pub(crate) fn unit_quat_to_rot<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = T::one();
    let two = T::of(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Gradient of a scalar through [`quat_to_rot`]: maps `dL/dR` to `dL/dq` for
/// the unnormalized input quaternion.
pub fn quat_to_rot_backward<T: Real>(q: &Vector4<T>, d_rot: &Matrix3<T>) -> Vector4<T> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = d_rot;
    let two = T::of(2.0);
    let dw = two
        * (x * (g[(2, 1)] - g[(1, 2)]) + y * (g[(0, 2)] - g[(2, 0)]) + z * (g[(1, 0)] - g[(0, 1)]));
    let dx = two
        * (-two * x * (g[(1, 1)] + g[(2, 2)])
            + y * (g[(0, 1)] + g[(1, 0)])
            + z * (g[(0, 2)] + g[(2, 0)])
            + w * (g[(2, 1)] - g[(1, 2)]));
    let dy = two
        * (x * (g[(0, 1)] + g[(1, 0)]) - two * y * (g[(0, 0)] + g[(2, 2)])
            + z * (g[(1, 2)] + g[(2, 1)])
            + w * (g[(0, 2)] - g[(2, 0)]));
    let dz = two
        * (x * (g[(0, 2)] + g[(2, 0)]) + y * (g[(1, 2)] + g[(2, 1)])
            - two * z * (g[(0, 0)] + g[(1, 1)])
            + w * (g[(1, 0)] - g[(0, 1)]));
    let du = Vector4::new(dw, dx, dy, dz);
    (du - u * u.dot(&du)) / n
}

/// Quaternion `(w, x, y, z)` for a rotation matrix (Shepperd's method),
/// with non-negative `w`.
pub fn rot_to_quat<T: Real>(r: &Matrix3<T>) -> Vector4<T> {
    let one = T::one();
    let quarter = T::of(0.25);
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > T::zero() {
        let s = (tr + one).sqrt() * T::of(2.0);
        Vector4::new(
            quarter * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (one + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * T::of(2.0);
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            quarter * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (one + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * T::of(2.0);
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            quarter * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (one + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * T::of(2.0);
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            quarter * s,
        )
    };
    let q = q.normalize();
    if q[0] < T::zero() {
        -q
    } else {
        q
    }
}

/// Hamilton product `a ⊗ b` for `(w, x, y, z)` quaternions.
pub fn quat_mul<T: Real>(a: &Vector4<T>, b: &Vector4<T>) -> Vector4<T> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

/// Adjoint of [`quat_mul`]: returns `(dL/da, dL/db)`.
pub fn quat_mul_backward<T: Real>(
    a: &Vector4<T>,
    b: &Vector4<T>,
    g: &Vector4<T>,
) -> (Vector4<T>, Vector4<T>) {
    let da = Vector4::new(
        g[0] * b[0] + g[1] * b[1] + g[2] * b[2] + g[3] * b[3],
        -g[0] * b[1] + g[1] * b[0] - g[2] * b[3] + g[3] * b[2],
        -g[0] * b[2] + g[1] * b[3] + g[2] * b[0] - g[3] * b[1],
        -g[0] * b[3] - g[1] * b[2] + g[2] * b[1] + g[3] * b[0],
    );
    let db = Vector4::new(
        g[0] * a[0] + g[1] * a[1] + g[2] * a[2] + g[3] * a[3],
        -g[0] * a[1] + g[1] * a[0] + g[2] * a[3] - g[3] * a[2],
        -g[0] * a[2] - g[1] * a[3] + g[2] * a[0] + g[3] * a[1],
        -g[0] * a[3] + g[1] * a[2] - g[2] * a[1] + g[3] * a[0],
    );
    (da, db)
}

/// `Σ = R·diag(s)·diag(s)ᵀ·Rᵀ`.
pub fn covariance<T: Real>(r: &Matrix3<T>, s: &Vector3<T>) -> Matrix3<T> {
    let m = r * Matrix3::from_diagonal(s);
    m * m.transpose()
}

/// Adjoint of [`covariance`] for a symmetric upstream gradient: returns
/// `(dL/dR, dL/ds)`.
pub fn covariance_backward<T: Real>(
    r: &Matrix3<T>,
    s: &Vector3<T>,
    d_sigma: &Matrix3<T>,
) -> (Matrix3<T>, Vector3<T>) {
    let m = r * Matrix3::from_diagonal(s);
    let dm = (d_sigma + d_sigma.transpose()) * m;
    let dr = dm * Matrix3::from_diagonal(s);
    let ds = Vector3::from_fn(|k, _| (0..3).fold(T::zero(), |acc, j| acc + dm[(j, k)] * r[(j, k)]));
    (dr, ds)
}

/// Index of the smallest scale; exact ties go to the lowest axis.
pub fn shortest_axis<T: Real>(s: &Vector3<T>) -> usize {
    let mut k = 0;
    for a in 1..3 {
        if s[a] < s[k] {
            k = a;
        }
    }
    k
}

/// Unit normal along the shortest scaling axis, `R · e_argmin(s)`. The
/// camera-facing sign flip happens during projection.
pub fn gaussian_normal<T: Real>(r: &Matrix3<T>, s: &Vector3<T>) -> Vector3<T> {
    r.column(shortest_axis(s)).into_owned()
}
