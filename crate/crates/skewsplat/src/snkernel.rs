//! Skew-normal primitive parameterization and density kernel.
//!
//! A primitive carries position, rotation (quaternion), per-axis log scales,
//! a latent skew vector, signed opacity and color. The density kernel is the
//! unnormalized skew-normal
//!
//! ```text
//! SN(x; mu, Omega, k) = G_d(x - mu; Omega) * Phi(alpha^T omega^{-1} (x - mu))
//! ```
//!
//! with `G_d` the unnormalized Gaussian `exp(-1/2 d^T Omega^{-1} d)`,
//! `Omega = R S S^T R^T`, `omega = sqrt(diag(Omega))` and
//! `alpha = omega R S^{-1} k`. The value at `x = mu` is exactly `Phi(0) = 0.5`,
//! and `k = 0` reduces to half the plain Gaussian.

use libm::erfc;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::SplatError;

/// Lower bound applied to `exp(log_scale)` per axis.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Regularizer in the latent direction normalization.
pub const DIR_EPS: f64 = 1e-8;
/// Cap of the latent skew magnitude (`m_k < 8`).
pub const MAG_CAP: f64 = 8.0;

/// Standard normal CDF via erfc; |t| > 40 saturates to exactly 0 or 1.
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal PDF.
pub fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Latent skew parameterization: `k = m_k(mag_raw) * d_k(dir_raw)`.
///
/// `m_k = 8 / (1 + exp(-mag_raw / 6))` keeps the magnitude in (0, 8);
/// `d_k = dir_raw / (|dir_raw| + eps)` is the (softly normalized) direction.
/// `dir_raw = 0` encodes exact zero skew.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewLatent {
    pub mag_raw: f64,
    pub dir_raw: Vector3<f64>,
}

impl SkewLatent {
    pub fn zero() -> Self {
        SkewLatent {
            mag_raw: 0.0,
            dir_raw: Vector3::zeros(),
        }
    }

    /// Latent whose `magnitude()` equals `m` (must lie in (0, MAG_CAP)),
    /// pointing along `dir`. Note `dir_raw = 0` is a fixed point of the
    /// direction gradient, so learnable skew has to start away from it.
    pub fn from_magnitude(m: f64, dir: Vector3<f64>) -> Self {
        assert!(
            m > 0.0 && m < MAG_CAP,
            "skew magnitude {m} outside (0, {MAG_CAP})"
        );
        SkewLatent {
            mag_raw: -6.0 * (MAG_CAP / m - 1.0).ln(),
            dir_raw: dir,
        }
    }

    pub fn magnitude(&self) -> f64 {
        MAG_CAP / (1.0 + (-self.mag_raw / 6.0).exp())
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.dir_raw / (self.dir_raw.norm() + DIR_EPS)
    }

    pub fn k(&self) -> Vector3<f64> {
        self.magnitude() * self.direction()
    }
}

/// One splatting primitive. The quaternion is stored (w, x, y, z) and kept
/// unit-norm by construction and after every optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive3D {
    pub mu: Vector3<f64>,
    pub quat: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub skew: SkewLatent,
    pub opacity_raw: f64,
    pub color: Vector3<f64>,
}

impl Primitive3D {
    /// Renormalizes the quaternion in place (no-op within 1e-9 of unit norm).
    pub fn renormalize_quat(&mut self) {
        let n = self.quat.norm();
        if (n - 1.0).abs() > 1e-9 {
            self.quat /= n;
        }
    }

    /// Rotation matrix of the (normalized) quaternion.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_quat(&(self.quat / self.quat.norm()))
    }

    /// Per-axis scales `exp(log_scale)`, floored at [`SCALE_FLOOR`].
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(|l| l.exp().max(SCALE_FLOOR))
    }

    /// Signed opacity `tanh(opacity_raw)` in (-1, 1).
    pub fn opacity(&self) -> f64 {
        self.opacity_raw.tanh()
    }

    pub fn k(&self) -> Vector3<f64> {
        self.skew.k()
    }

    /// Full 3x3 shape matrix `Omega = R S S^T R^T`.
    pub fn omega(&self) -> Matrix3<f64> {
        let r = self.rotation();
        let s = self.scale();
        let rs = r * Matrix3::from_diagonal(&s);
        rs * rs.transpose()
    }
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
pub fn rotation_from_quat(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Slant-form density parameters, dimension-generic (d in {1, 2, 3}).
///
/// `omega_diag` holds the diagonal of `omega = (Omega ⊙ I)^{1/2}`; the
/// precision matrix is cached at construction.
#[derive(Clone, Debug)]
pub struct SnDensity {
    pub mu: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub omega_diag: DVector<f64>,
    omega_inv: DMatrix<f64>,
}

impl SnDensity {
    /// Validates symmetry and positive-definiteness of `omega`.
    pub fn new(
        mu: DVector<f64>,
        omega: DMatrix<f64>,
        alpha: DVector<f64>,
    ) -> Result<Self, SplatError> {
        let d = mu.len();
        assert!(omega.nrows() == d && omega.ncols() == d && alpha.len() == d);
        let sym_err = (&omega - omega.transpose()).abs().max();
        if !sym_err.is_finite() || sym_err > 1e-9 * (1.0 + omega.abs().max()) {
            return Err(SplatError::Numerical(format!(
                "shape matrix not symmetric (max asymmetry {sym_err:.3e})"
            )));
        }
        let chol = omega
            .clone()
            .cholesky()
            .ok_or_else(|| SplatError::Numerical("shape matrix not positive definite".into()))?;
        let omega_inv = chol.inverse();
        let omega_diag = omega.diagonal().map(f64::sqrt);
        Ok(SnDensity {
            mu,
            omega,
            alpha,
            omega_diag,
            omega_inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn omega_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    /// Correlation-form matrix `Omega_bar = omega^{-1} Omega omega^{-1}`.
    pub fn omega_bar(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| {
            self.omega[(i, j)] / (self.omega_diag[i] * self.omega_diag[j])
        })
    }
}

/// Builds slant-form parameters from decomposed shape pieces (any dimension).
///
/// `rot` must be orthonormal, `scale` strictly positive.
pub fn sn_density_from_parts(
    mu: DVector<f64>,
    rot: &DMatrix<f64>,
    scale: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<SnDensity, SplatError> {
    let d = mu.len();
    let rs = rot * DMatrix::from_diagonal(scale);
    let omega = &rs * rs.transpose();
    let omega_diag = omega.diagonal().map(f64::sqrt);
    // alpha = omega R S^{-1} k
    let s_inv_k = DVector::from_fn(d, |i, _| k[i] / scale[i]);
    let r_sinv_k = rot * s_inv_k;
    let alpha = DVector::from_fn(d, |i, _| omega_diag[i] * r_sinv_k[i]);
    SnDensity::new(mu, omega, alpha)
}

/// Slant-form parameters of a primitive (d = 3).
pub fn compose_slant(prim: &Primitive3D) -> Result<SnDensity, SplatError> {
    let s = prim.scale();
    if !(s.iter().all(|v| v.is_finite() && *v >= SCALE_FLOOR)
        && prim.mu.iter().all(|v| v.is_finite())
        && prim.quat.iter().all(|v| v.is_finite()))
    {
        return Err(SplatError::DegeneratePrimitive {
            index: usize::MAX,
            reason: "non-finite position, rotation or underflowed scale".into(),
        });
    }
    let r = prim.rotation();
    let rot = DMatrix::from_fn(3, 3, |i, j| r[(i, j)]);
    let k3 = prim.k();
    sn_density_from_parts(
        DVector::from_column_slice(prim.mu.as_slice()),
        &rot,
        &DVector::from_column_slice(s.as_slice()),
        &DVector::from_column_slice(k3.as_slice()),
    )
}

/// Unnormalized kernel value `G_d(x - mu; Omega) * Phi(alpha^T omega^{-1}(x - mu))`.
pub fn eval_kernel(x: &DVector<f64>, p: &SnDensity) -> f64 {
    let d = x - &p.mu;
    let q = (&p.omega_inv * &d).dot(&d);
    let g = (-0.5 * q).exp();
    let mut t = 0.0;
    for i in 0..p.dim() {
        t += p.alpha[i] * d[i] / p.omega_diag[i];
    }
    g * std_normal_cdf(t)
}

/// Mardia skewness as a function of the slant norm `a = |k|`.
///
/// Monotone increasing, zero at 0, bounded by [`mardia_supremum`].
pub fn mardia_skewness(k_norm: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let b = k_norm * k_norm;
    let r = (2.0 / pi) * b / (1.0 + (1.0 - 2.0 / pi) * b);
    let c = (4.0 - pi) / 2.0;
    c * c * r * r * r
}

/// Supremum of the Mardia skewness: `2 (pi - 4)^2 / (pi - 2)^3 ≈ 0.99067`.
pub fn mardia_supremum() -> f64 {
    let pi = std::f64::consts::PI;
    2.0 * (pi - 4.0) * (pi - 4.0) / ((pi - 2.0) * (pi - 2.0) * (pi - 2.0))
}

/// Exact mean offset of the primitive's density:
/// `E[X] - mu = sqrt(2/pi) R S k / sqrt(1 + k^T k)`.
pub fn mean_offset(prim: &Primitive3D) -> Vector3<f64> {
    let k = prim.k();
    let rsk = prim.rotation() * Matrix3::from_diagonal(&prim.scale()) * k;
    (2.0 / std::f64::consts::PI).sqrt() / (1.0 + k.dot(&k)).sqrt() * rsk
}

/// Draws `n` samples via the stochastic representation: with
/// `(U, Z) ~ N_{1+d}(0, [[1, delta^T], [delta, Omega_bar]])` and
/// `delta = Omega_bar alpha / sqrt(1 + alpha^T Omega_bar alpha)`,
/// `X = mu + omega * sign(U) * Z` is skew-normal (sign flip is the
/// rejection-free form of conditioning on U > 0).
///
/// Returns an n-by-d matrix, one sample per row. Deterministic in `seed`.
pub fn sample_prim(p: &SnDensity, n: usize, seed: u64) -> DMatrix<f64> {
    let d = p.dim();
    let omega_bar = p.omega_bar();
    let oba = &omega_bar * &p.alpha;
    let astar2 = oba.dot(&p.alpha);
    let delta = oba / (1.0 + astar2).sqrt();

    let mut block = DMatrix::zeros(d + 1, d + 1);
    block[(0, 0)] = 1.0;
    for i in 0..d {
        block[(0, i + 1)] = delta[i];
        block[(i + 1, 0)] = delta[i];
        for j in 0..d {
            block[(i + 1, j + 1)] = omega_bar[(i, j)];
        }
    }
    // SPD by construction (Schur complement 1/(1 + alpha^T Omega_bar alpha) > 0).
    let chol = block
        .cholesky()
        .expect("stochastic-representation block covariance must be SPD");
    let l = chol.l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut out = DMatrix::zeros(n, d);
    let mut w = DVector::zeros(d + 1);
    for row in 0..n {
        for i in 0..d + 1 {
            w[i] = normal.sample(&mut rng);
        }
        let y = &l * &w;
        let s = if y[0] > 0.0 { 1.0 } else { -1.0 };
        for i in 0..d {
            out[(row, i)] = p.mu[i] + p.omega_diag[i] * s * y[i + 1];
        }
    }
    out
}
