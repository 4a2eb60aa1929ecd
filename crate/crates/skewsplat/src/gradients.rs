//! Analytic backward pass for the 2D kernel and the full render.
//!
//! With `Delta = u - mu2d`, `m = m2d`, `Omega = Omega2d` (dilated) and
//! `Q = A R S`, the kernel `SN2D = G2(Delta) * Phi(m^T Delta)` differentiates
//! through the auxiliary terms
//!
//! ```text
//! c_Delta = Phi * G2 * Omega^{-1} Delta
//! M_Delta = Phi * G2 * (Omega^{-1} Delta)(Omega^{-1} Delta)^T
//! s_Delta = (G2 / sqrt(2 pi)) * exp(-(m^T Delta)^2 / 2)
//! p_Delta = s_Delta * Omega^{-1} Delta
//! ```
//!
//! as
//!
//! ```text
//! dSN/dmu2d = c_Delta - s_Delta m
//! dSN/dk    = (1/D) Q^T (p_Delta + (p^T Omega m) m) - (1/D^2)(p^T Omega m) k
//! dSN/dQ    = (M_Delta - p m^T - m p^T - (p^T Omega m) m m^T) Q
//!             + (1/D)(p_Delta + (p^T Omega m) m) k^T
//! ```
//!
//! The formulas hold verbatim with the dilated `Omega` because the dilation
//! is an additive constant in `Q Q^T + c I`. When the projection clamped `D`,
//! every term originating in the radicand derivative is dropped (subgradient
//! of the clamp). Scene-parameter gradients chain through `Q = A R S`,
//! `k = m_k(mag_raw) d_k(dir_raw)`, `o = tanh(opacity_raw)` and the
//! unit-quaternion rotation; `mu` routes through the per-view affine `A`.

use rayon::prelude::*;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::camera::{CameraModel, SplatFootprint2D};
use crate::error::SplatError;
use crate::rasterizer::{RenderBuffers, RenderOptions};
use crate::snkernel::{Primitive3D, DIR_EPS, MAG_CAP, SCALE_FLOOR};

#[derive(Clone, Debug)]
pub struct AuxTerms {
    pub c_delta: Vector2<f64>,
    pub m_delta: Matrix2<f64>,
    pub s_delta: f64,
    pub p_delta: Vector2<f64>,
    /// m2d^T Delta
    pub mdotd: f64,
    pub g2: f64,
    pub phi: f64,
}

pub fn aux_terms(u: &Vector2<f64>, fp: &SplatFootprint2D) -> AuxTerms {
    let delta = u - fp.mu2d;
    let oinv_d = fp.omega2d_inv * delta;
    let g2 = (-0.5 * oinv_d.dot(&delta)).exp();
    let mdotd = fp.m2d.dot(&delta);
    let phi = crate::snkernel::std_normal_cdf(mdotd);
    let s_delta = g2 / (2.0 * std::f64::consts::PI).sqrt() * (-0.5 * mdotd * mdotd).exp();
    AuxTerms {
        c_delta: phi * g2 * oinv_d,
        m_delta: phi * g2 * oinv_d * oinv_d.transpose(),
        s_delta,
        p_delta: s_delta * oinv_d,
        mdotd,
        g2,
        phi,
    }
}

/// dSN2D/dmu2d.
pub fn grad_mu2d(aux: &AuxTerms, fp: &SplatFootprint2D) -> Vector2<f64> {
    aux.c_delta - aux.s_delta * fp.m2d
}

/// dSN2D/dk (k held in world parameter space, Q fixed).
pub fn grad_k(aux: &AuxTerms, fp: &SplatFootprint2D, k: &Vector3<f64>) -> Vector3<f64> {
    let d = fp.d_factor;
    if fp.d_clamped {
        // D frozen: only the direct Phi-argument term survives.
        return fp.q.transpose() * aux.p_delta / d;
    }
    // p_Delta^T Omega m = s_Delta * (m^T Delta).
    let pom = aux.s_delta * aux.mdotd;
    let common = aux.p_delta + pom * fp.m2d;
    fp.q.transpose() * common / d - (pom / (d * d)) * k
}

/// dSN2D/dQ with `Omega2d = Q Q^T + dilation I` and `m2d`, `D` recomputed.
pub fn grad_q(aux: &AuxTerms, fp: &SplatFootprint2D, k: &Vector3<f64>) -> Matrix2x3<f64> {
    let d = fp.d_factor;
    let m = fp.m2d;
    if fp.d_clamped {
        let shape = aux.m_delta - aux.p_delta * m.transpose() - m * aux.p_delta.transpose();
        return shape * fp.q + aux.p_delta * k.transpose() / d;
    }
    let pom = aux.s_delta * aux.mdotd;
    let shape = aux.m_delta
        - aux.p_delta * m.transpose()
        - m * aux.p_delta.transpose()
        - pom * m * m.transpose();
    shape * fp.q + (aux.p_delta + pom * m) * k.transpose() / d
}

/// dm_k/dmag_raw expressed through the magnitude itself.
pub fn dmag_dmag_raw(m_k: f64) -> f64 {
    m_k * (MAG_CAP - m_k) / 48.0
}

/// dd_k/ddir_raw: projector orthogonal to the unit direction, scaled by
/// 1/(|v| + eps). Zero subgradient at the degenerate v = 0 encoding.
pub fn ddir_ddir_raw(v: &Vector3<f64>) -> Matrix3<f64> {
    let n = v.norm();
    if n < 1e-12 {
        return Matrix3::zeros();
    }
    let d = v / n;
    (Matrix3::identity() - d * d.transpose()) / (n + DIR_EPS)
}

/// Contracts dL/dR with dR/dq of the unit-quaternion rotation formula and
/// projects onto the tangent space of the normalization (the raw quaternion
/// is renormalized after every update, so |q| = 1 here).
pub fn quat_rotation_grad(q: &Vector4<f64>, dl_dr: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let d = dl_dr;
    let gw = 2.0
        * (-z * d[(0, 1)] + y * d[(0, 2)] + z * d[(1, 0)] - x * d[(1, 2)] - y * d[(2, 0)]
            + x * d[(2, 1)]);
    let gx = 2.0
        * (y * d[(0, 1)] + z * d[(0, 2)] + y * d[(1, 0)] - 2.0 * x * d[(1, 1)] - w * d[(1, 2)]
            + z * d[(2, 0)]
            + w * d[(2, 1)]
            - 2.0 * x * d[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * d[(0, 0)] + x * d[(0, 1)] + w * d[(0, 2)] + x * d[(1, 0)] + z * d[(1, 2)]
            - w * d[(2, 0)]
            + z * d[(2, 1)]
            - 2.0 * y * d[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * d[(0, 0)] - w * d[(0, 1)] + x * d[(0, 2)] + w * d[(1, 0)]
            - 2.0 * z * d[(1, 1)]
            + y * d[(1, 2)]
            + x * d[(2, 0)]
            + y * d[(2, 1)]);
    let g = Vector4::new(gw, gx, gy, gz);
    let n = q.norm();
    (g - q * (q.dot(&g) / (n * n))) / n
}

/// Per-primitive parameter gradients, raw parameter space throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_mu: Vector3<f64>,
    pub d_quat: Vector4<f64>,
    pub d_log_scale: Vector3<f64>,
    pub d_mag_raw: f64,
    pub d_dir_raw: Vector3<f64>,
    pub d_opacity_raw: f64,
    pub d_color: Vector3<f64>,
}

impl GradientBundle {
    pub fn zeros() -> Self {
        GradientBundle {
            d_mu: Vector3::zeros(),
            d_quat: Vector4::zeros(),
            d_log_scale: Vector3::zeros(),
            d_mag_raw: 0.0,
            d_dir_raw: Vector3::zeros(),
            d_opacity_raw: 0.0,
            d_color: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &GradientBundle) {
        self.d_mu += o.d_mu;
        self.d_quat += o.d_quat;
        self.d_log_scale += o.d_log_scale;
        self.d_mag_raw += o.d_mag_raw;
        self.d_dir_raw += o.d_dir_raw;
        self.d_opacity_raw += o.d_opacity_raw;
        self.d_color += o.d_color;
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_param(&self) -> Option<&'static str> {
        if !self.d_mu.iter().all(|v| v.is_finite()) {
            return Some("mu");
        }
        if !self.d_quat.iter().all(|v| v.is_finite()) {
            return Some("quat");
        }
        if !self.d_log_scale.iter().all(|v| v.is_finite()) {
            return Some("log_scale");
        }
        if !self.d_mag_raw.is_finite() {
            return Some("mag_raw");
        }
        if !self.d_dir_raw.iter().all(|v| v.is_finite()) {
            return Some("dir_raw");
        }
        if !self.d_opacity_raw.is_finite() {
            return Some("opacity_raw");
        }
        if !self.d_color.iter().all(|v| v.is_finite()) {
            return Some("color");
        }
        None
    }
}

/// Loop-invariant chain pieces for one visible footprint.
struct FpCtx {
    prim_idx: usize,
    opacity: f64,
    dop_draw: f64,
    color: Vector3<f64>,
    k: Vector3<f64>,
    a_t: nalgebra::Matrix3x2<f64>,
    ar: Matrix2x3<f64>,
    scale: Vector3<f64>,
    scale_active: [bool; 3],
    dk_dmag: Vector3<f64>,
    dk_ddir: Matrix3<f64>,
    quat: Vector4<f64>,
}

/// Pulls dL/dimage (row-major RGB, one value per channel) back to
/// per-primitive parameter gradients. `buffers` must have been rendered with
/// `retain_for_backward`. Accumulation order is fixed (rows, then front of
/// the blend list last), so results are bit-reproducible across thread counts.
pub fn backprop_render(
    buffers: &RenderBuffers,
    dl_dimage: &[f64],
    prims: &[Primitive3D],
    cam: &CameraModel,
    opts: &RenderOptions,
) -> Result<Vec<GradientBundle>, SplatError> {
    let (w, h) = (buffers.width, buffers.height);
    assert_eq!((w, h), (cam.width, cam.height), "buffers/camera mismatch");
    assert_eq!(dl_dimage.len(), w * h * 3, "dL/dimage size mismatch");
    let hits = buffers
        .hits
        .as_ref()
        .expect("backprop_render needs buffers rendered with retain_for_backward");

    let ctxs: Vec<FpCtx> = buffers
        .footprints
        .iter()
        .map(|(idx, fp)| {
            let prim = &prims[*idx];
            let o = prim.opacity();
            let rot = prim.rotation();
            let scale = prim.scale();
            let m_k = prim.skew.magnitude();
            let dir = prim.skew.direction();
            FpCtx {
                prim_idx: *idx,
                opacity: o,
                dop_draw: 1.0 - o * o,
                color: prim.color,
                k: prim.k(),
                a_t: fp.a.transpose(),
                ar: fp.a * rot,
                scale,
                scale_active: [
                    prim.log_scale[0].exp() > SCALE_FLOOR,
                    prim.log_scale[1].exp() > SCALE_FLOOR,
                    prim.log_scale[2].exp() > SCALE_FLOOR,
                ],
                dk_dmag: dir * dmag_dmag_raw(m_k),
                dk_ddir: m_k * ddir_ddir_raw(&prim.skew.dir_raw),
                quat: prim.quat / prim.quat.norm(),
            }
        })
        .collect();

    let row_bundles: Vec<Vec<GradientBundle>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![GradientBundle::zeros(); prims.len()];
            for x in 0..w {
                let p = y * w + x;
                let recs = &hits[p];
                if recs.is_empty() && opts.background == [0.0; 3] {
                    continue;
                }
                let u = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let dl = Vector3::new(dl_dimage[p * 3], dl_dimage[p * 3 + 1], dl_dimage[p * 3 + 2]);
                // Replay back to front: t is the transmittance *after* the
                // current record, b the suffix color including background.
                let mut t = buffers.final_t[p];
                let mut b = Vector3::new(
                    opts.background[0] * t,
                    opts.background[1] * t,
                    opts.background[2] * t,
                );
                for rec in recs.iter().rev() {
                    let ctx = &ctxs[rec.slot as usize];
                    let fp = &buffers.footprints[rec.slot as usize].1;
                    let one_m_a = 1.0 - rec.alpha;
                    let t_i = t / one_m_a;
                    let g = &mut acc[ctx.prim_idx];

                    g.d_color += dl * (rec.alpha * t_i);
                    let dc_da = ctx.color * t_i - b / one_m_a;
                    let dl_da = dl.dot(&dc_da);
                    if !rec.clamped && dl_da != 0.0 {
                        g.d_opacity_raw += dl_da * rec.sn * ctx.dop_draw;
                        let dl_dsn = dl_da * ctx.opacity;
                        if dl_dsn != 0.0 {
                            let aux = aux_terms(&u, fp);
                            g.d_mu += ctx.a_t * grad_mu2d(&aux, fp) * dl_dsn;

                            let gk = grad_k(&aux, fp, &ctx.k) * dl_dsn;
                            g.d_mag_raw += gk.dot(&ctx.dk_dmag);
                            g.d_dir_raw += ctx.dk_ddir * gk;

                            let dq = grad_q(&aux, fp, &ctx.k) * dl_dsn;
                            let dr = ctx.a_t * dq * Matrix3::from_diagonal(&ctx.scale);
                            g.d_quat += quat_rotation_grad(&ctx.quat, &dr);
                            for j in 0..3 {
                                if ctx.scale_active[j] {
                                    g.d_log_scale[j] +=
                                        dq.column(j).dot(&ctx.ar.column(j)) * ctx.scale[j];
                                }
                            }
                        }
                    }
                    b += ctx.color * (rec.alpha * t_i);
                    t = t_i;
                }
            }
            acc
        })
        .collect();

    let mut out = vec![GradientBundle::zeros(); prims.len()];
    for row in &row_bundles {
        for (dst, src) in out.iter_mut().zip(row) {
            dst.add(src);
        }
    }
    for (i, g) in out.iter().enumerate() {
        if let Some(param) = g.non_finite_param() {
            return Err(SplatError::NonFiniteGradient { index: i, param });
        }
    }
    Ok(out)
}
