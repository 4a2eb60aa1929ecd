//! Camera model, local affine projection and 2D footprint assembly.
//!
//! Projection follows the EWA-style local affine approximation: a primitive
//! with shape `Omega = R S S^T R^T` and slant latent `k` maps through the
//! 2x3 affine `A = J W` (projection Jacobian times view rotation) to
//!
//! ```text
//! mu2d     = proj(mu)
//! Omega2d  = A Omega A^T + dilation * I
//! m2d      = Omega2d^{-1} (A R S k) / D
//! D        = sqrt(1 + k^T k - (ARSk)^T Omega2d^{-1} (ARSk))
//! center   = mu2d + sqrt(2/pi) * (ARSk) / sqrt(1 + k^T k)
//! ```
//!
//! `center` is the exact mean of the 2D footprint density (the dilation
//! cancels in the mean), so culling and tiling are anchored there rather
//! than at the mode-shifted `mu2d`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::SplatError;
use crate::snkernel::Primitive3D;

/// Near-plane used for view-space culling.
pub const Z_NEAR: f64 = 0.01;
/// Isotropic dilation added to `A Omega A^T` before inversion.
pub const DILATION: f64 = 0.3;
/// Footprint radius in units of sqrt(lambda_max(Omega2d)).
pub const RADIUS_MULT: f64 = 3.0;
/// Lower clamp on the normalizer D.
pub const D_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraMode {
    Pinhole,
    Orthographic,
}

impl CameraMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CameraMode::Pinhole => "pinhole",
            CameraMode::Orthographic => "orthographic",
        }
    }

    pub fn parse(s: &str) -> Option<CameraMode> {
        match s {
            "pinhole" => Some(CameraMode::Pinhole),
            "orthographic" => Some(CameraMode::Orthographic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CameraModel {
    pub world_to_view: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub mode: CameraMode,
}

impl CameraModel {
    /// Validates the rigid transform (orthonormal rotation block within 1e-9,
    /// affine last row) and positive intrinsics.
    pub fn new(
        world_to_view: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        mode: CameraMode,
    ) -> Result<Self, SplatError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(SplatError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(SplatError::InvalidCamera(
                "principal point not finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(SplatError::InvalidCamera(
                "image size must be nonzero".into(),
            ));
        }
        if !world_to_view.iter().all(|v| v.is_finite()) {
            return Err(SplatError::InvalidCamera("world_to_view not finite".into()));
        }
        let bottom = world_to_view.row(3);
        if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(SplatError::InvalidCamera(
                "world_to_view last row must be [0 0 0 1]".into(),
            ));
        }
        let r = world_to_view.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(SplatError::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {err:.3e})"
            )));
        }
        Ok(CameraModel {
            world_to_view,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            mode,
        })
    }

    /// Pinhole camera at `eye` looking at `target` (view +z is forward).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        mode: CameraMode,
    ) -> Result<Self, SplatError> {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let mut m = Matrix4::identity();
        for (row, axis) in [x, y, z].iter().enumerate() {
            m[(row, 0)] = axis[0];
            m[(row, 1)] = axis[1];
            m[(row, 2)] = axis[2];
            m[(row, 3)] = -axis.dot(&eye);
        }
        CameraModel::new(
            m,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            mode,
        )
    }

    pub fn view_rotation(&self) -> Matrix3<f64> {
        self.world_to_view.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera position in world space.
    pub fn center(&self) -> Vector3<f64> {
        let r = self.view_rotation();
        let t = Vector3::new(
            self.world_to_view[(0, 3)],
            self.world_to_view[(1, 3)],
            self.world_to_view[(2, 3)],
        );
        -(r.transpose() * t)
    }

    /// World point to view space.
    pub fn view_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.world_to_view * p.push(1.0);
        Vector3::new(h[0], h[1], h[2])
    }

    /// View-space point to pixel coordinates.
    pub fn project_view_point(&self, v: &Vector3<f64>) -> Vector2<f64> {
        match self.mode {
            CameraMode::Pinhole => Vector2::new(
                self.fx * v[0] / v[2] + self.cx,
                self.fy * v[1] / v[2] + self.cy,
            ),
            CameraMode::Orthographic => {
                Vector2::new(self.fx * v[0] + self.cx, self.fy * v[1] + self.cy)
            }
        }
    }

    /// World point straight to pixels (no culling).
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.project_view_point(&self.view_point(p))
    }
}

/// Projection Jacobian at a view-space point.
fn jacobian(cam: &CameraModel, v: &Vector3<f64>) -> Matrix2x3<f64> {
    match cam.mode {
        CameraMode::Pinhole => {
            let z = v[2];
            Matrix2x3::new(
                cam.fx / z,
                0.0,
                -cam.fx * v[0] / (z * z),
                0.0,
                cam.fy / z,
                -cam.fy * v[1] / (z * z),
            )
        }
        CameraMode::Orthographic => Matrix2x3::new(cam.fx, 0.0, 0.0, 0.0, cam.fy, 0.0),
    }
}

/// Local affine map `A = J W` at a world point, or `None` when the point is
/// culled (view z <= z_near).
pub fn local_affine(cam: &CameraModel, mu: &Vector3<f64>, z_near: f64) -> Option<Matrix2x3<f64>> {
    let v = cam.view_point(mu);
    if v[2] <= z_near {
        return None;
    }
    Some(jacobian(cam, &v) * cam.view_rotation())
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectOptions {
    pub z_near: f64,
    pub dilation: f64,
    pub d_floor: f64,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        ProjectOptions {
            z_near: Z_NEAR,
            dilation: DILATION,
            d_floor: D_FLOOR,
        }
    }
}

/// Projected footprint of one primitive. `q = A R S` and `a` are cached for
/// the backward pass; `omega2d` (and everything derived from it) includes
/// the dilation.
#[derive(Clone, Debug)]
pub struct SplatFootprint2D {
    pub mu2d: Vector2<f64>,
    pub omega2d: Matrix2<f64>,
    pub omega2d_inv: Matrix2<f64>,
    pub m2d: Vector2<f64>,
    pub bbox_center: Vector2<f64>,
    pub depth: f64,
    pub arsk: Vector2<f64>,
    pub d_factor: f64,
    pub d_clamped: bool,
    pub q: Matrix2x3<f64>,
    pub a: Matrix2x3<f64>,
}

impl SplatFootprint2D {
    /// Truncation radius in pixels: `radius_mult * sqrt(lambda_max(Omega2d))`.
    pub fn radius(&self, radius_mult: f64) -> f64 {
        radius_mult * lambda_max(&self.omega2d).sqrt()
    }
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub fn lambda_max(m: &Matrix2<f64>) -> f64 {
    let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    half_tr + (half_tr * half_tr - det).max(0.0).sqrt()
}

/// Assembles a footprint from projected 2D quantities. `a` is left zero and
/// `depth` is 1; [`project_parts`] fills them. Public so gradient oracles can
/// perturb `(Q, k)` directly through the exact same arithmetic.
pub fn footprint_from_q(
    mu2d: Vector2<f64>,
    q: Matrix2x3<f64>,
    k: &Vector3<f64>,
    dilation: f64,
    d_floor: f64,
) -> Result<SplatFootprint2D, SplatError> {
    let mut omega2d = q * q.transpose();
    omega2d[(0, 0)] += dilation;
    omega2d[(1, 1)] += dilation;
    // Exact symmetrization; QQ^T can carry rounding asymmetry.
    let off = 0.5 * (omega2d[(0, 1)] + omega2d[(1, 0)]);
    omega2d[(0, 1)] = off;
    omega2d[(1, 0)] = off;

    let det = omega2d[(0, 0)] * omega2d[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return Err(SplatError::Numerical(format!(
            "projected shape matrix singular after dilation (det {det:.3e})"
        )));
    }
    let omega2d_inv = Matrix2::new(
        omega2d[(1, 1)] / det,
        -off / det,
        -off / det,
        omega2d[(0, 0)] / det,
    );

    let arsk = q * k;
    let kk = k.dot(k);
    let radicand = 1.0 + kk - (omega2d_inv * arsk).dot(&arsk);
    let floor2 = d_floor * d_floor;
    let (d_factor, d_clamped) = if radicand <= floor2 {
        (d_floor, true)
    } else {
        (radicand.sqrt(), false)
    };
    let m2d = omega2d_inv * arsk / d_factor;
    let bbox_center = mu2d + (2.0 / std::f64::consts::PI).sqrt() / (1.0 + kk).sqrt() * arsk;

    Ok(SplatFootprint2D {
        mu2d,
        omega2d,
        omega2d_inv,
        m2d,
        bbox_center,
        depth: 1.0,
        arsk,
        d_factor,
        d_clamped,
        q,
        a: Matrix2x3::zeros(),
    })
}

/// Footprint from decomposed shape pieces; `None` means culled.
pub fn project_parts(
    mu: &Vector3<f64>,
    rot: &Matrix3<f64>,
    scale: &Vector3<f64>,
    k: &Vector3<f64>,
    cam: &CameraModel,
    opts: &ProjectOptions,
) -> Result<Option<SplatFootprint2D>, SplatError> {
    let v = cam.view_point(mu);
    if v[2] <= opts.z_near {
        return Ok(None);
    }
    let a = jacobian(cam, &v) * cam.view_rotation();
    let mu2d = cam.project_view_point(&v);
    let q = a * rot * Matrix3::from_diagonal(scale);
    let mut fp = footprint_from_q(mu2d, q, k, opts.dilation, opts.d_floor)?;
    fp.a = a;
    fp.depth = v[2];
    Ok(Some(fp))
}

/// Projects one primitive; `None` means culled by the near plane.
pub fn project(
    prim: &Primitive3D,
    cam: &CameraModel,
    opts: &ProjectOptions,
) -> Result<Option<SplatFootprint2D>, SplatError> {
    let s = prim.scale();
    if !(s.iter().all(|v| v.is_finite()) && prim.mu.iter().all(|v| v.is_finite())) {
        return Err(SplatError::DegeneratePrimitive {
            index: usize::MAX,
            reason: "non-finite position or scale".into(),
        });
    }
    project_parts(&prim.mu, &prim.rotation(), &s, &prim.k(), cam, opts)
}

/// Inclusive tile-index rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Tiles whose pixels can fall inside the footprint disc, clipped to the
/// image; `None` when the disc misses every pixel center.
pub fn bbox_tiles(
    fp: &SplatFootprint2D,
    radius_mult: f64,
    tile_size: usize,
    width: usize,
    height: usize,
) -> Option<TileRect> {
    let r = fp.radius(radius_mult);
    let (cx, cy) = (fp.bbox_center[0], fp.bbox_center[1]);
    // Pixel ix has center ix + 0.5; keep those with |center - c| <= r.
    let px0 = (cx - r - 0.5).ceil().max(0.0);
    let px1 = (cx + r - 0.5).floor().min(width as f64 - 1.0);
    let py0 = (cy - r - 0.5).ceil().max(0.0);
    let py1 = (cy + r - 0.5).floor().min(height as f64 - 1.0);
    if px0 > px1 || py0 > py1 {
        return None;
    }
    Some(TileRect {
        x0: px0 as usize / tile_size,
        y0: py0 as usize / tile_size,
        x1: px1 as usize / tile_size,
        y1: py1 as usize / tile_size,
    })
}
