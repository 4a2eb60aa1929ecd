//! Image metrics: MSE, PSNR, SSIM (value and analytic gradient), and the
//! scene-fitting loss 0.8 * L1 + 0.2 * (1 - SSIM).
//!
//! Images are interleaved row-major `[r g b r g b ..]` slices in [0, 1].
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1 = 0.01,
//! K2 = 0.03) evaluated on the valid region only, averaged over channels.

use crate::error::SplatError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR cap for identical images, in dB.
pub const PSNR_CAP: f64 = 99.0;

/// Weight of the (1 - SSIM) term in the scene loss.
pub const LOSS_SSIM_WEIGHT: f64 = 0.2;

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), SplatError> {
    if a.len() != b.len() {
        return Err(SplatError::Config(format!(
            "image size mismatch: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(SplatError::Config("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, SplatError> {
    check_pair(a, b)?;
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR in dB for images in [0, 1]; identical images report the 99 dB cap.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Normalized 1D Gaussian window of length [`SSIM_WINDOW`].
fn window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let t = i as f64 - c;
        *wi = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Valid-region separable convolution of a `w x h` plane with the window.
/// Output is `(w - 10) x (h - 10)`.
fn conv_valid(plane: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    // Horizontal pass: vw x h.
    let mut tmp = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut s = 0.0;
            for (t, wt) in win.iter().enumerate() {
                s += wt * plane[y * w + x + t];
            }
            tmp[y * vw + x] = s;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut s = 0.0;
            for (t, wt) in win.iter().enumerate() {
                s += wt * tmp[(y + t) * vw + x];
            }
            out[y * vw + x] = s;
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: scatters a valid-region field back onto the
/// full plane through the same window.
fn scatter_full(valid: &[f64], vw: usize, vh: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let h = vh + SSIM_WINDOW - 1;
    // Vertical scatter first: vw x h.
    let mut tmp = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let g = valid[y * vw + x];
            if g == 0.0 {
                continue;
            }
            for (t, wt) in win.iter().enumerate() {
                tmp[(y + t) * vw + x] += wt * g;
            }
        }
    }
    let w = vw + SSIM_WINDOW - 1;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let g = tmp[y * vw + x];
            if g == 0.0 {
                continue;
            }
            for (t, wt) in win.iter().enumerate() {
                out[y * w + x + t] += wt * g;
            }
        }
    }
    out
}

struct SsimAccum {
    sum: f64,
    count: usize,
    /// dSSIM_sum / d(pixel) for one channel plane, full resolution.
    grad_plane: Option<Vec<f64>>,
}

/// Per-channel SSIM pass. `x` is the image the gradient refers to.
fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimAccum {
    let win = window_1d();
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let n = vw * vh;

    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = conv_valid(x, w, h, &win);
    let mu_y = conv_valid(y, w, h, &win);
    let e_xx = conv_valid(&xx, w, h, &win);
    let e_yy = conv_valid(&yy, w, h, &win);
    let e_xy = conv_valid(&xy, w, h, &win);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut sum = 0.0;
    let mut g_mu = vec![0.0; n];
    let mut g_exx = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = var_x + var_y + c2;
        let s = (a1 * a2) / (b1 * b2);
        sum += s;
        if with_grad {
            g_mu[i] = 2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s / b1 + 2.0 * mx * s / b2;
            g_exx[i] = -s / b2;
            g_exy[i] = 2.0 * a1 / (b1 * b2);
        }
    }

    let grad_plane = with_grad.then(|| {
        // d(sum)/dx_j = scatter(g_mu) + 2 x_j scatter(g_exx) + y_j scatter(g_exy)
        let s_mu = scatter_full(&g_mu, vw, vh, &win);
        let s_exx = scatter_full(&g_exx, vw, vh, &win);
        let s_exy = scatter_full(&g_exy, vw, vh, &win);
        (0..w * h)
            .map(|j| s_mu[j] + 2.0 * x[j] * s_exx[j] + y[j] * s_exy[j])
            .collect()
    });

    SsimAccum {
        sum,
        count: n,
        grad_plane,
    }
}

fn ssim_impl(
    img: &[f64],
    target: &[f64],
    w: usize,
    h: usize,
    channels: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), SplatError> {
    check_pair(img, target)?;
    if img.len() != w * h * channels {
        return Err(SplatError::Config(format!(
            "image buffer is {} values, expected {}x{}x{}",
            img.len(),
            w,
            h,
            channels
        )));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(SplatError::Config(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }

    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = with_grad.then(|| vec![0.0; img.len()]);
    let mut xp = vec![0.0; w * h];
    let mut yp = vec![0.0; w * h];
    for ch in 0..channels {
        for p in 0..w * h {
            xp[p] = img[p * channels + ch];
            yp[p] = target[p * channels + ch];
        }
        let acc = ssim_plane(&xp, &yp, w, h, with_grad);
        total += acc.sum;
        count += acc.count;
        if let (Some(g), Some(gp)) = (grad.as_mut(), acc.grad_plane) {
            for p in 0..w * h {
                g[p * channels + ch] = gp[p];
            }
        }
    }
    let norm = count as f64;
    if let Some(g) = grad.as_mut() {
        for v in g.iter_mut() {
            *v /= norm;
        }
    }
    Ok((total / norm, grad))
}

/// Mean SSIM over channels and valid pixels.
pub fn ssim(
    img: &[f64],
    target: &[f64],
    w: usize,
    h: usize,
    channels: usize,
) -> Result<f64, SplatError> {
    ssim_impl(img, target, w, h, channels, false).map(|(s, _)| s)
}

/// SSIM value plus its gradient with respect to `img`.
pub fn ssim_with_grad(
    img: &[f64],
    target: &[f64],
    w: usize,
    h: usize,
    channels: usize,
) -> Result<(f64, Vec<f64>), SplatError> {
    ssim_impl(img, target, w, h, channels, true).map(|(s, g)| (s, g.unwrap()))
}

/// Scene-fitting loss and its gradient with respect to `img`:
/// `L = 0.8 * mean|img - target| + 0.2 * (1 - SSIM(img, target))`.
pub fn loss_and_grad(
    img: &[f64],
    target: &[f64],
    w: usize,
    h: usize,
) -> Result<(f64, Vec<f64>), SplatError> {
    check_pair(img, target)?;
    if img == target {
        // Identical images are a stationary point of both terms. The SSIM
        // gradient below would leave ~1e-18 rounding dust, and a scale-free
        // optimizer happily amplifies dust; return the analytic zeros.
        return Ok((0.0, vec![0.0; img.len()]));
    }
    let (ssim_val, ssim_grad) = ssim_with_grad(img, target, w, h, 3)?;
    let n = img.len() as f64;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; img.len()];
    let lw = 1.0 - LOSS_SSIM_WEIGHT;
    for (i, (x, y)) in img.iter().zip(target).enumerate() {
        let d = x - y;
        l1 += d.abs();
        // Subgradient 0 at d = 0 (signum(0.0) would be 1).
        let sg = if d == 0.0 { 0.0 } else { d.signum() };
        grad[i] = lw * sg / n - LOSS_SSIM_WEIGHT * ssim_grad[i];
    }
    l1 /= n;
    Ok((lw * l1 + LOSS_SSIM_WEIGHT * (1.0 - ssim_val), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn identical_images_cap_psnr_and_unit_ssim() {
        let img = vec![0.3; 20 * 20 * 3];
        let m = mse(&img, &img).unwrap();
        assert_eq!(psnr(m), 99.0);
        let s = ssim(&img, &img, 20, 20, 3).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_half_step_psnr() {
        let a = vec![0.0; 16 * 16 * 3];
        let b = vec![0.5; 16 * 16 * 3];
        let m = mse(&a, &b).unwrap();
        assert_relative_eq!(m, 0.25, epsilon = 1e-15);
        assert_relative_eq!(psnr(m), 10.0 * 4.0f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_img(&mut rng, 24 * 17 * 3);
        let b = rand_img(&mut rng, 24 * 17 * 3);
        // Straight-line oracle.
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a[i] - b[i]).powi(2);
        }
        let oracle = 10.0 * (a.len() as f64 / acc).log10();
        assert_relative_eq!(psnr(mse(&a, &b).unwrap()), oracle, epsilon = 1e-9);
    }

    #[test]
    fn window_normalized() {
        let w = window_1d();
        let s: f64 = w.iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-14);
        assert_relative_eq!(w[0], w[10], epsilon = 1e-15);
    }

    #[test]
    fn scatter_is_adjoint_of_conv() {
        // <conv(x), g> == <x, scatter(g)> for random x, g.
        let (w, h) = (15, 13);
        let win = window_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_img(&mut rng, w * h);
        let vw = w - 10;
        let vh = h - 10;
        let g = rand_img(&mut rng, vw * vh);
        let cx = conv_valid(&x, w, h, &win);
        let sg = scatter_full(&g, vw, vh, &win);
        let lhs: f64 = cx.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sg).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-13);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (w, h) = (14, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_img(&mut rng, w * h * 3);
        let tgt = rand_img(&mut rng, w * h * 3);
        let (_, grad) = ssim_with_grad(&img, &tgt, w, h, 3).unwrap();
        let step = 1e-6;
        for &j in &[0usize, 5, 100, 250, w * h * 3 - 1] {
            let mut p = img.clone();
            p[j] += step;
            let up = ssim(&p, &tgt, w, h, 3).unwrap();
            p[j] = img[j] - step;
            let dn = ssim(&p, &tgt, w, h, 3).unwrap();
            let fd = (up - dn) / (2.0 * step);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (w, h) = (13, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let img = rand_img(&mut rng, w * h * 3);
        let tgt = rand_img(&mut rng, w * h * 3);
        let (_, grad) = loss_and_grad(&img, &tgt, w, h).unwrap();
        let step = 1e-6;
        for &j in &[3usize, 77, 200, w * h * 3 - 2] {
            let mut p = img.clone();
            p[j] += step;
            let (up, _) = loss_and_grad(&p, &tgt, w, h).unwrap();
            p[j] = img[j] - step;
            let (dn, _) = loss_and_grad(&p, &tgt, w, h).unwrap();
            let fd = (up - dn) / (2.0 * step);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-4, epsilon = 1e-10);
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(mse(&[0.0; 4], &[0.0; 5]).is_err());
        assert!(ssim(&[0.0; 12], &[0.0; 12], 2, 2, 3).is_err());
    }
}
