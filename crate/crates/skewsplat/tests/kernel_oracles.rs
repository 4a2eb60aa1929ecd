//! Kernel checks against references coded from scratch in this file: a
//! series/continued-fraction normal CDF, plain-array density arithmetic,
//! an alternative algebraic route to the skewness bound, and Monte-Carlo
//! sampling statistics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skewsplat::snkernel::{
    compose_slant, eval_kernel, mardia_skewness, mardia_supremum, mean_offset, sample_prim,
    std_normal_cdf, Primitive3D, SkewLatent, SnDensity,
};
use skewsplat::verify::{chi_square_gof, simpson_1d};

// ---------------------------------------------------------------------------
// Normal CDF oracle, independent of the crate (and of statrs): Maclaurin
// series of erf below |x| = 3, Laplace continued fraction for erfc above,
// evaluated with modified Lentz. Phi(t) = erfc(-t / sqrt(2)) / 2.

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    let mut term = x;
    let mut sum = x;
    let mut n = 0u32;
    while term.abs() > 1e-20 {
        n += 1;
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
        assert!(n < 300, "erf series stalled at x = {x}");
    }
    2.0 / PI.sqrt() * sum
}

fn erfc_lentz(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0;
    let mut n = 0u32;
    loop {
        n += 1;
        let a = if n == 1 { 1.0 } else { (n as f64 - 1.0) / 2.0 };
        d = x + a * d;
        if d == 0.0 {
            d = tiny;
        }
        c = x + a / c;
        if c == 0.0 {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
        assert!(n < 10_000, "continued fraction stalled at x = {x}");
    }
    (-x * x).exp() / PI.sqrt() * f
}

fn erfc_oracle(x: f64) -> f64 {
    // The series branch computes erfc as 1 - erf, so it must stay below
    // x = 1 where that subtraction cancels at most one digit; the Stieltjes
    // fraction converges (slowly but stably) from there up.
    if x < 0.0 {
        2.0 - erfc_oracle(-x)
    } else if x < 1.0 {
        1.0 - erf_series(x)
    } else {
        erfc_lentz(x)
    }
}

fn phi_oracle(t: f64) -> f64 {
    0.5 * erfc_oracle(-t / 2f64.sqrt())
}

#[test]
fn normal_cdf_matches_independent_oracle() {
    let mut worst = 0.0f64;
    for i in 0..=4800 {
        let t = -12.0 + i as f64 * 0.005;
        worst = worst.max((std_normal_cdf(t) - phi_oracle(t)).abs());
    }
    assert!(worst <= 1e-13, "CDF off by {worst:.3e} from the oracle");
    // Relative agreement holds into the left tail too.
    for t in [-15.0, -20.0, -25.0] {
        let a = std_normal_cdf(t);
        let b = phi_oracle(t);
        assert!(
            ((a - b) / b).abs() <= 1e-11,
            "tail CDF at {t}: {a:.6e} vs oracle {b:.6e}"
        );
    }
}

#[test]
fn kernel_with_unit_slant_argument_matches_oracle() {
    // Identity frame with k along x: at x = mu + e1 the Gaussian factor is
    // exp(-1/2) and the slant argument equals k[0], so the kernel value is
    // a bare Phi evaluation.
    let prim = Primitive3D {
        mu: Vector3::zeros(),
        quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
        log_scale: Vector3::zeros(),
        skew: SkewLatent::from_magnitude(1.0, Vector3::x()),
        opacity_raw: 0.5,
        color: Vector3::zeros(),
    };
    let density = compose_slant(&prim).unwrap();
    let x = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
    let got = eval_kernel(&x, &density);
    let want = (-0.5f64).exp() * phi_oracle(prim.k()[0]);
    assert!(
        (got - want).abs() <= 1e-13,
        "kernel {got:.15e} vs oracle {want:.15e}"
    );
}

// ---------------------------------------------------------------------------
// Straight-line density reference on plain arrays: quaternion rotation
// written out, cofactor inverse, latent map applied by scalar formulas.

fn kernel_reference(
    mu: [f64; 3],
    quat: [f64; 4],
    log_scale: [f64; 3],
    mag_raw: f64,
    dir_raw: [f64; 3],
    x: [f64; 3],
) -> f64 {
    let qn = (quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3]).sqrt();
    let (w, i, j, l) = (quat[0] / qn, quat[1] / qn, quat[2] / qn, quat[3] / qn);
    let r = [
        [
            1.0 - 2.0 * (j * j + l * l),
            2.0 * (i * j - w * l),
            2.0 * (i * l + w * j),
        ],
        [
            2.0 * (i * j + w * l),
            1.0 - 2.0 * (i * i + l * l),
            2.0 * (j * l - w * i),
        ],
        [
            2.0 * (i * l - w * j),
            2.0 * (j * l + w * i),
            1.0 - 2.0 * (i * i + j * j),
        ],
    ];
    let s = [
        log_scale[0].exp().max(1e-6),
        log_scale[1].exp().max(1e-6),
        log_scale[2].exp().max(1e-6),
    ];

    // Latent map: k = m(mag_raw) * dir_raw / (|dir_raw| + 1e-8).
    let m = 8.0 / (1.0 + (-mag_raw / 6.0).exp());
    let dn = (dir_raw[0] * dir_raw[0] + dir_raw[1] * dir_raw[1] + dir_raw[2] * dir_raw[2]).sqrt();
    let k = [
        m * dir_raw[0] / (dn + 1e-8),
        m * dir_raw[1] / (dn + 1e-8),
        m * dir_raw[2] / (dn + 1e-8),
    ];

    // Omega = (R S)(R S)^T, inverted by cofactors.
    let mut rs = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            rs[a][b] = r[a][b] * s[b];
        }
    }
    let mut om = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            om[a][b] = rs[a][0] * rs[b][0] + rs[a][1] * rs[b][1] + rs[a][2] * rs[b][2];
        }
    }
    let det = om[0][0] * (om[1][1] * om[2][2] - om[1][2] * om[2][1])
        - om[0][1] * (om[1][0] * om[2][2] - om[1][2] * om[2][0])
        + om[0][2] * (om[1][0] * om[2][1] - om[1][1] * om[2][0]);
    let mut inv = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let (a1, a2) = ((a + 1) % 3, (a + 2) % 3);
            let (b1, b2) = ((b + 1) % 3, (b + 2) % 3);
            // transposed cofactor; Omega is symmetric so the order only
            // matters for rounding
            inv[b][a] = (om[a1][b1] * om[a2][b2] - om[a1][b2] * om[a2][b1]) / det;
        }
    }

    let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
    let mut quad = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            quad += d[a] * inv[a][b] * d[b];
        }
    }

    // alpha = omega R S^{-1} k, slant argument alpha^T omega^{-1} d.
    let mut arg = 0.0;
    for a in 0..3 {
        let omega_a = om[a][a].sqrt();
        let alpha_a =
            omega_a * (r[a][0] * k[0] / s[0] + r[a][1] * k[1] / s[1] + r[a][2] * k[2] / s[2]);
        arg += alpha_a * d[a] / omega_a;
    }

    (-0.5 * quad).exp() * phi_oracle(arg)
}

#[test]
fn kernel_matches_straightline_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut checked = 0usize;
    while checked < 500 {
        let mu = [
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
        ];
        let quat = [
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ];
        let log_scale = [
            (0.25 + 0.75 * rng.random::<f64>()).ln(),
            (0.25 + 0.75 * rng.random::<f64>()).ln(),
            (0.25 + 0.75 * rng.random::<f64>()).ln(),
        ];
        // every fifth config is skew-free, exercising the Gaussian branch
        let (mag_raw, dir_raw) = if checked % 5 == 4 {
            (0.0, [0.0; 3])
        } else {
            (
                6.0 * (rng.random::<f64>() - 0.3),
                [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ],
            )
        };
        let prim = Primitive3D {
            mu: Vector3::from_column_slice(&mu),
            quat: Vector4::new(quat[0], quat[1], quat[2], quat[3]),
            log_scale: Vector3::from_column_slice(&log_scale),
            skew: SkewLatent {
                mag_raw,
                dir_raw: Vector3::from_column_slice(&dir_raw),
            },
            opacity_raw: 0.5,
            color: Vector3::zeros(),
        };
        // probe inside the 2.5-sigma body so neither factor underflows
        let y = Vector3::new(
            5.0 * (rng.random::<f64>() - 0.5),
            5.0 * (rng.random::<f64>() - 0.5),
            5.0 * (rng.random::<f64>() - 0.5),
        );
        let x3 = prim.mu + prim.rotation() * nalgebra::Matrix3::from_diagonal(&prim.scale()) * y;
        let x = [x3[0], x3[1], x3[2]];

        let want = kernel_reference(mu, quat, log_scale, mag_raw, dir_raw, x);
        if want < 1e-60 {
            continue;
        }
        let density = compose_slant(&prim).unwrap();
        let got = eval_kernel(&DVector::from_column_slice(&x), &density);
        let rel = (got - want).abs() / want.max(got);
        assert!(
            rel <= 1e-10,
            "config {checked}: kernel {got:.15e} vs reference {want:.15e} (rel {rel:.3e})"
        );
        checked += 1;
    }
}

// ---------------------------------------------------------------------------
// Mardia skewness: the implementation works with the slant norm directly;
// the reference squares the univariate skewness coefficient expressed
// through delta = a / sqrt(1 + a^2), which is a different expression tree.

fn mardia_via_delta(a: f64) -> f64 {
    let d2 = a * a / (1.0 + a * a);
    let g1 = (4.0 - PI) / 2.0 * (d2 * 2.0 / PI).powf(1.5) / (1.0 - 2.0 * d2 / PI).powf(1.5);
    g1 * g1
}

#[test]
fn mardia_matches_delta_form_and_is_monotone() {
    for &a in &[0.1, 0.5, 1.0, 2.0, 3.7, 8.0, 50.0] {
        let got = mardia_skewness(a);
        let want = mardia_via_delta(a);
        assert!(
            ((got - want) / want).abs() <= 1e-13,
            "a = {a}: {got:.15e} vs delta-form {want:.15e}"
        );
    }
    assert_eq!(mardia_skewness(0.0), 0.0);

    let sup = 2.0 * (PI - 4.0) * (PI - 4.0) / (PI - 2.0).powi(3);
    assert!((mardia_supremum() - sup).abs() <= 1e-15);
    let mut prev = -1.0;
    for i in 0..=4000 {
        let a = 10f64.powf(-4.0 + 8.0 * i as f64 / 4000.0);
        let g = mardia_skewness(a);
        assert!(g >= prev, "skewness not monotone at |k| = {a}");
        assert!(g < sup + 1e-12, "skewness exceeds the bound at |k| = {a}");
        prev = g;
    }
    assert!((mardia_skewness(1e4) - sup).abs() <= 1e-6);
}

// ---------------------------------------------------------------------------
// Exact mean: hand value in the identity frame, cross-checked by sampling.

#[test]
fn mean_offset_hand_value_and_monte_carlo() {
    let prim = Primitive3D {
        mu: Vector3::new(0.2, -0.1, 0.4),
        quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
        log_scale: Vector3::zeros(),
        skew: SkewLatent::from_magnitude(3.0, Vector3::x()),
        opacity_raw: 0.5,
        color: Vector3::zeros(),
    };
    let k0 = prim.k()[0];
    let off = mean_offset(&prim);
    let want = (2.0 / PI).sqrt() * k0 / (1.0 + k0 * k0).sqrt();
    assert!((off[0] - want).abs() <= 1e-14);
    assert_eq!(off[1], 0.0);
    assert_eq!(off[2], 0.0);

    let density = compose_slant(&prim).unwrap();
    let n = 400_000;
    let samples = sample_prim(&density, n, 11);
    for c in 0..3 {
        let col = samples.column(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let exact = prim.mu[c] + off[c];
        assert!(
            (mean - exact).abs() <= 4.0 * se,
            "axis {c}: sample mean {mean:.6} vs exact {exact:.6} (se {se:.2e})"
        );
    }
}

// ---------------------------------------------------------------------------
// 1D sampling behavior at extreme slant, and a goodness-of-fit pass at a
// moderate one. Bin masses come from Simpson quadrature of the kernel.

fn density_1d(alpha: f64) -> SnDensity {
    SnDensity::new(
        DVector::from_column_slice(&[0.0]),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_column_slice(&[alpha]),
    )
    .unwrap()
}

#[test]
fn large_slant_mass_split_matches_quadrature() {
    let density = density_1d(20.0);
    let f = |x: f64| eval_kernel(&DVector::from_column_slice(&[x]), &density);
    let total = simpson_1d(f, -12.0, 12.0, 24_000);
    let below = simpson_1d(f, -12.0, 0.0, 12_000);
    let frac = below / total;
    assert!(frac < 0.05, "mass below mu should be small, got {frac:.4}");

    let n = 200_000usize;
    let samples = sample_prim(&density, n, 3);
    let got = samples.column(0).iter().filter(|v| **v < 0.0).count() as f64 / n as f64;
    let se = (frac * (1.0 - frac) / n as f64).sqrt();
    assert!(
        (got - frac).abs() <= 4.0 * se,
        "sample fraction {got:.5} vs quadrature {frac:.5} (se {se:.2e})"
    );
}

#[test]
fn sampling_histogram_matches_density() {
    let density = density_1d(3.0);
    let f = |x: f64| eval_kernel(&DVector::from_column_slice(&[x]), &density);
    let total = simpson_1d(f, -12.0, 12.0, 24_000);

    let bins = 50usize;
    let (lo, hi) = (-4.0f64, 4.0f64);
    let width = (hi - lo) / bins as f64;
    // interior bins plus the two tails
    let mut probs = Vec::with_capacity(bins + 2);
    for b in 0..bins {
        let x0 = lo + b as f64 * width;
        probs.push(simpson_1d(f, x0, x0 + width, 200) / total);
    }
    probs.push(simpson_1d(f, -12.0, lo, 4000) / total);
    probs.push(simpson_1d(f, hi, 12.0, 4000) / total);

    let n = 100_000usize;
    let samples = sample_prim(&density, n, 17);
    let mut observed = vec![0u64; bins + 2];
    for v in samples.column(0).iter() {
        let idx = if *v < lo {
            bins
        } else if *v >= hi {
            bins + 1
        } else {
            ((*v - lo) / width) as usize
        };
        observed[idx] += 1;
    }
    let (stat, dof, p) = chi_square_gof(&observed, &probs, n as u64);
    assert!(
        p > 0.001,
        "chi-square {stat:.2} with {dof} dof gives p = {p:.5}"
    );
}
