//! 1D square-wave study: fit a mixture of Gaussian, skew-normal, or
//! half-Gaussian kernels to a square wave by gradient descent and compare
//! final MSE across families.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SplatError;
use crate::optimizer::{adam_step, bcd_phase, AdamParams, AdamState, BcdConfig, Phase};
use crate::snkernel::{std_normal_cdf, std_normal_pdf, SCALE_FLOOR};

/// Periodic square wave. High on the first `duty` fraction of each period.
pub fn square_wave(x: f64, period: f64, duty: f64, low: f64, high: f64) -> f64 {
    let phase = x.rem_euclid(period) / period;
    if phase < duty {
        high
    } else {
        low
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SquareWave {
    pub period: f64,
    pub duty: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for SquareWave {
    fn default() -> Self {
        SquareWave {
            period: 2.0,
            duty: 0.5,
            low: 0.0,
            high: 1.0,
        }
    }
}

impl SquareWave {
    pub fn eval(&self, x: f64) -> f64 {
        square_wave(x, self.period, self.duty, self.low, self.high)
    }
}

/// Midpoint sample grid on [lo, hi]. Midpoints keep the wave's jump points
/// (and the half-Gaussian cut at init) off the grid.
pub fn sample_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family1D {
    Gaussian,
    SkewNormal,
    HalfGaussian,
}

impl Family1D {
    pub fn as_str(self) -> &'static str {
        match self {
            Family1D::Gaussian => "gaussian",
            Family1D::SkewNormal => "skewnormal",
            Family1D::HalfGaussian => "halfgaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SplatError> {
        match s {
            "gaussian" => Ok(Family1D::Gaussian),
            "skewnormal" => Ok(Family1D::SkewNormal),
            "halfgaussian" => Ok(Family1D::HalfGaussian),
            other => Err(SplatError::Config(format!(
                "unknown 1d family '{other}' (expected gaussian|skewnormal|halfgaussian)"
            ))),
        }
    }
}

/// One mixture component. `alpha` is live for the skew-normal family,
/// `side` (+1 or -1) for the half-Gaussian family; the rest ignore them.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Component1D {
    pub weight: f64,
    pub mu: f64,
    pub log_sigma: f64,
    pub alpha: f64,
    pub side: f64,
}

impl Component1D {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp().max(SCALE_FLOOR)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mixture1D {
    pub family: Family1D,
    pub components: Vec<Component1D>,
}

impl Mixture1D {
    /// Model value at `x`. The Gaussian family is the alpha = 0 slice of the
    /// skew-normal kernel (so a pinned-alpha skew-normal run matches it
    /// exactly); the half-Gaussian keeps the full Gaussian amplitude on its
    /// kept side.
    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for c in &self.components {
            let t = x - c.mu;
            let s = c.sigma();
            let g = (-t * t / (2.0 * s * s)).exp();
            acc += match self.family {
                // Shared expression tree with the alpha = 0 slice, so the
                // Gaussian family matches a pinned-alpha run bit for bit.
                Family1D::Gaussian => c.weight * g * std_normal_cdf(0.0),
                Family1D::SkewNormal => c.weight * g * std_normal_cdf(c.alpha * t / s),
                Family1D::HalfGaussian => {
                    if c.side * t >= 0.0 {
                        c.weight * g
                    } else {
                        0.0
                    }
                }
            };
        }
        acc
    }

    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }
}

/// Largest absolute jump between adjacent samples of the model on a uniform
/// grid. A fitted half-Gaussian mixture shows its truncation cuts here.
pub fn max_adjacent_jump(mix: &Mixture1D, lo: f64, hi: f64, n: usize) -> f64 {
    let xs = sample_grid(lo, hi, n);
    let ys = mix.eval_many(&xs);
    ys.windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fit1dConfig {
    pub iters: u64,
    pub seed: u64,
    /// Alternate (sigma) and (alpha) blocks for the skew-normal family.
    pub bcd: bool,
    pub bcd_schedule: BcdConfig,
    /// Freeze alpha at its initial value (skew-normal only).
    pub pin_alpha: bool,
    pub n_samples: usize,
    pub domain: (f64, f64),
    pub wave: SquareWave,
    pub lr_weight: f64,
    pub lr_mu: f64,
    pub lr_log_sigma: f64,
    pub lr_alpha: f64,
}

impl Default for Fit1dConfig {
    fn default() -> Self {
        Fit1dConfig {
            iters: 5000,
            seed: 0,
            bcd: true,
            bcd_schedule: BcdConfig::default(),
            pin_alpha: false,
            n_samples: 1024,
            domain: (-2.0, 2.0),
            wave: SquareWave::default(),
            lr_weight: 0.02,
            lr_mu: 0.01,
            lr_log_sigma: 0.01,
            lr_alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub family: Family1D,
    pub n_components: usize,
    pub final_mse: f64,
    pub iteration_count: u64,
    pub wall_time_s: f64,
    pub seed: u64,
    pub components: Vec<Component1D>,
}

/// Equally spaced means with a small seeded jitter, sigma = period / 8,
/// unit weights, zero alpha. Jitter is drawn identically for every family so
/// cross-family runs with one seed share their starting point.
pub fn init_mixture(
    family: Family1D,
    n: usize,
    cfg: &Fit1dConfig,
    xs: &[f64],
    ys: &[f64],
) -> Mixture1D {
    let (lo, hi) = cfg.domain;
    let span = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter_amp = cfg.wave.period / 20.0;
    let components: Vec<Component1D> = (0..n)
        .map(|i| {
            let center = lo + (i as f64 + 0.5) * span / n as f64;
            let jitter = jitter_amp * (2.0 * rng.random::<f64>() - 1.0);
            Component1D {
                weight: 1.0,
                mu: center + jitter,
                log_sigma: (cfg.wave.period / 8.0).ln(),
                alpha: 0.0,
                side: 1.0,
            }
        })
        .collect();
    let mut mix = Mixture1D { family, components };
    if family == Family1D::HalfGaussian {
        choose_sides(&mut mix, xs, ys);
    }
    mix
}

/// Greedy per-component side selection: flip each side in turn and keep the
/// orientation with lower MSE given the others.
fn choose_sides(mix: &mut Mixture1D, xs: &[f64], ys: &[f64]) {
    for i in 0..mix.components.len() {
        let mut best = (f64::INFINITY, 1.0);
        for side in [1.0, -1.0] {
            mix.components[i].side = side;
            let m = mse_of(mix, xs, ys);
            if m < best.0 {
                best = (m, side);
            }
        }
        mix.components[i].side = best.1;
    }
}

fn mse_of(mix: &Mixture1D, xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = mix.eval(*x) - y;
        acc += r * r;
    }
    acc / xs.len() as f64
}

struct Grads1D {
    weight: Vec<f64>,
    mu: Vec<f64>,
    log_sigma: Vec<f64>,
    alpha: Vec<f64>,
}

/// Analytic MSE gradient for every component parameter.
fn mse_gradient(mix: &Mixture1D, xs: &[f64], ys: &[f64]) -> (f64, Grads1D) {
    let n = mix.components.len();
    let mut g = Grads1D {
        weight: vec![0.0; n],
        mu: vec![0.0; n],
        log_sigma: vec![0.0; n],
        alpha: vec![0.0; n],
    };
    let inv = 1.0 / xs.len() as f64;
    let mut loss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = mix.eval(x) - y;
        loss += r * r * inv;
        let coef = 2.0 * r * inv;
        for (i, c) in mix.components.iter().enumerate() {
            let t = x - c.mu;
            let s = c.sigma();
            let scale_active = c.log_sigma.exp() > SCALE_FLOOR;
            let gk = (-t * t / (2.0 * s * s)).exp();
            match mix.family {
                // The Gaussian family takes the skew-normal path with alpha
                // forced to 0 (same expression tree, bitwise-equal grads).
                Family1D::Gaussian | Family1D::SkewNormal => {
                    let alpha = if mix.family == Family1D::Gaussian {
                        0.0
                    } else {
                        c.alpha
                    };
                    let u = alpha * t / s;
                    let phi_cdf = std_normal_cdf(u);
                    let phi_pdf = std_normal_pdf(u);
                    g.weight[i] += coef * gk * phi_cdf;
                    g.mu[i] += coef * c.weight * gk * (phi_cdf * t / (s * s) - phi_pdf * alpha / s);
                    if scale_active {
                        // d/d log sigma = s * d/d sigma.
                        g.log_sigma[i] += coef
                            * c.weight
                            * gk
                            * (phi_cdf * t * t / (s * s) - phi_pdf * alpha * t / s);
                    }
                    if mix.family == Family1D::SkewNormal {
                        g.alpha[i] += coef * c.weight * gk * phi_pdf * t / s;
                    }
                }
                Family1D::HalfGaussian => {
                    if c.side * t >= 0.0 {
                        // Subgradient 0 through the cut; t = 0 zeroes the
                        // mu/sigma terms on its own.
                        g.weight[i] += coef * gk;
                        g.mu[i] += coef * c.weight * gk * t / (s * s);
                        if scale_active {
                            g.log_sigma[i] += coef * c.weight * gk * t * t / (s * s);
                        }
                    }
                }
            }
        }
    }
    (loss, g)
}

/// Fit an `n_components` mixture of the given family to the square wave by
/// Adam on sampled MSE. Reports divergence (MSE above 10x the initial value
/// for 100 consecutive steps) as a numerical error naming the seed.
pub fn fit_mixture_1d(
    family: Family1D,
    n_components: usize,
    cfg: &Fit1dConfig,
) -> Result<FitReport, SplatError> {
    if n_components == 0 {
        return Err(SplatError::Config("n_components must be >= 1".into()));
    }
    cfg.bcd_schedule.validate()?;
    let start = std::time::Instant::now();
    let (lo, hi) = cfg.domain;
    let xs = sample_grid(lo, hi, cfg.n_samples);
    let ys: Vec<f64> = xs.iter().map(|&x| cfg.wave.eval(x)).collect();

    let mut mix = init_mixture(family, n_components, cfg, &xs, &ys);
    // BCD only has two live blocks when alpha is actually being learned.
    let use_bcd = cfg.bcd && family == Family1D::SkewNormal && !cfg.pin_alpha;
    let pin_alpha = cfg.pin_alpha || family != Family1D::SkewNormal;

    let mut st_weight = AdamState::new(n_components);
    let mut st_mu = AdamState::new(n_components);
    let mut st_sigma = AdamState::new(n_components);
    let mut st_alpha = AdamState::new(n_components);
    let hp_weight = AdamParams::with_lr(cfg.lr_weight);
    let hp_mu = AdamParams::with_lr(cfg.lr_mu);
    let hp_sigma = AdamParams::with_lr(cfg.lr_log_sigma);
    let hp_alpha = AdamParams::with_lr(cfg.lr_alpha);

    let initial_mse = mse_of(&mix, &xs, &ys);
    let mut diverged_streak = 0u32;

    for t in 0..cfg.iters {
        let (loss, g) = mse_gradient(&mix, &xs, &ys);
        if loss > 10.0 * initial_mse {
            diverged_streak += 1;
            if diverged_streak >= 100 {
                return Err(SplatError::Numerical(format!(
                    "1d fit diverged: family {}, seed {}, step {t}, mse {loss:.6e} \
                     (initial {initial_mse:.6e})",
                    family.as_str(),
                    cfg.seed
                )));
            }
        } else {
            diverged_streak = 0;
        }

        let phase = if use_bcd {
            bcd_phase(t, &cfg.bcd_schedule)
        } else {
            Phase::Joint
        };
        let update_sigma = !use_bcd || phase != Phase::SkewOnly;
        let update_alpha = !pin_alpha && (!use_bcd || phase != Phase::BaseOnly);

        let mut weights: Vec<f64> = mix.components.iter().map(|c| c.weight).collect();
        let mut mus: Vec<f64> = mix.components.iter().map(|c| c.mu).collect();
        adam_step(
            &mut st_weight,
            &mut weights,
            &g.weight,
            &hp_weight,
            "weight",
        )?;
        adam_step(&mut st_mu, &mut mus, &g.mu, &hp_mu, "mu")?;
        for (c, (&w, &m)) in mix.components.iter_mut().zip(weights.iter().zip(&mus)) {
            c.weight = w;
            c.mu = m;
        }
        if update_sigma {
            let mut sigmas: Vec<f64> = mix.components.iter().map(|c| c.log_sigma).collect();
            adam_step(
                &mut st_sigma,
                &mut sigmas,
                &g.log_sigma,
                &hp_sigma,
                "log_sigma",
            )?;
            for (c, &s) in mix.components.iter_mut().zip(&sigmas) {
                c.log_sigma = s;
            }
        }
        if update_alpha {
            let mut alphas: Vec<f64> = mix.components.iter().map(|c| c.alpha).collect();
            adam_step(&mut st_alpha, &mut alphas, &g.alpha, &hp_alpha, "alpha")?;
            for (c, &a) in mix.components.iter_mut().zip(&alphas) {
                c.alpha = a;
            }
        }
    }
    let final_mse = mse_of(&mix, &xs, &ys);

    Ok(FitReport {
        family,
        n_components,
        final_mse,
        iteration_count: cfg.iters,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        components: mix.components,
    })
}
