//! Command implementations. Each returns `Ok(())` on success; errors map to
//! process exit codes in `main` (2 config, 3 numerical, 4 I/O).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use skewsplat::harness::fit1d::{
    fit_mixture_1d, sample_grid, Family1D, Fit1dConfig, FitReport, Mixture1D,
};
use skewsplat::harness::metrics::{mse, psnr, ssim};
use skewsplat::harness::scene_fit::{
    fit_scene_resume, init_scene, sharp_box_scene, KernelMode, SceneFitConfig, TargetView,
};
use skewsplat::io::{
    read_cameras, read_checkpoint, read_f32_dump, read_png, read_scene, write_cameras,
    write_checkpoint, write_f32_dump, write_png, write_scene, Checkpoint, SceneFormat,
};
use skewsplat::optimizer::TrainState;
use skewsplat::rasterizer::{render, RenderOptions};
use skewsplat::verify::{run_suite, VerifyOptions};
use skewsplat::SplatError;

use crate::config::{Fit1dSection, FitSceneSection, RenderSection, VerifySection};
use crate::svg::{write_line_plot, Series};

fn write_text(path: &Path, text: &str) -> Result<(), SplatError> {
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit1d

const FAMILY_COLORS: [(&str, &str); 3] = [
    ("gaussian", "#1f77b4"),
    ("skewnormal", "#d62728"),
    ("halfgaussian", "#2ca02c"),
];

fn family_color(f: Family1D) -> &'static str {
    FAMILY_COLORS
        .iter()
        .find(|(n, _)| *n == f.as_str())
        .map(|(_, c)| *c)
        .unwrap_or("#555555")
}

pub fn cmd_fit1d(sec: &Fit1dSection, out_dir: &Path) -> Result<(), SplatError> {
    let families: Vec<Family1D> = sec
        .families
        .iter()
        .map(|s| Family1D::parse(s))
        .collect::<Result<_, _>>()?;
    if families.is_empty() || sec.seeds.is_empty() {
        return Err(SplatError::Config(
            "fit1d needs at least one family and one seed".into(),
        ));
    }

    let base = Fit1dConfig {
        iters: sec.iters,
        bcd: sec.bcd,
        pin_alpha: sec.pin_alpha,
        n_samples: sec.n_samples,
        lr_weight: sec.lr_weight,
        lr_mu: sec.lr_mu,
        lr_log_sigma: sec.lr_log_sigma,
        lr_alpha: sec.lr_alpha,
        ..Fit1dConfig::default()
    };

    let mut summary = String::from("family,seed,n_components,iters,final_mse,wall_time_s\n");
    let mut metrics = String::from("family,seed,final_mse\n");
    let mut best: Vec<FitReport> = Vec::new();
    for &family in &families {
        let mut reports = Vec::new();
        for &seed in &sec.seeds {
            let cfg = Fit1dConfig {
                seed,
                ..base.clone()
            };
            let r = fit_mixture_1d(family, sec.n_components, &cfg)?;
            log::info!(
                "fit1d {} seed {} mse {:.6e}",
                family.as_str(),
                seed,
                r.final_mse
            );
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{}",
                family.as_str(),
                r.seed,
                r.n_components,
                r.iteration_count,
                r.final_mse,
                r.wall_time_s
            );
            let _ = writeln!(metrics, "{},{},{}", family.as_str(), r.seed, r.final_mse);
            reports.push(r);
        }

        let mut report_txt = format!("family {}\n", family.as_str());
        for r in &reports {
            let _ = writeln!(
                report_txt,
                "seed {} components {} iters {} final_mse {} wall_time_s {:.3}",
                r.seed, r.n_components, r.iteration_count, r.final_mse, r.wall_time_s
            );
        }
        let best_r = reports
            .into_iter()
            .min_by(|a, b| a.final_mse.partial_cmp(&b.final_mse).unwrap())
            .expect("at least one seed");
        let _ = writeln!(report_txt, "best seed {}", best_r.seed);
        for (i, c) in best_r.components.iter().enumerate() {
            let _ = writeln!(
                report_txt,
                "  component {i}: weight {} mu {} sigma {} alpha {} side {}",
                c.weight,
                c.mu,
                c.sigma(),
                c.alpha,
                c.side
            );
        }
        write_text(
            &out_dir.join(format!("report_{}.txt", family.as_str())),
            &report_txt,
        )?;
        best.push(best_r);
    }
    write_text(&out_dir.join("summary.csv"), &summary)?;
    write_text(&out_dir.join("metrics.csv"), &metrics)?;

    // Best-seed curves on the training grid, as CSV plus a quick-look plot.
    let (lo, hi) = base.domain;
    let xs = sample_grid(lo, hi, base.n_samples);
    let target: Vec<f64> = xs.iter().map(|&x| base.wave.eval(x)).collect();
    let fits: Vec<Vec<f64>> = best
        .iter()
        .map(|r| {
            Mixture1D {
                family: r.family,
                components: r.components.clone(),
            }
            .eval_many(&xs)
        })
        .collect();

    let mut curves = String::from("x,target");
    for r in &best {
        let _ = write!(curves, ",{}", r.family.as_str());
    }
    curves.push('\n');
    for (i, &x) in xs.iter().enumerate() {
        let _ = write!(curves, "{x},{}", target[i]);
        for f in &fits {
            let _ = write!(curves, ",{}", f[i]);
        }
        curves.push('\n');
    }
    write_text(&out_dir.join("fit_curves.csv"), &curves)?;

    let mut series = vec![Series {
        label: "target",
        color: "#222222",
        points: xs.iter().zip(&target).map(|(&x, &y)| (x, y)).collect(),
    }];
    for (r, f) in best.iter().zip(&fits) {
        series.push(Series {
            label: r.family.as_str(),
            color: family_color(r.family),
            points: xs.iter().zip(f).map(|(&x, &y)| (x, y)).collect(),
        });
    }
    write_line_plot(
        &out_dir.join("fit_curves.svg"),
        "square-wave fits (best seed per family)",
        &series,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-scene

fn load_target_image(path: &str, cam_w: usize, cam_h: usize) -> Result<Vec<f64>, SplatError> {
    let p = PathBuf::from(path);
    let (data, w, h) = if path.ends_with(".f32") {
        let (data, w, h, c) = read_f32_dump(&p)?;
        if c != 3 {
            return Err(SplatError::Config(format!(
                "{path}: target must have 3 channels, found {c}"
            )));
        }
        (data, w, h)
    } else {
        read_png(&p)?
    };
    if (w, h) != (cam_w, cam_h) {
        return Err(SplatError::Config(format!(
            "{path}: target is {w}x{h}, camera expects {cam_w}x{cam_h}"
        )));
    }
    Ok(data)
}

fn load_targets(sec: &FitSceneSection, out_dir: &Path) -> Result<Vec<TargetView>, SplatError> {
    if sec.cameras.is_empty() {
        let targets = sharp_box_scene(sec.size, sec.size)?;
        // Keep the synthetic inputs next to the outputs so the run is
        // reproducible with explicit files later.
        write_cameras(
            &out_dir.join("cameras.txt"),
            &targets.iter().map(|t| t.camera.clone()).collect::<Vec<_>>(),
        )?;
        for (i, t) in targets.iter().enumerate() {
            write_png(
                &out_dir.join(format!("target_view{i}.png")),
                &t.image,
                sec.size,
                sec.size,
            )?;
        }
        return Ok(targets);
    }
    let cams = read_cameras(Path::new(&sec.cameras))?;
    if sec.targets.len() != cams.len() {
        return Err(SplatError::Config(format!(
            "{} cameras but {} target images",
            cams.len(),
            sec.targets.len()
        )));
    }
    cams.into_iter()
        .zip(&sec.targets)
        .map(|(camera, path)| {
            let image = load_target_image(path, camera.width, camera.height)?;
            Ok(TargetView { camera, image })
        })
        .collect()
}

pub fn cmd_fit_scene(
    sec: &FitSceneSection,
    out_dir: &Path,
    seed: u64,
    resume: Option<&PathBuf>,
) -> Result<(), SplatError> {
    let start = std::time::Instant::now();
    let mode = KernelMode::parse(&sec.mode)?;
    let targets = load_targets(sec, out_dir)?;

    let mut cfg = SceneFitConfig {
        iters: sec.iters,
        seed,
        init_scale: sec.init_scale,
        init_opacity: sec.init_opacity,
        init_skew: sec.init_skew,
        record_loss: true,
        ..SceneFitConfig::default()
    };
    cfg.optim.lr_skew = sec.lr_skew;
    cfg.optim.noise_scale = sec.noise_scale;

    let (mut prims, mut state) = match resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            log::info!(
                "resuming from {} at iteration {}",
                path.display(),
                ckpt.state.iter
            );
            cfg.optim = ckpt.optim;
            (ckpt.scene, ckpt.state)
        }
        None => {
            if sec.n_prims == 0 {
                return Err(SplatError::Config(
                    "empty scene: n_prims must be >= 1".into(),
                ));
            }
            let prims = init_scene(&targets, sec.n_prims, mode, &cfg)?;
            let state = TrainState::new(prims.len(), seed);
            (prims, state)
        }
    };

    // Train in segments so checkpoints land on the requested cadence.
    let ckpt_path = out_dir.join("checkpoint.json");
    let mut loss_rows = Vec::new();
    let mut report = None;
    while state.iter < cfg.iters || report.is_none() {
        let stop = if sec.checkpoint_every > 0 {
            (state.iter + sec.checkpoint_every).min(cfg.iters)
        } else {
            cfg.iters
        };
        let seg_cfg = SceneFitConfig {
            iters: stop,
            ..cfg.clone()
        };
        let (r, p, s) = fit_scene_resume(&targets, prims, state, mode, &seg_cfg)?;
        loss_rows.extend_from_slice(&r.loss_curve);
        prims = p;
        state = s;
        write_checkpoint(
            &ckpt_path,
            &Checkpoint {
                scene: prims.clone(),
                state: state.clone(),
                optim: cfg.optim.clone(),
            },
        )?;
        report = Some(r);
    }
    let report = report.expect("at least one training segment ran");

    write_scene(&out_dir.join("scene.txt"), &prims, SceneFormat::Text)?;

    let ropts = RenderOptions::default();
    let mut metrics = String::from("view,psnr,ssim\n");
    for (i, tv) in targets.iter().enumerate() {
        let buffers = render(&prims, &tv.camera, &ropts)?;
        let (w, h) = (tv.camera.width, tv.camera.height);
        write_png(
            &out_dir.join(format!("render_view{i}.png")),
            &buffers.color,
            w,
            h,
        )?;
        write_f32_dump(
            &out_dir.join(format!("render_view{i}.f32")),
            &buffers.color,
            w,
            h,
            3,
        )?;
        let _ = writeln!(
            metrics,
            "{i},{},{}",
            psnr(mse(&buffers.color, &tv.image)?),
            ssim(&buffers.color, &tv.image, w, h, 3)?
        );
    }
    let _ = writeln!(metrics, "mean,{},{}", report.mean_psnr, report.mean_ssim);
    write_text(&out_dir.join("metrics.csv"), &metrics)?;

    let mut summary = String::from("mode,seed,n_prims,iters,mean_psnr,mean_ssim,wall_time_s\n");
    let _ = writeln!(
        summary,
        "{},{},{},{},{},{},{:.3}",
        mode.as_str(),
        seed,
        prims.len(),
        state.iter,
        report.mean_psnr,
        report.mean_ssim,
        start.elapsed().as_secs_f64()
    );
    write_text(&out_dir.join("summary.csv"), &summary)?;

    let mut curve = String::from("iteration,view,loss\n");
    for (t, v, l) in &loss_rows {
        let _ = writeln!(curve, "{t},{v},{l}");
    }
    write_text(&out_dir.join("loss_curve.csv"), &curve)?;
    if !loss_rows.is_empty() {
        write_line_plot(
            &out_dir.join("loss_curve.svg"),
            "training loss",
            &[Series {
                label: "loss",
                color: "#d62728",
                points: loss_rows.iter().map(|&(t, _, l)| (t as f64, l)).collect(),
            }],
        )?;
    }
    log::info!(
        "fit-scene done: mean psnr {:.3}, mean ssim {:.4}",
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// render

pub fn cmd_render(sec: &RenderSection, out_dir: &Path) -> Result<(), SplatError> {
    if sec.scene.is_empty() || sec.cameras.is_empty() {
        return Err(SplatError::Config(
            "render needs --scene and --cameras".into(),
        ));
    }
    // Parse and render everything before writing anything, so a bad input
    // never leaves partial output behind.
    let prims = read_scene(Path::new(&sec.scene))?;
    let cams = read_cameras(Path::new(&sec.cameras))?;
    let opts = RenderOptions {
        background: sec.background,
        ..RenderOptions::default()
    };
    let mut frames = Vec::new();
    for cam in &cams {
        frames.push(render(&prims, cam, &opts)?);
    }
    for (i, (cam, buffers)) in cams.iter().zip(&frames).enumerate() {
        write_png(
            &out_dir.join(format!("render_view{i}.png")),
            &buffers.color,
            cam.width,
            cam.height,
        )?;
        write_f32_dump(
            &out_dir.join(format!("render_view{i}.f32")),
            &buffers.color,
            cam.width,
            cam.height,
            3,
        )?;
    }
    log::info!(
        "rendered {} views of {} primitives",
        cams.len(),
        prims.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

pub fn cmd_verify(sec: &VerifySection, seed: u64) -> Result<(), SplatError> {
    let opts = VerifyOptions {
        samples: sec.samples,
        configs: sec.grad_configs,
        seed,
    };
    let mut failed = Vec::new();
    for name in &sec.suites {
        let r = run_suite(name, &opts)?;
        println!(
            "suite {}: {} (worst {:.3e})",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        );
        for line in r.detail.lines() {
            println!("  {line}");
        }
        if !r.passed {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        return Err(SplatError::Numerical(format!(
            "verification failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
