//! `skewsplat`: fit, render and verify skew-normal splat scenes.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
//! 4 I/O or parse failure. Log level comes from `SKEWSPLAT_LOG`
//! (error|warn|info|debug|trace, default warn).

mod commands;
mod config;
mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use skewsplat::SplatError;

use config::{ensure_out_dir, load_config, FileConfig};

#[derive(Parser, Debug)]
#[command(name = "skewsplat", version, about = "Skew-normal splatting toolkit")]
struct Cli {
    /// JSON config file; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base RNG seed (fit1d: replaces the seed list; fit-scene/verify: run seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pin the bit-reproducible code paths. They are also the default; the
    /// flag exists to make reproduction scripts explicit.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads for rendering and backprop (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Directory for all written artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit 1D kernel mixtures to a square wave and compare families.
    Fit1d {
        /// Comma-separated families: gaussian, skewnormal, halfgaussian.
        #[arg(long)]
        families: Option<String>,
        /// Comma-separated seed list (default 0..9).
        #[arg(long)]
        seeds: Option<String>,
        /// Mixture size (default 4).
        #[arg(long)]
        n_components: Option<usize>,
        /// Adam iterations (default 5000).
        #[arg(long)]
        iters: Option<u64>,
        /// Alternate sigma/alpha blocks for the skew-normal family (default true).
        #[arg(long)]
        bcd: Option<bool>,
        /// Freeze every alpha at 0 (skew-normal reduces to Gaussian).
        #[arg(long)]
        pin_alpha: Option<bool>,
    },
    /// Fit a 3D splat scene to target views (synthetic sharp-box by default).
    FitScene {
        /// Kernel family: skewnormal (default) or gaussian.
        #[arg(long)]
        mode: Option<String>,
        /// Number of primitives (default 64).
        #[arg(long)]
        n_prims: Option<usize>,
        /// Training iterations (default 3000).
        #[arg(long)]
        iters: Option<u64>,
        /// Camera file; omit to use the built-in synthetic scene.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Comma-separated target images (.png or .f32), one per camera.
        #[arg(long)]
        targets: Option<String>,
        /// Synthetic target side length in pixels (default 64).
        #[arg(long)]
        size: Option<usize>,
        /// Resume from a checkpoint written by a previous run. Must be
        /// combined with the same --mode as that run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write checkpoint.json every N iterations (0 = only at the end).
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Render a scene file through every camera in a camera file.
    Render {
        /// Scene file (text or binary format).
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Camera file.
        #[arg(long)]
        cameras: Option<PathBuf>,
    },
    /// Run the numerical verification suites.
    Verify {
        /// Comma-separated subset of: kernel, closure, mean, gradients, sampling.
        #[arg(long)]
        suites: Option<String>,
        /// Monte-Carlo samples per statistical test (default 200000).
        #[arg(long)]
        samples: Option<usize>,
        /// Random configurations per gradient check (default 200).
        #[arg(long)]
        grad_configs: Option<usize>,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, SplatError> {
    s.split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| SplatError::Config(format!("bad {what} entry '{t}'")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), SplatError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| SplatError::Config(format!("thread pool: {e}")))?;
    }
    if cli.deterministic {
        log::debug!("deterministic mode requested (outputs are bit-reproducible)");
    }
    let file: FileConfig = load_config(cli.config.as_ref())?;
    ensure_out_dir(&cli.out_dir)?;

    match cli.cmd {
        Cmd::Fit1d {
            families,
            seeds,
            n_components,
            iters,
            bcd,
            pin_alpha,
        } => {
            let mut sec = file.fit1d;
            if let Some(f) = families {
                sec.families = parse_list(&f, "family")?;
            }
            if let Some(s) = seeds {
                sec.seeds = parse_list(&s, "seed")?;
            }
            if let Some(s) = cli.seed {
                sec.seeds = vec![s];
            }
            if let Some(n) = n_components {
                sec.n_components = n;
            }
            if let Some(i) = iters {
                sec.iters = i;
            }
            if let Some(b) = bcd {
                sec.bcd = b;
            }
            if let Some(p) = pin_alpha {
                sec.pin_alpha = p;
            }
            commands::cmd_fit1d(&sec, &cli.out_dir)
        }
        Cmd::FitScene {
            mode,
            n_prims,
            iters,
            cameras,
            targets,
            size,
            resume,
            checkpoint_every,
        } => {
            let mut sec = file.fit_scene;
            if let Some(m) = mode {
                sec.mode = m;
            }
            if let Some(n) = n_prims {
                sec.n_prims = n;
            }
            if let Some(i) = iters {
                sec.iters = i;
            }
            if let Some(c) = cameras {
                sec.cameras = c.display().to_string();
            }
            if let Some(t) = targets {
                sec.targets = parse_list(&t, "target path")?;
            }
            if let Some(s) = size {
                sec.size = s;
            }
            if let Some(k) = checkpoint_every {
                sec.checkpoint_every = k;
            }
            commands::cmd_fit_scene(&sec, &cli.out_dir, cli.seed.unwrap_or(0), resume.as_ref())
        }
        Cmd::Render { scene, cameras } => {
            let mut sec = file.render;
            if let Some(s) = scene {
                sec.scene = s.display().to_string();
            }
            if let Some(c) = cameras {
                sec.cameras = c.display().to_string();
            }
            commands::cmd_render(&sec, &cli.out_dir)
        }
        Cmd::Verify {
            suites,
            samples,
            grad_configs,
        } => {
            let mut sec = file.verify;
            if let Some(s) = suites {
                sec.suites = parse_list(&s, "suite")?;
            }
            if let Some(n) = samples {
                sec.samples = n;
            }
            if let Some(n) = grad_configs {
                sec.grad_configs = n;
            }
            commands::cmd_verify(&sec, cli.seed.unwrap_or(2024))
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SKEWSPLAT_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
