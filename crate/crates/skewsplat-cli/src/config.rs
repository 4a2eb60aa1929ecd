//! Config-file schema. One JSON object with an optional section per
//! command; unknown keys anywhere are rejected so typos fail loudly instead
//! of silently running on defaults. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skewsplat::SplatError;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub fit1d: Fit1dSection,
    pub fit_scene: FitSceneSection,
    pub render: RenderSection,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fit1dSection {
    pub families: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_components: usize,
    pub iters: u64,
    pub bcd: bool,
    pub pin_alpha: bool,
    pub n_samples: usize,
    pub lr_weight: f64,
    pub lr_mu: f64,
    pub lr_log_sigma: f64,
    pub lr_alpha: f64,
}

impl Default for Fit1dSection {
    fn default() -> Self {
        let d = skewsplat::harness::fit1d::Fit1dConfig::default();
        Fit1dSection {
            families: vec![
                "gaussian".into(),
                "skewnormal".into(),
                "halfgaussian".into(),
            ],
            seeds: (0..10).collect(),
            n_components: 4,
            iters: d.iters,
            bcd: d.bcd,
            pin_alpha: d.pin_alpha,
            n_samples: d.n_samples,
            lr_weight: d.lr_weight,
            lr_mu: d.lr_mu,
            lr_log_sigma: d.lr_log_sigma,
            lr_alpha: d.lr_alpha,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSceneSection {
    pub mode: String,
    pub n_prims: usize,
    pub iters: u64,
    /// Camera file; empty string means the built-in synthetic scene.
    pub cameras: String,
    /// Target images (.png or .f32), one per camera line.
    pub targets: Vec<String>,
    /// Image side length of the synthetic scene.
    pub size: usize,
    pub checkpoint_every: u64,
    pub init_scale: f64,
    pub init_opacity: f64,
    pub init_skew: f64,
    pub lr_skew: f64,
    pub noise_scale: f64,
}

impl Default for FitSceneSection {
    fn default() -> Self {
        let d = skewsplat::harness::scene_fit::SceneFitConfig::default();
        FitSceneSection {
            mode: "skewnormal".into(),
            n_prims: 64,
            iters: d.iters,
            cameras: String::new(),
            targets: Vec::new(),
            size: 64,
            checkpoint_every: 0,
            init_scale: d.init_scale,
            init_opacity: d.init_opacity,
            init_skew: d.init_skew,
            lr_skew: d.optim.lr_skew,
            noise_scale: d.optim.noise_scale,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub scene: String,
    pub cameras: String,
    pub background: [f64; 3],
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            scene: String::new(),
            cameras: String::new(),
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub suites: Vec<String>,
    pub samples: usize,
    pub grad_configs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let d = skewsplat::verify::VerifyOptions::default();
        VerifySection {
            suites: skewsplat::verify::SUITE_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            samples: d.samples,
            grad_configs: d.configs,
        }
    }
}

pub fn load_config(path: Option<&PathBuf>) -> Result<FileConfig, SplatError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| SplatError::Config(format!("{}:{}: {e}", path.display(), e.line())))
}

/// Creates the output directory (if needed) and returns it.
pub fn ensure_out_dir(dir: &Path) -> Result<(), SplatError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
