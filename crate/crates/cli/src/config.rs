//! Run configuration: one JSON file whose sections are overridden by command-line flags.

use std::path::Path;

use anyhow::Context;
use magvec::approx::{Method, PatchConfig};
use magvec::dataset::SyntheticConfig;
use magvec::learn::TrainConfig;
use magvec::topo::DEFAULT_LEVELS;
use magvec::PadMode;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Patch and metric settings for `mag`.
    pub patch: PatchConfig,
    pub mag: MagSettings,
    pub analytic: AnalyticSettings,
    pub edges: EdgeSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub topo: TopoSettings,
    pub bench: BenchSettings,
    pub synth: SyntheticConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(magvec::Error::from).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagSettings {
    pub method: String,
}

impl Default for MagSettings {
    fn default() -> Self {
        Self {
            method: Method::Dense.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticSettings {
    pub points_per_unit: usize,
}

impl Default for AnalyticSettings {
    fn default() -> Self {
        Self { points_per_unit: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSettings {
    pub method: String,
    pub blur: usize,
    pub low: f64,
    pub high: f64,
    pub sobel_size: usize,
    pub patch: PatchConfig,
}

impl Default for EdgeSettings {
    fn default() -> Self {
        Self {
            method: "magnitude".into(),
            blur: magvec::edges::BLUR_SIZE,
            low: 0.1,
            high: 0.3,
            sobel_size: 3,
            patch: PatchConfig::edges(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub thresholds: usize,
    /// Matching radius in pixels; `None` uses the per-image default.
    pub tol: Option<f64>,
    pub nms: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: magvec::eval::DEFAULT_THRESHOLDS,
            tol: None,
            nms: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoSettings {
    pub levels: usize,
}

impl Default for TopoSettings {
    fn default() -> Self {
        Self { levels: DEFAULT_LEVELS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub patch_sizes: Vec<usize>,
    pub overlap: usize,
    pub repeats: usize,
    /// Images are resized to `size x size` before solving.
    pub size: usize,
    pub methods: Vec<String>,
    pub pad: PadMode,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            patch_sizes: vec![10, 25],
            overlap: 2,
            repeats: 3,
            size: 200,
            methods: ["dense", "patched", "indep", "rank1"].map(String::from).to_vec(),
            pad: PadMode::Truncate,
        }
    }
}
