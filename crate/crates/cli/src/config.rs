//! Parameter resolution: built-in defaults, then a JSON config file, then flags.

use std::path::Path;

use clap::Args;
use matex_core::attribution::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DELTA, DEFAULT_LAMBDA_C, DEFAULT_LAMBDA_S, DEFAULT_TAU};
use matex_core::{ExplainParams, FusionWeights};
use serde::Deserialize;

use crate::Invalid;

/// Keys accepted in a `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_c: Option<f64>,
    pub delta: Option<f64>,
    pub tau: Option<f64>,
    pub lambda_s: Option<f64>,
    pub free_weights: Option<bool>,
    pub value_weighting: Option<bool>,
    pub fraction: Option<f64>,
    pub jobs: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub oracle_cmd: Option<String>,
    pub fill: Option<String>,
    pub overlay_alpha: Option<f64>,
    pub threshold: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Invalid> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Args)]
pub struct FusionArgs {
    /// JSON config file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Layer-weighting temperature [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Spatial prior strength, >= 1 [default: 2.5]
    #[arg(long = "lambda-s")]
    pub lambda_s: Option<f64>,
    /// Consistency weight (gamma) [default: 0.35]
    #[arg(long = "lambda-c")]
    pub lambda_c: Option<f64>,
    /// Gradient weight [default: 0.5]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attention-flow weight [default: 0.2]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Prior-modulated gradient weight [default: 0.2]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Allow alpha + beta + delta to differ from 0.9
    #[arg(long)]
    pub free_weights: bool,
    /// Reweight attention rows by value-vector norms
    #[arg(long)]
    pub value_weighting: bool,
}

impl FusionArgs {
    pub fn resolve(&self, file: &ConfigFile) -> Result<ExplainParams, Invalid> {
        let pick = |flag: Option<f64>, from_file: Option<f64>, default: f64| flag.or(from_file).unwrap_or(default);
        let params = ExplainParams {
            weights: FusionWeights {
                alpha: pick(self.alpha, file.alpha, DEFAULT_ALPHA),
                beta: pick(self.beta, file.beta, DEFAULT_BETA),
                gamma: pick(self.lambda_c, file.lambda_c, DEFAULT_LAMBDA_C),
                delta: pick(self.delta, file.delta, DEFAULT_DELTA),
                tau: pick(self.tau, file.tau, DEFAULT_TAU),
                free_weights: self.free_weights || file.free_weights.unwrap_or(false),
            },
            lambda_s: pick(self.lambda_s, file.lambda_s, DEFAULT_LAMBDA_S),
            value_weighting: self.value_weighting || file.value_weighting.unwrap_or(false),
        };
        params.weights.validate().map_err(|e| Invalid(e.to_string()))?;
        if !(params.lambda_s >= 1.0 && params.lambda_s.is_finite()) {
            return Err(Invalid(format!("--lambda-s must be >= 1, got {}", params.lambda_s)));
        }
        Ok(params)
    }
}
