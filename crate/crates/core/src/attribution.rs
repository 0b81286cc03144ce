//! Attribution maps computed from a bundle and their weighted fusion.
//!
//! All maps live on the patch grid until the very end of [`explain`], where
//! the fused map is upsampled once to image resolution.

use serde::{Deserialize, Serialize};

use crate::anatomy::{AnatomicalRegion, Lexicon};
use crate::bundle::IntermediatesBundle;
use crate::error::{Error, Result};
use crate::grid::{minmax_normalize, upsample_bilinear, Grid};
use crate::prior::{build_prior, SpatialPriorMap};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_LAMBDA_C: f64 = 0.35;
pub const DEFAULT_DELTA: f64 = 0.2;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LAMBDA_S: f64 = 2.5;
/// Required value of `alpha + beta + delta` unless weights are declared free.
pub const FIXED_WEIGHT_SUM: f64 = 0.9;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Fusion coefficients. `gamma` is the consistency weight (lambda_c);
/// `tau` is the layer-weighting temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    #[serde(default)]
    pub free_weights: bool,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_LAMBDA_C,
            delta: DEFAULT_DELTA,
            tau: DEFAULT_TAU,
            free_weights: false,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidWeights(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidWeights(format!("tau must be finite, got {}", self.tau)));
        }
        let fixed = self.alpha + self.beta + self.delta;
        if !self.free_weights && (fixed - FIXED_WEIGHT_SUM).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!(
                "alpha + beta + delta must equal {FIXED_WEIGHT_SUM} (got {fixed}); pass free_weights to override"
            )));
        }
        Ok(())
    }

    /// Multiplies the four fusion coefficients by `k`; the result is marked free.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha: self.alpha * k,
            beta: self.beta * k,
            gamma: self.gamma * k,
            delta: self.delta * k,
            tau: self.tau,
            free_weights: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Grad,
    Flow,
    Consistency,
    Fused,
    PriorModulated,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Patch,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub kind: MapKind,
    pub resolution: Resolution,
    #[serde(flatten)]
    pub grid: Grid,
}

impl AttributionMap {
    pub fn new(kind: MapKind, resolution: Resolution, grid: Grid) -> Self {
        Self { kind, resolution, grid }
    }

    /// Min-max normalized copy.
    pub fn finalized(kind: MapKind, resolution: Resolution, raw: &Grid) -> Self {
        Self::new(kind, resolution, minmax_normalize(raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRelevance {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

/// Softmax over layer depth: `w_l = exp(tau * l) / sum_k exp(tau * k)`, `l = 1..=L`.
pub fn layer_weights(n_layers: usize, tau: f64) -> Vec<f64> {
    if n_layers == 0 {
        return Vec::new();
    }
    // exp(tau * l) shifted by the largest exponent.
    let peak = if tau >= 0.0 { tau * n_layers as f64 } else { tau };
    let raw: Vec<f64> = (1..=n_layers).map(|l| (tau * l as f64 - peak).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn patch_grid(bundle: &IntermediatesBundle, values: Vec<f64>) -> Grid {
    Grid {
        h: bundle.grid.h_patches,
        w: bundle.grid.w_patches,
        data: values,
    }
}

/// Layer-weighted sum of class-token attention, optionally reweighted per
/// layer by value-vector norms. Finalized to `[0, 1]`.
pub fn attention_flow(bundle: &IntermediatesBundle, tau: f64, use_value_weighting: bool) -> Result<AttributionMap> {
    bundle.ensure_valid()?;
    let value_norms = match (use_value_weighting, &bundle.value_norms) {
        (true, None) => return Err(Error::ValueNormsMissing),
        (true, Some(v)) => Some(v),
        (false, _) => None,
    };
    let n = bundle.n_patches();
    let weights = layer_weights(bundle.n_layers, tau);
    let mut flow = vec![0.0; n];
    for (l, &wl) in weights.iter().enumerate() {
        let attn = bundle.attn_cls.row(l);
        let row: Vec<f64> = match value_norms {
            Some(v) => {
                let weighted: Vec<f64> = attn.iter().zip(v.row(l)).map(|(&a, &m)| a as f64 * m as f64).collect();
                let total: f64 = weighted.iter().sum();
                if total > 0.0 {
                    weighted.into_iter().map(|x| x / total).collect()
                } else {
                    weighted
                }
            }
            None => attn.iter().map(|&a| a as f64).collect(),
        };
        for (acc, a) in flow.iter_mut().zip(row) {
            *acc += wl * a;
        }
    }
    Ok(AttributionMap::finalized(MapKind::Flow, Resolution::Patch, &patch_grid(bundle, flow)))
}

/// Per-patch gate `1 / (1 + sigma)` where sigma is the population standard
/// deviation of that patch's attention across layers. Not normalized.
pub fn consistency_map(bundle: &IntermediatesBundle) -> Result<AttributionMap> {
    bundle.ensure_valid()?;
    let n = bundle.n_patches();
    let l = bundle.n_layers as f64;
    let mut gate = Vec::with_capacity(n);
    for i in 0..n {
        let column = (0..bundle.n_layers).map(|layer| bundle.attn_cls.row(layer)[i] as f64);
        let mean = column.clone().sum::<f64>() / l;
        let var = column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / l;
        gate.push(1.0 / (1.0 + var.sqrt()));
    }
    Ok(AttributionMap::new(MapKind::Consistency, Resolution::Patch, patch_grid(bundle, gate)))
}

/// Raw per-patch gradient×activation, clamped at zero, before normalization.
pub fn gradient_relevance(bundle: &IntermediatesBundle) -> Result<Vec<f64>> {
    bundle.ensure_valid()?;
    Ok((0..bundle.n_patches())
        .map(|i| {
            let dot: f64 = bundle
                .grad_patch_embed
                .row(i)
                .iter()
                .zip(bundle.patch_embed.row(i))
                .map(|(&g, &e)| g as f64 * e as f64)
                .sum();
            dot.max(0.0)
        })
        .collect())
}

/// Gradient×activation saliency, finalized to `[0, 1]`.
pub fn gradient_attribution(bundle: &IntermediatesBundle) -> Result<AttributionMap> {
    let raw = gradient_relevance(bundle)?;
    Ok(AttributionMap::finalized(MapKind::Grad, Resolution::Patch, &patch_grid(bundle, raw)))
}

/// Unnormalized fusion
/// `alpha*G + beta*F + gamma*(C ⊙ G) + delta*(M ⊙ G)`.
pub fn fuse_raw(a_grad: &Grid, a_flow: &Grid, c_map: &Grid, prior: &Grid, w: &FusionWeights) -> Result<Grid> {
    w.validate()?;
    a_grad.ensure_same_dims(a_flow, "grad vs flow")?;
    a_grad.ensure_same_dims(c_map, "grad vs consistency")?;
    a_grad.ensure_same_dims(prior, "grad vs prior")?;
    let data = a_grad
        .data
        .iter()
        .zip(&a_flow.data)
        .zip(&c_map.data)
        .zip(&prior.data)
        .map(|(((&g, &f), &c), &m)| w.alpha * g + w.beta * f + w.gamma * (c * g) + w.delta * (m * g))
        .collect();
    Ok(Grid {
        h: a_grad.h,
        w: a_grad.w,
        data,
    })
}

/// Weighted fusion of the component maps, finalized to `[0, 1]`.
pub fn fuse(
    a_grad: &AttributionMap,
    a_flow: &AttributionMap,
    c_map: &AttributionMap,
    prior: &SpatialPriorMap,
    w: &FusionWeights,
) -> Result<AttributionMap> {
    let raw = fuse_raw(&a_grad.grid, &a_flow.grid, &c_map.grid, &prior.grid, w)?;
    Ok(AttributionMap::finalized(MapKind::Fused, a_grad.resolution, &raw))
}

/// Per-token relevance from the text branch: layer-weighted end-of-text
/// attention plus gradient magnitude, each min-max normalized, averaged, and
/// normalized again.
pub fn token_relevance(bundle: &IntermediatesBundle, tau: f64) -> Result<TokenRelevance> {
    let (Some(tokens), Some(attn), Some(grad)) = (&bundle.tokens, &bundle.attn_eos_text, &bundle.grad_token_embed) else {
        return Err(Error::TextTensorsMissing);
    };
    bundle.ensure_valid()?;
    let t = tokens.len();
    let weights = layer_weights(bundle.n_layers, tau);
    let mut flow = vec![0.0; t];
    for (l, &wl) in weights.iter().enumerate() {
        for (acc, &a) in flow.iter_mut().zip(attn.row(l)) {
            *acc += wl * a as f64;
        }
    }
    // Token embeddings are not exported; the gradient's own L1 magnitude stands in.
    let magnitude: Vec<f64> = (0..t)
        .map(|i| grad.row(i).iter().map(|&g| (g as f64).abs()).sum())
        .collect();
    let flow = minmax_normalize(&Grid { h: 1, w: t, data: flow });
    let magnitude = minmax_normalize(&Grid { h: 1, w: t, data: magnitude });
    let combined = Grid {
        h: 1,
        w: t,
        data: flow.data.iter().zip(&magnitude.data).map(|(f, g)| 0.5 * f + 0.5 * g).collect(),
    };
    Ok(TokenRelevance {
        tokens: tokens.clone(),
        scores: minmax_normalize(&combined).data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainParams {
    pub weights: FusionWeights,
    pub lambda_s: f64,
    pub value_weighting: bool,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            weights: FusionWeights::default(),
            lambda_s: DEFAULT_LAMBDA_S,
            value_weighting: false,
        }
    }
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Fused map at image resolution.
    pub map: AttributionMap,
    pub fused_patch: AttributionMap,
    pub grad: AttributionMap,
    pub flow: AttributionMap,
    pub consistency: AttributionMap,
    pub prior: SpatialPriorMap,
    pub regions: Vec<AnatomicalRegion>,
    pub tokens: Option<TokenRelevance>,
}

/// Runs the full pipeline with the built-in lexicon.
pub fn explain(bundle: &IntermediatesBundle, report_text: &str, params: &ExplainParams) -> Result<Explanation> {
    explain_with_lexicon(bundle, report_text, params, Lexicon::builtin())
}

pub fn explain_with_lexicon(
    bundle: &IntermediatesBundle,
    report_text: &str,
    params: &ExplainParams,
    lexicon: &Lexicon,
) -> Result<Explanation> {
    params.weights.validate()?;
    bundle.ensure_valid()?;
    let regions = lexicon.parse(report_text);
    let prior = build_prior(&regions, params.lambda_s, bundle.grid.h_patches, bundle.grid.w_patches)?;
    let flow = attention_flow(bundle, params.weights.tau, params.value_weighting)?;
    let consistency = consistency_map(bundle)?;
    let grad = gradient_attribution(bundle)?;
    let fused_patch = fuse(&grad, &flow, &consistency, &prior, &params.weights)?;
    let pixel = upsample_bilinear(&fused_patch.grid, bundle.image.height_px, bundle.image.width_px)?;
    let tokens = if bundle.has_text() {
        Some(token_relevance(bundle, params.weights.tau)?)
    } else {
        None
    };
    Ok(Explanation {
        map: AttributionMap::new(MapKind::Fused, Resolution::Pixel, pixel),
        fused_patch,
        grad,
        flow,
        consistency,
        prior,
        regions,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layer_weight_examples() {
        let w = layer_weights(3, 0.0);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = layer_weights(2, 2f64.ln());
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        let w = layer_weights(12, 0.5);
        assert!(w.windows(2).all(|p| p[1] > p[0]));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Default temperature gives the last of 12 layers roughly 39% of the weight.
        assert!((w[11] - 0.3945).abs() < 1e-3);
    }

    #[test]
    fn layer_weights_survive_extreme_temperatures() {
        let w = layer_weights(64, 500.0);
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w[63] - 1.0).abs() < 1e-12);
        let w = layer_weights(64, -500.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_weights_valid_and_sum_enforced() {
        FusionWeights::default().validate().unwrap();
        let mut w = FusionWeights::default();
        w.alpha = 0.6;
        assert!(matches!(w.validate(), Err(Error::InvalidWeights(_))));
        w.free_weights = true;
        w.validate().unwrap();
        w.beta = -0.1;
        assert!(matches!(w.validate(), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn fuse_rejects_mismatched_dims() {
        let a = Grid::filled(2, 2, 0.5);
        let b = Grid::filled(2, 3, 0.5);
        let r = fuse_raw(&a, &b, &a, &a, &FusionWeights::default());
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn identity_fusion_returns_grad() {
        let g = Grid::new(2, 2, vec![0.0, 0.2, 1.0, 0.4]).unwrap();
        let f = Grid::new(2, 2, vec![1.0, 0.0, 0.3, 0.2]).unwrap();
        let w = FusionWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            tau: 0.5,
            free_weights: true,
        };
        let grad = AttributionMap::new(MapKind::Grad, Resolution::Patch, g.clone());
        let flow = AttributionMap::new(MapKind::Flow, Resolution::Patch, f);
        let c = AttributionMap::new(MapKind::Consistency, Resolution::Patch, Grid::filled(2, 2, 0.7));
        let prior = build_prior(&[], 2.0, 2, 2).unwrap();
        assert_eq!(fuse(&grad, &flow, &c, &prior, &w).unwrap().grid, g);
    }

    #[test]
    fn neutral_gates_collapse_to_grad() {
        let g = Grid::new(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        let grad = AttributionMap::new(MapKind::Grad, Resolution::Patch, g.clone());
        let flow = AttributionMap::new(MapKind::Flow, Resolution::Patch, Grid::filled(1, 3, 0.9));
        let c = AttributionMap::new(MapKind::Consistency, Resolution::Patch, Grid::filled(1, 3, 1.0));
        let prior = build_prior(&[], 1.0, 1, 3).unwrap();
        let mut w = FusionWeights::default();
        w.beta = 0.0;
        w.free_weights = true;
        let out = fuse(&grad, &flow, &c, &prior, &w).unwrap();
        for (a, b) in out.grid.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn layer_weights_properties(l in 1usize..=64, tau in -2.0f64..2.0) {
            let w = layer_weights(l, tau);
            prop_assert_eq!(w.len(), l);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if tau > 1e-9 {
                prop_assert!(w.windows(2).all(|p| p[1] > p[0]));
            } else if tau < -1e-9 {
                prop_assert!(w.windows(2).all(|p| p[1] < p[0]));
            }
        }
    }
}
