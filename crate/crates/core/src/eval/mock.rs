//! Deterministic linear mock model.
//!
//! The image score is `S = sum_i sum_c W[i,c] * E[i,c]` over patch embeddings
//! `E`, so `dS/dE = W` exactly and gradient×activation recovers each patch's
//! true contribution. The text branch gates that score by
//! `g = sum_t sum_c V[t,c] * G[t,c]` over ±1 token embeddings `G`, with `V`
//! chosen so token `t` contributes a positive weight `omega_t` and `g = 1` for
//! the unmasked text.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::{ImageInfo, IntermediatesBundle, PatchGrid, Tensor};

/// Model id recorded in mock bundles.
pub const MOCK_MODEL_ID: &str = "mock-linear";
/// Extra bundle tensor holding the mock text scorer's per-token weights.
pub const MOCK_TOKEN_WEIGHTS: &str = "mock_token_weights";
/// Pixels per patch side in mock bundles.
pub const MOCK_PATCH_PX: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    pub n_layers: usize,
    pub h_patches: usize,
    pub w_patches: usize,
    pub channels: usize,
    /// Report text; when set, the bundle carries text-branch tensors.
    pub text: Option<String>,
    /// Normalized `(x, y)` center of the relevant blob; seeded when `None`.
    pub lesion: Option<(f64, f64)>,
}

impl MockConfig {
    pub fn new(seed: u64, n_layers: usize, h_patches: usize, w_patches: usize, channels: usize) -> Self {
        Self {
            seed,
            n_layers,
            h_patches,
            w_patches,
            channels,
            text: None,
            lesion: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_lesion(mut self, x: f64, y: f64) -> Self {
        self.lesion = Some((x, y));
        self
    }
}

#[derive(Debug, Clone)]
pub struct MockText {
    pub tokens: Vec<String>,
    /// `[T, C]`, entries ±1.
    pub embeddings: Vec<f64>,
    /// `[T, C]` text scorer weights.
    pub weights: Vec<f64>,
    /// Per-token contribution to the gate; positive, sums to 1.
    pub omega: Vec<f64>,
    pub dominant: usize,
}

/// The seeded model plus the tensors it exports.
#[derive(Debug, Clone)]
pub struct MockModel {
    pub config: MockConfig,
    /// `[N, C]` scorer weights, already rounded through `f32`.
    pub weights: Vec<f64>,
    /// `[N, C]` patch embeddings, already rounded through `f32`.
    pub embeddings: Vec<f64>,
    /// Per-patch signed relevance used to build the weights.
    pub relevance: Vec<f64>,
    pub text: Option<MockText>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// `sum_{i not masked} sum_c W[i,c] * E[i,c]`, accumulated in a fixed order.
pub(crate) fn linear_score(weights: &[f32], embeddings: &[f32], channels: usize, masked: Option<&[bool]>) -> f64 {
    let n = weights.len() / channels;
    let mut total = 0.0;
    for i in 0..n {
        if masked.is_some_and(|m| m[i]) {
            continue;
        }
        let row = i * channels..(i + 1) * channels;
        for (&w, &e) in weights[row.clone()].iter().zip(&embeddings[row]) {
            total += w as f64 * e as f64;
        }
    }
    total
}

impl MockModel {
    pub fn generate(config: &MockConfig) -> Self {
        assert!(
            config.n_layers >= 1 && config.h_patches >= 1 && config.w_patches >= 1 && config.channels >= 1,
            "mock dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, w, c) = (config.h_patches, config.w_patches, config.channels);
        let n = h * w;

        let embeddings: Vec<f64> = (0..n * c)
            .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
            .collect();

        let (cx, cy) = match config.lesion {
            Some(p) => p,
            None => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        };
        let sigma = 0.2f64;
        let relevance: Vec<f64> = (0..n)
            .map(|i| {
                let x = ((i % w) as f64 + 0.5) / w as f64;
                let y = ((i / w) as f64 + 0.5) / h as f64;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let blob = 1.2 * (-d2 / (2.0 * sigma * sigma)).exp() + 0.1;
                if rng.random_bool(0.15) {
                    -rng.random_range(0.2..0.6)
                } else {
                    blob
                }
            })
            .collect();

        let weights: Vec<f64> = (0..n * c)
            .map(|k| {
                let noise: f64 = rng.sample(StandardNormal);
                round_f32((relevance[k / c] * embeddings[k] + 0.3 * noise) / c as f64)
            })
            .collect();

        let text = config.text.as_deref().and_then(|t| {
            let tokens: Vec<String> = t.split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return None;
            }
            let n_tok = tokens.len();
            let dominant = rng.random_range(0..n_tok);
            let mut omega: Vec<f64> = (0..n_tok).map(|_| rng.random_range(0.2..1.0)).collect();
            omega[dominant] = 3.0;
            let total: f64 = omega.iter().sum();
            omega.iter_mut().for_each(|v| *v /= total);
            let embeddings: Vec<f64> = (0..n_tok * c)
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let weights = (0..n_tok * c)
                .map(|k| omega[k / c] * embeddings[k] / c as f64)
                .collect();
            Some(MockText {
                tokens,
                embeddings,
                weights,
                omega,
                dominant,
            })
        });

        Self {
            config: config.clone(),
            weights,
            embeddings,
            relevance,
            text,
        }
    }

    /// Image-branch score for arbitrary patch embeddings (`[N, C]`, f64).
    pub fn image_score(&self, embeddings: &[f64]) -> f64 {
        self.weights.iter().zip(embeddings).map(|(w, e)| w * e).sum()
    }

    /// Text gate for arbitrary token embeddings (`[T, C]`); 1 when there is no text.
    pub fn text_gate(&self, token_embeddings: &[f64]) -> f64 {
        match &self.text {
            Some(t) => t.weights.iter().zip(token_embeddings).map(|(v, g)| v * g).sum(),
            None => 1.0,
        }
    }

    /// Full differentiable score `S(E, G) = image_score(E) * text_gate(G)`.
    pub fn score(&self, embeddings: &[f64], token_embeddings: Option<&[f64]>) -> f64 {
        let gate = token_embeddings.map_or(1.0, |g| self.text_gate(g));
        self.image_score(embeddings) * gate
    }

    pub fn bundle(&self) -> IntermediatesBundle {
        let cfg = &self.config;
        let (l, h, w, c) = (cfg.n_layers, cfg.h_patches, cfg.w_patches, cfg.channels);
        let n = h * w;
        // Independent stream for attention so the scorer stays fixed per seed.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

        let mut attn = Vec::with_capacity(l * n);
        for layer in 0..l {
            let depth = (layer + 1) as f64 / l as f64;
            let row: Vec<f64> = (0..n)
                .map(|i| {
                    let noise: f64 = rng.random_range(0.05..1.0);
                    let focus = self.relevance[i].max(0.0) + 0.05;
                    (1.0 - depth) * noise + depth * focus * rng.random_range(0.5..1.5)
                })
                .collect();
            let total: f64 = row.iter().sum();
            attn.extend(row.into_iter().map(|v| (v / total) as f32));
        }
        let value_norms: Vec<f32> = (0..l * n).map(|_| rng.random_range(0.5f32..1.5)).collect();

        let weights_f32: Vec<f32> = self.weights.iter().map(|&v| v as f32).collect();
        let embed_f32: Vec<f32> = self.embeddings.iter().map(|&v| v as f32).collect();
        let score = linear_score(&weights_f32, &embed_f32, c, None);

        let mut extra = BTreeMap::new();
        let (tokens, attn_eos_text, grad_token_embed) = match &self.text {
            Some(t) => {
                let n_tok = t.tokens.len();
                let mut text_attn = Vec::with_capacity(l * n_tok);
                for _ in 0..l {
                    let row: Vec<f64> = (0..n_tok)
                        .map(|k| {
                            let base: f64 = rng.random_range(0.05..1.0);
                            if k == t.dominant {
                                base + 4.0
                            } else {
                                base
                            }
                        })
                        .collect();
                    let total: f64 = row.iter().sum();
                    text_attn.extend(row.into_iter().map(|v| (v / total) as f32));
                }
                let grad: Vec<f32> = t.weights.iter().map(|&v| (score * v) as f32).collect();
                extra.insert(
                    MOCK_TOKEN_WEIGHTS.to_string(),
                    Tensor::new(vec![n_tok], t.omega.iter().map(|&v| v as f32).collect()).expect("shape"),
                );
                (
                    Some(t.tokens.clone()),
                    Some(Tensor::new(vec![l, n_tok], text_attn).expect("shape")),
                    Some(Tensor::new(vec![n_tok, c], grad).expect("shape")),
                )
            }
            None => (None, None, None),
        };

        IntermediatesBundle {
            model_id: MOCK_MODEL_ID.to_string(),
            image: ImageInfo {
                path: None,
                height_px: h * MOCK_PATCH_PX,
                width_px: w * MOCK_PATCH_PX,
            },
            text: cfg.text.clone().unwrap_or_default(),
            grid: PatchGrid {
                h_patches: h,
                w_patches: w,
            },
            n_layers: l,
            n_heads: 12,
            channel_dim: c,
            key_dim: 64,
            score,
            attn_normalized: true,
            attn_cls: Tensor::new(vec![l, n], attn).expect("shape"),
            patch_embed: Tensor::new(vec![n, c], embed_f32).expect("shape"),
            grad_patch_embed: Tensor::new(vec![n, c], weights_f32).expect("shape"),
            value_norms: Some(Tensor::new(vec![l, n], value_norms).expect("shape")),
            tokens,
            attn_eos_text,
            grad_token_embed,
            extra,
        }
    }
}

/// Bundle whose only informative tensor is the given `[L][h*w]` attention;
/// embeddings and gradients are all ones. Rows are not required to sum to 1.
pub fn attention_bundle(attn: &[Vec<f64>], h: usize, w: usize) -> IntermediatesBundle {
    let l = attn.len();
    let n = h * w;
    assert!(l >= 1 && n >= 1 && attn.iter().all(|r| r.len() == n), "attention must be [L][h*w]");
    let data = attn.iter().flatten().map(|&v| v as f32).collect();
    IntermediatesBundle {
        model_id: "synthetic".to_string(),
        image: ImageInfo {
            path: None,
            height_px: h,
            width_px: w,
        },
        text: String::new(),
        grid: PatchGrid {
            h_patches: h,
            w_patches: w,
        },
        n_layers: l,
        n_heads: 1,
        channel_dim: 1,
        key_dim: 1,
        score: n as f64,
        attn_normalized: false,
        attn_cls: Tensor::new(vec![l, n], data).expect("shape"),
        patch_embed: Tensor::new(vec![n, 1], vec![1.0; n]).expect("shape"),
        grad_patch_embed: Tensor::new(vec![n, 1], vec![1.0; n]).expect("shape"),
        value_norms: None,
        tokens: None,
        attn_eos_text: None,
        grad_token_embed: None,
        extra: BTreeMap::new(),
    }
}

/// Seeded image-only mock bundle.
pub fn mock_bundle(seed: u64, n_layers: usize, h: usize, w: usize, channels: usize) -> IntermediatesBundle {
    MockModel::generate(&MockConfig::new(seed, n_layers, h, w, channels)).bundle()
}
