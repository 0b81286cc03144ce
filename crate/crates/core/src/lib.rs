//! Attribution engine for vision-language similarity scores.
//!
//! The engine consumes an [`IntermediatesBundle`] (class-token attention,
//! patch embeddings and their gradients, exported by a model runtime) plus the
//! report text, and produces a fused patch attribution map. Anatomical phrases
//! in the report become a soft spatial prior that up-weights the named lung
//! regions.
//!
//! ```
//! use matex_core::{explain, ExplainParams};
//! use matex_core::eval::mock_bundle;
//!
//! let bundle = mock_bundle(7, 12, 7, 7, 32);
//! let out = explain(&bundle, "left base opacity", &ExplainParams::default()).unwrap();
//! assert_eq!((out.map.grid.h, out.map.grid.w), (224, 224));
//! assert_eq!(out.regions[0].label, "left_base");
//! ```

pub mod anatomy;
pub mod attribution;
pub mod bundle;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod grid;
pub mod prior;
pub mod render;

pub use anatomy::{normalize_text, parse_regions, AnatomicalRegion, Lexicon, Span};
pub use attribution::{
    attention_flow, consistency_map, explain, explain_with_lexicon, fuse, fuse_raw, gradient_attribution,
    layer_weights, token_relevance, AttributionMap, ExplainParams, Explanation, FusionWeights, MapKind, Resolution,
    TokenRelevance,
};
pub use bundle::{load_bundle, save_bundle, validate_bundle, IntermediatesBundle, Tensor, ValidationReport};
pub use error::{Error, Result};
pub use grid::{minmax_normalize, upsample_bilinear, Grid};
pub use prior::{build_prior, SpatialPriorMap};
pub use render::{colorize_overlay, render_tokens, write_image, OverlayConfig};
