//! Perturbation and localization evaluation, with a mock model so the whole
//! harness runs without a model runtime.

pub mod metrics;
pub mod mock;
pub mod oracle;
pub mod run;

pub use metrics::{
    confidence_drop, confidence_increase, mask_count, mask_patches, mass_in_box, pointing_game, random_indices, select_indices,
    token_confidence_metrics, GroundTruthBox, MaskMode, TokenMetrics,
};
pub use mock::{attention_bundle, mock_bundle, MockConfig, MockModel, MOCK_MODEL_ID, MOCK_TOKEN_WEIGHTS};
pub use oracle::{mock_oracle, serve_mock_oracle, Fill, Mask, MockOracle, ScoreOracle, SubprocessOracle};
pub use run::{
    run_eval, write_mock_dataset, write_report, DatasetManifest, DatasetSample, EvalConfig, EvalReport,
    MockDatasetConfig, SampleRecord,
};
