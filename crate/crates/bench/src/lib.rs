//! Shared inputs for the criterion benchmarks.

use matex_core::eval::{MockConfig, MockModel};
use matex_core::IntermediatesBundle;

pub const REPORT: &str = "Bilateral lower lobe consolidation";

/// Mock bundle on an `h`x`h` patch grid with 12 layers, 32 channels and text.
pub fn bundle(h: usize) -> IntermediatesBundle {
    MockModel::generate(&MockConfig::new(7, 12, h, h, 32).with_text(REPORT)).bundle()
}
