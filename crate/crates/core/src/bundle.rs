//! On-disk bundle of model intermediates.
//!
//! A bundle directory holds a `manifest.json` plus one raw tensor file per
//! tensor. Tensor payloads are little-endian `f32`, row-major, with no header;
//! the manifest records each tensor's file and shape. This is the only contract
//! between the engine and whatever framework produced the intermediates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Tolerance on per-layer attention row sums when rows claim to be normalized.
pub const ATTN_ROW_SUM_TOLERANCE: f64 = 0.05;

pub const ATTN_CLS: &str = "attn_cls";
pub const PATCH_EMBED: &str = "patch_embed";
pub const GRAD_PATCH_EMBED: &str = "grad_patch_embed";
pub const VALUE_NORMS: &str = "value_norms";
pub const ATTN_EOS_TEXT: &str = "attn_eos_text";
pub const GRAD_TOKEN_EMBED: &str = "grad_token_embed";

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DimensionMismatch(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    RowMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    #[default]
    Little,
}

/// Manifest entry describing one tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub endianness: Endianness,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub height_px: usize,
    pub width_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h_patches: usize,
    pub w_patches: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.h_patches * self.w_patches
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub model_id: String,
    pub image: ImageInfo,
    pub text: String,
    pub grid: PatchGrid,
    pub n_layers: usize,
    pub n_heads: usize,
    pub channel_dim: usize,
    pub key_dim: usize,
    pub score: f64,
    #[serde(default = "default_true")]
    pub attn_normalized: bool,
    pub tensors: BTreeMap<String, TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

/// All model-side tensors for one (image, text) pair.
///
/// `attn_cls` is `[L, N]` head-averaged class-token attention over patches,
/// `patch_embed` and `grad_patch_embed` are `[N, C]`. The three text-branch
/// fields are present together or not at all.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediatesBundle {
    pub model_id: String,
    pub image: ImageInfo,
    pub text: String,
    pub grid: PatchGrid,
    pub n_layers: usize,
    pub n_heads: usize,
    pub channel_dim: usize,
    pub key_dim: usize,
    pub score: f64,
    pub attn_normalized: bool,
    pub attn_cls: Tensor,
    pub patch_embed: Tensor,
    pub grad_patch_embed: Tensor,
    pub value_norms: Option<Tensor>,
    pub tokens: Option<Vec<String>>,
    pub attn_eos_text: Option<Tensor>,
    pub grad_token_embed: Option<Tensor>,
    /// Tensors the engine does not interpret; preserved across save/load.
    pub extra: BTreeMap<String, Tensor>,
}

impl IntermediatesBundle {
    pub fn n_patches(&self) -> usize {
        self.grid.n_patches()
    }

    pub fn has_text(&self) -> bool {
        self.tokens.is_some() && self.attn_eos_text.is_some() && self.grad_token_embed.is_some()
    }

    /// Errors with `InvalidBundle` if validation reports any error-severity finding.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_bundle(self);
        let first = report.errors().next().map(|f| format!("{}: {}", f.code, f.message));
        match first {
            None => Ok(()),
            Some(msg) => Err(Error::InvalidBundle(msg)),
        }
    }

    fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut out = vec![
            (ATTN_CLS, &self.attn_cls),
            (PATCH_EMBED, &self.patch_embed),
            (GRAD_PATCH_EMBED, &self.grad_patch_embed),
        ];
        if let Some(t) = &self.value_norms {
            out.push((VALUE_NORMS, t));
        }
        if let Some(t) = &self.attn_eos_text {
            out.push((ATTN_EOS_TEXT, t));
        }
        if let Some(t) = &self.grad_token_embed {
            out.push((GRAD_TOKEN_EMBED, t));
        }
        for (name, t) in &self.extra {
            out.push((name.as_str(), t));
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorSpec {
                        file: format!("{name}.bin"),
                        dtype: DType::F32,
                        shape: t.shape.clone(),
                        layout: Layout::RowMajor,
                        endianness: Endianness::Little,
                    },
                )
            })
            .collect();
        Manifest {
            manifest_version: MANIFEST_VERSION,
            model_id: self.model_id.clone(),
            image: self.image.clone(),
            text: self.text.clone(),
            grid: self.grid,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            channel_dim: self.channel_dim,
            key_dim: self.key_dim,
            score: self.score,
            attn_normalized: self.attn_normalized,
            tensors,
            tokens: self.tokens.clone(),
        }
    }
}

fn check_relative(name: &str, file: &str) -> Result<()> {
    let p = Path::new(file);
    let ok = !file.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidManifest(format!(
            "tensor `{name}` file `{file}` must be a relative path inside the bundle"
        )))
    }
}

fn read_tensor(dir: &Path, name: &str, spec: &TensorSpec) -> Result<Tensor> {
    check_relative(name, &spec.file)?;
    if spec.shape.is_empty() || spec.shape.contains(&0) {
        return Err(Error::InvalidManifest(format!(
            "tensor `{name}` has invalid shape {:?}",
            spec.shape
        )));
    }
    let path = dir.join(&spec.file);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingTensorFile(name.to_string()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let numel = spec
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidManifest(format!("tensor `{name}` shape overflows")))?;
    let expected = numel * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteTensor(name.to_string()));
    }
    Ok(Tensor {
        shape: spec.shape.clone(),
        data,
    })
}

/// Reads and materializes a bundle directory, checking every tensor file
/// against its manifest entry.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<IntermediatesBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = match std::fs::read(&manifest_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingManifest(dir.to_path_buf()))
        }
        Err(e) => return Err(Error::io(manifest_path, e)),
    };
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::InvalidManifest(e.to_string()))?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(Error::InvalidManifest(format!(
            "unsupported manifest_version {}",
            manifest.manifest_version
        )));
    }

    let mut tensors = BTreeMap::new();
    for (name, spec) in &manifest.tensors {
        tensors.insert(name.clone(), read_tensor(dir, name, spec)?);
    }
    let mut take_required = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensorFile(name.to_string()))
    };
    let attn_cls = take_required(ATTN_CLS)?;
    let patch_embed = take_required(PATCH_EMBED)?;
    let grad_patch_embed = take_required(GRAD_PATCH_EMBED)?;
    let value_norms = tensors.remove(VALUE_NORMS);
    let attn_eos_text = tensors.remove(ATTN_EOS_TEXT);
    let grad_token_embed = tensors.remove(GRAD_TOKEN_EMBED);

    Ok(IntermediatesBundle {
        model_id: manifest.model_id,
        image: manifest.image,
        text: manifest.text,
        grid: manifest.grid,
        n_layers: manifest.n_layers,
        n_heads: manifest.n_heads,
        channel_dim: manifest.channel_dim,
        key_dim: manifest.key_dim,
        score: manifest.score,
        attn_normalized: manifest.attn_normalized,
        attn_cls,
        patch_embed,
        grad_patch_embed,
        value_norms,
        tokens: manifest.tokens,
        attn_eos_text,
        grad_token_embed,
        extra: tensors,
    })
}

/// Writes the bundle to `dir`, creating it if needed. Each file is written
/// atomically; the manifest goes last.
pub fn save_bundle(bundle: &IntermediatesBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = bundle.manifest();
    for (name, tensor) in bundle.named_tensors() {
        let spec = &manifest.tensors[name];
        fsutil::atomic_write(&dir.join(&spec.file), &tensor.to_le_bytes())?;
    }
    fsutil::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev} {}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    fn push(&mut self, severity: Severity, code: &str, message: impl Into<String>) {
        self.findings.push(Finding {
            severity,
            code: code.to_string(),
            message: message.into(),
        });
    }
}

pub mod codes {
    pub const EMPTY_SHAPE: &str = "EMPTY_SHAPE";
    pub const DATA_LENGTH: &str = "DATA_LENGTH";
    pub const NON_FINITE: &str = "NON_FINITE";
    pub const INVALID_METADATA: &str = "INVALID_METADATA";
    pub const SHAPE_MISMATCH: &str = "SHAPE_MISMATCH";
    pub const LAYER_COUNT_MISMATCH: &str = "LAYER_COUNT_MISMATCH";
    pub const PATCH_COUNT_MISMATCH: &str = "PATCH_COUNT_MISMATCH";
    pub const NEGATIVE_ATTENTION: &str = "NEGATIVE_ATTENTION";
    pub const ROW_SUM_OUT_OF_RANGE: &str = "ROW_SUM_OUT_OF_RANGE";
    pub const TEXT_TENSORS_PARTIAL: &str = "TEXT_TENSORS_PARTIAL";
    pub const TOKEN_COUNT_MISMATCH: &str = "TOKEN_COUNT_MISMATCH";
}

/// Checks every bundle invariant and returns the findings; never fails.
pub fn validate_bundle(bundle: &IntermediatesBundle) -> ValidationReport {
    use codes::*;
    let mut report = ValidationReport::default();

    let mut structurally_sound = true;
    for (name, t) in bundle.named_tensors() {
        if t.shape.is_empty() || t.shape.contains(&0) {
            report.push(Severity::Error, EMPTY_SHAPE, format!("tensor `{name}` has shape {:?}", t.shape));
            structurally_sound = false;
        } else if t.numel() != t.data.len() {
            report.push(
                Severity::Error,
                DATA_LENGTH,
                format!("tensor `{name}` has {} values for shape {:?}", t.data.len(), t.shape),
            );
            structurally_sound = false;
        }
        if !t.is_finite() {
            report.push(Severity::Error, NON_FINITE, format!("tensor `{name}` contains NaN/Inf"));
        }
    }
    if !bundle.score.is_finite() {
        report.push(Severity::Error, NON_FINITE, "score is not finite");
    }
    for (field, v) in [
        ("n_layers", bundle.n_layers),
        ("n_heads", bundle.n_heads),
        ("channel_dim", bundle.channel_dim),
        ("key_dim", bundle.key_dim),
        ("grid.h_patches", bundle.grid.h_patches),
        ("grid.w_patches", bundle.grid.w_patches),
        ("image.height_px", bundle.image.height_px),
        ("image.width_px", bundle.image.width_px),
    ] {
        if v == 0 {
            report.push(Severity::Error, INVALID_METADATA, format!("{field} must be positive"));
        }
    }
    if !structurally_sound {
        return report;
    }

    let n = bundle.n_patches();
    let l = bundle.n_layers;
    let c = bundle.channel_dim;

    match bundle.attn_cls.dims2() {
        Some((rows, cols)) => {
            if rows != l {
                report.push(
                    Severity::Error,
                    LAYER_COUNT_MISMATCH,
                    format!("attn_cls has {rows} layers, manifest says n_layers = {l}"),
                );
            }
            if cols != n {
                report.push(
                    Severity::Error,
                    PATCH_COUNT_MISMATCH,
                    format!(
                        "attn_cls covers {cols} patches, grid {}x{} has {n}",
                        bundle.grid.h_patches, bundle.grid.w_patches
                    ),
                );
            }
            for layer in 0..rows {
                let row = bundle.attn_cls.row(layer);
                if row.iter().any(|&v| v < 0.0) {
                    report.push(
                        Severity::Error,
                        NEGATIVE_ATTENTION,
                        format!("attn_cls layer {layer} has negative weights"),
                    );
                }
                if bundle.attn_normalized {
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ATTN_ROW_SUM_TOLERANCE {
                        report.push(
                            Severity::Warning,
                            ROW_SUM_OUT_OF_RANGE,
                            format!("attn_cls layer {layer} sums to {sum:.6}, expected 1 ± {ATTN_ROW_SUM_TOLERANCE}"),
                        );
                    }
                }
            }
        }
        None => report.push(
            Severity::Error,
            SHAPE_MISMATCH,
            format!("attn_cls must be rank 2, got shape {:?}", bundle.attn_cls.shape),
        ),
    }

    for (name, t) in [(PATCH_EMBED, &bundle.patch_embed), (GRAD_PATCH_EMBED, &bundle.grad_patch_embed)] {
        if t.shape != [n, c] {
            let code = if t.dims2().is_some_and(|(rows, cols)| rows != n && cols == c) {
                PATCH_COUNT_MISMATCH
            } else {
                SHAPE_MISMATCH
            };
            report.push(
                Severity::Error,
                code,
                format!("{name} has shape {:?}, expected [{n}, {c}]", t.shape),
            );
        }
    }

    if let Some(v) = &bundle.value_norms {
        if v.shape != [l, n] {
            report.push(
                Severity::Error,
                SHAPE_MISMATCH,
                format!("value_norms has shape {:?}, expected [{l}, {n}]", v.shape),
            );
        }
    }

    let present = [
        bundle.tokens.is_some(),
        bundle.attn_eos_text.is_some(),
        bundle.grad_token_embed.is_some(),
    ];
    if present.iter().any(|&p| p) && !present.iter().all(|&p| p) {
        report.push(
            Severity::Error,
            TEXT_TENSORS_PARTIAL,
            "tokens, attn_eos_text and grad_token_embed must be present together",
        );
    }
    if let (Some(tokens), Some(attn), Some(grad)) =
        (&bundle.tokens, &bundle.attn_eos_text, &bundle.grad_token_embed)
    {
        let t = tokens.len();
        match attn.dims2() {
            Some((rows, cols)) => {
                if rows != l {
                    report.push(
                        Severity::Error,
                        LAYER_COUNT_MISMATCH,
                        format!("attn_eos_text has {rows} layers, manifest says {l}"),
                    );
                }
                if cols != t {
                    report.push(
                        Severity::Error,
                        TOKEN_COUNT_MISMATCH,
                        format!("attn_eos_text covers {cols} tokens, text has {t}"),
                    );
                }
            }
            None => report.push(Severity::Error, SHAPE_MISMATCH, "attn_eos_text must be rank 2"),
        }
        if attn.data.iter().any(|&v| v < 0.0) {
            report.push(Severity::Error, NEGATIVE_ATTENTION, "attn_eos_text has negative weights");
        }
        match grad.dims2() {
            Some((rows, _)) if rows != t => report.push(
                Severity::Error,
                TOKEN_COUNT_MISMATCH,
                format!("grad_token_embed covers {rows} tokens, text has {t}"),
            ),
            Some(_) => {}
            None => report.push(Severity::Error, SHAPE_MISMATCH, "grad_token_embed must be rank 2"),
        }
        if t == 0 {
            report.push(Severity::Error, TOKEN_COUNT_MISMATCH, "token list is empty");
        }
    }

    report
}
