//! Dataset-level evaluation and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{parse_regions, AnatomicalRegion, Lexicon};
use crate::attribution::{explain_with_lexicon, ExplainParams};
use crate::bundle::{load_bundle, save_bundle, IntermediatesBundle};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_json, write_json};
use crate::grid::{minmax_normalize, upsample_bilinear, Grid};

use super::metrics::{
    confidence_drop, confidence_increase, mass_in_box, pointing_game, token_confidence_metrics, GroundTruthBox,
};
use super::mock::{MockConfig, MockModel};
use super::oracle::{mock_oracle, Fill, ScoreOracle, SubprocessOracle};

pub const METHOD_MATEX: &str = "matex";
pub const METHOD_GRAD: &str = "grad";
pub const METHOD_FLOW: &str = "flow";
pub const DEFAULT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: String,
    pub bundle: PathBuf,
    #[serde(default)]
    pub report: String,
    #[serde(default)]
    pub boxes: Vec<GroundTruthBox>,
    #[serde(default)]
    pub external_maps: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<DatasetSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Method names; anything other than the built-ins is looked up in each
    /// sample's `external_maps`.
    pub methods: Vec<String>,
    pub params: ExplainParams,
    pub fraction: f64,
    /// Oracle subprocess command; the mock oracle is used when `None`.
    pub oracle_cmd: Option<String>,
    pub fill: Fill,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Lexicon file replacing the built-in one.
    pub lexicon_path: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![METHOD_MATEX.into(), METHOD_GRAD.into(), METHOD_FLOW.into()],
            params: ExplainParams::default(),
            fraction: DEFAULT_FRACTION,
            oracle_cmd: None,
            fill: Fill::Mean,
            jobs: 0,
            lexicon_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub method: String,
    pub conf_drop_pct: f64,
    pub conf_incr_pct: f64,
    pub pointing_hit: bool,
    pub mass_in_box: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_conf_drop_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_conf_incr_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub method: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over samples.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Guard the mean against summation drift so it never leaves [min, max].
        Some(Self {
            mean: mean.clamp(min, max),
            std: var.sqrt(),
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub n: usize,
    pub conf_drop_pct: Stat,
    pub conf_incr_pct: Stat,
    pub pointing_hit_rate: Stat,
    pub mass_in_box: Stat,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_conf_drop_pct: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_conf_incr_pct: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotComputed {
    pub value: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub fraction: f64,
    pub lambda_s: f64,
    pub weights: crate::attribution::FusionWeights,
    pub value_weighting: bool,
    pub oracle: String,
    pub fill: String,
    pub std: String,
    pub roar_plus: NotComputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub records: Vec<SampleRecord>,
    pub failures: Vec<FailureRecord>,
    pub aggregates: BTreeMap<String, MethodAggregate>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads an external `{h, w, grid}` map and brings it to patch and pixel
/// resolution: patch-sized maps are upsampled, image-sized maps are block
/// averaged down to the patch grid.
pub fn load_external_map(path: &Path, bundle: &IntermediatesBundle) -> Result<(Grid, Grid)> {
    let raw: Grid = read_json(path)?;
    let g = Grid::new(raw.h, raw.w, raw.data)?;
    if !g.is_finite() {
        return Err(Error::InvalidParameter(format!("{} contains non-finite values", path.display())));
    }
    let (ph, pw) = (bundle.grid.h_patches, bundle.grid.w_patches);
    let (ih, iw) = (bundle.image.height_px, bundle.image.width_px);
    let g = minmax_normalize(&g);
    if (g.h, g.w) == (ph, pw) {
        let pixel = upsample_bilinear(&g, ih, iw)?;
        Ok((g, pixel))
    } else if (g.h, g.w) == (ih, iw) {
        let mut sums = vec![0.0; ph * pw];
        let mut counts = vec![0usize; ph * pw];
        for r in 0..ih {
            for c in 0..iw {
                let k = (r * ph / ih) * pw + c * pw / iw;
                sums[k] += g.get(r, c);
                counts[k] += 1;
            }
        }
        let patch = Grid::new(ph, pw, sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())?;
        Ok((patch, g))
    } else {
        Err(Error::DimensionMismatch(format!(
            "external map {} is {}x{}; expected patch {ph}x{pw} or image {ih}x{iw}",
            path.display(),
            g.h,
            g.w
        )))
    }
}

struct MethodMaps {
    patch: Grid,
    pixel: Grid,
    tokens: Option<Vec<f64>>,
}

fn method_maps(
    method: &str,
    sample: &DatasetSample,
    base: &Path,
    bundle: &IntermediatesBundle,
    explained: &crate::attribution::Explanation,
) -> Result<MethodMaps> {
    let (ih, iw) = (bundle.image.height_px, bundle.image.width_px);
    match method {
        METHOD_MATEX => Ok(MethodMaps {
            patch: explained.fused_patch.grid.clone(),
            pixel: explained.map.grid.clone(),
            tokens: explained.tokens.as_ref().map(|t| t.scores.clone()),
        }),
        METHOD_GRAD => Ok(MethodMaps {
            pixel: upsample_bilinear(&explained.grad.grid, ih, iw)?,
            patch: explained.grad.grid.clone(),
            tokens: None,
        }),
        METHOD_FLOW => Ok(MethodMaps {
            pixel: upsample_bilinear(&explained.flow.grid, ih, iw)?,
            patch: explained.flow.grid.clone(),
            tokens: None,
        }),
        other => {
            let path = sample.external_maps.get(other).ok_or_else(|| {
                Error::InvalidParameter(format!("sample {} has no external map for method {other}", sample.id))
            })?;
            let (patch, pixel) = load_external_map(&resolve(base, path), bundle)?;
            Ok(MethodMaps {
                patch,
                pixel,
                tokens: None,
            })
        }
    }
}

type SampleOutcome = (Vec<SampleRecord>, Vec<FailureRecord>);

fn evaluate_sample(
    sample: &DatasetSample,
    base: &Path,
    cfg: &EvalConfig,
    lexicon: &Lexicon,
    subprocess: Option<&SubprocessOracle>,
) -> SampleOutcome {
    let fail = |method: Option<&str>, e: Error| FailureRecord {
        sample_id: sample.id.clone(),
        method: method.map(str::to_string),
        error: e.to_string(),
    };
    let bundle_dir = resolve(base, &sample.bundle);
    let bundle = match load_bundle(&bundle_dir) {
        Ok(b) => b,
        Err(e) => return (Vec::new(), vec![fail(None, e)]),
    };
    let explained = match explain_with_lexicon(&bundle, &sample.report, &cfg.params, lexicon) {
        Ok(x) => x,
        Err(e) => return (Vec::new(), vec![fail(None, e)]),
    };
    let mock;
    let bound;
    let oracle: &dyn ScoreOracle = match subprocess {
        Some(s) => {
            bound = s.bind(&bundle_dir);
            &bound
        }
        None => {
            mock = mock_oracle(&bundle);
            &mock
        }
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for method in &cfg.methods {
        let result = (|| {
            let maps = method_maps(method, sample, base, &bundle, &explained)?;
            let record = SampleRecord {
                sample_id: sample.id.clone(),
                method: method.clone(),
                conf_drop_pct: confidence_drop(oracle, &bundle, &maps.patch, cfg.fraction)?,
                conf_incr_pct: confidence_increase(oracle, &bundle, &maps.patch, cfg.fraction)?,
                pointing_hit: pointing_game(&maps.pixel, &sample.boxes)?,
                mass_in_box: mass_in_box(&maps.pixel, &sample.boxes)?,
                token_conf_drop_pct: None,
                token_conf_incr_pct: None,
            };
            Ok::<_, Error>((record, maps.tokens))
        })();
        match result {
            Ok((mut record, tokens)) => {
                if let Some(scores) = tokens {
                    match token_confidence_metrics(oracle, &bundle, &scores, cfg.fraction) {
                        Ok(t) => {
                            record.token_conf_drop_pct = Some(t.conf_drop_pct);
                            record.token_conf_incr_pct = Some(t.conf_incr_pct);
                        }
                        Err(e) => failures.push(fail(Some(&format!("{method}:text")), e)),
                    }
                }
                records.push(record);
            }
            Err(e) => failures.push(fail(Some(method), e)),
        }
    }
    (records, failures)
}

fn aggregate(records: &[SampleRecord], methods: &[String]) -> BTreeMap<String, MethodAggregate> {
    let mut out = BTreeMap::new();
    for method in methods {
        let rs: Vec<&SampleRecord> = records.iter().filter(|r| &r.method == method).collect();
        let col = |f: &dyn Fn(&SampleRecord) -> f64| -> Vec<f64> { rs.iter().map(|r| f(r)).collect() };
        let drop = col(&|r| r.conf_drop_pct);
        let Some(conf_drop_pct) = Stat::of(&drop) else { continue };
        let tok_drop: Vec<f64> = rs.iter().filter_map(|r| r.token_conf_drop_pct).collect();
        let tok_incr: Vec<f64> = rs.iter().filter_map(|r| r.token_conf_incr_pct).collect();
        out.insert(
            method.clone(),
            MethodAggregate {
                n: rs.len(),
                conf_drop_pct,
                conf_incr_pct: Stat::of(&col(&|r| r.conf_incr_pct)).expect("non-empty"),
                pointing_hit_rate: Stat::of(&col(&|r| if r.pointing_hit { 1.0 } else { 0.0 })).expect("non-empty"),
                mass_in_box: Stat::of(&col(&|r| r.mass_in_box)).expect("non-empty"),
                token_conf_drop_pct: Stat::of(&tok_drop),
                token_conf_incr_pct: Stat::of(&tok_incr),
            },
        );
    }
    out
}

/// Evaluates every sample × method. Per-sample problems become failure
/// records; only an unreadable manifest or oracle start-up error aborts.
pub fn run_eval(manifest_path: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.params.weights.validate()?;
    if !(cfg.fraction.is_finite() && (0.0..=1.0).contains(&cfg.fraction)) {
        return Err(Error::InvalidParameter(format!("fraction must be in [0, 1], got {}", cfg.fraction)));
    }
    let owned;
    let lexicon = match &cfg.lexicon_path {
        Some(p) => {
            owned = Lexicon::from_path(p)?;
            &owned
        }
        None => Lexicon::builtin(),
    };
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let subprocess = cfg
        .oracle_cmd
        .as_deref()
        .map(|cmd| SubprocessOracle::spawn(cmd, cfg.fill))
        .transpose()?;

    let run = || -> Vec<SampleOutcome> {
        manifest
            .samples
            .par_iter()
            .map(|s| evaluate_sample(s, &base, cfg, lexicon, subprocess.as_ref()))
            .collect()
    };
    let outcomes = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        records.extend(r);
        failures.extend(f);
    }
    let (oracle, fill) = match &cfg.oracle_cmd {
        Some(cmd) => (format!("subprocess: {cmd}"), cfg.fill.as_str().to_string()),
        None => ("mock".to_string(), Fill::Zero.as_str().to_string()),
    };
    Ok(EvalReport {
        metadata: ReportMetadata {
            fraction: cfg.fraction,
            lambda_s: cfg.params.lambda_s,
            weights: cfg.params.weights,
            value_weighting: cfg.params.value_weighting,
            oracle,
            fill,
            std: "population standard deviation over per-sample values".into(),
            roar_plus: NotComputed {
                value: None,
                reason: "requires retraining the model on masked inputs; not computed".into(),
            },
        },
        aggregates: aggregate(&records, &cfg.methods),
        records,
        failures,
    })
}

pub const CSV_HEADER: &str = "sample_id,method,conf_drop_pct,conf_incr_pct,pointing_hit,mass_in_box";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&r.sample_id),
            csv_field(&r.method),
            r.conf_drop_pct,
            r.conf_incr_pct,
            r.pointing_hit,
            r.mass_in_box
        );
    }
    out
}

/// Writes `report.json` and `report.csv` into `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("report.json"), report)?;
    atomic_write(&out_dir.join("report.csv"), report_csv(report).as_bytes())
}

/// Report texts cycled through by [`write_mock_dataset`].
pub const MOCK_REPORTS: [&str; 7] = [
    "Left upper lobe consolidation",
    "Bilateral lower lobe consolidation",
    "Right mid-to-upper zone opacity",
    "Left lower lobe opacification",
    "Left mid-lung consolidation",
    "right apex",
    "left base",
];

fn region_box(r: &AnatomicalRegion) -> GroundTruthBox {
    GroundTruthBox {
        x: r.x_min,
        y: r.y_min,
        w: r.x_max - r.x_min,
        h: r.y_max - r.y_min,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockDatasetConfig {
    pub seed: u64,
    pub samples: usize,
    pub n_layers: usize,
    pub h_patches: usize,
    pub w_patches: usize,
    pub channels: usize,
}

impl Default for MockDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            samples: 5,
            n_layers: 12,
            h_patches: 7,
            w_patches: 7,
            channels: 32,
        }
    }
}

/// Writes `samples` mock bundles plus a `dataset.json` manifest into `dir`.
/// Each sample's lesion sits at the center of the first region its report
/// names, and the ground-truth boxes are the parsed regions.
pub fn write_mock_dataset(dir: &Path, cfg: &MockDatasetConfig) -> Result<PathBuf> {
    let mut samples = Vec::with_capacity(cfg.samples);
    for k in 0..cfg.samples {
        let report = MOCK_REPORTS[k % MOCK_REPORTS.len()];
        let regions = parse_regions(report);
        let mut mc = MockConfig::new(
            cfg.seed.wrapping_add(k as u64),
            cfg.n_layers,
            cfg.h_patches,
            cfg.w_patches,
            cfg.channels,
        )
        .with_text(report);
        if let Some(r) = regions.first() {
            mc = mc.with_lesion((r.x_min + r.x_max) / 2.0, (r.y_min + r.y_max) / 2.0);
        }
        let id = format!("sample_{k:03}");
        save_bundle(&MockModel::generate(&mc).bundle(), &dir.join(&id))?;
        samples.push(DatasetSample {
            id: id.clone(),
            bundle: PathBuf::from(&id),
            report: report.to_string(),
            boxes: regions.iter().map(region_box).collect(),
            external_maps: BTreeMap::new(),
        });
    }
    let path = dir.join("dataset.json");
    write_json(&path, &DatasetManifest { samples })?;
    Ok(path)
}
