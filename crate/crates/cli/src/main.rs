use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use matex_core::anatomy::AnatomicalRegion;
use matex_core::eval::run::{DEFAULT_FRACTION, METHOD_FLOW, METHOD_GRAD, METHOD_MATEX};
use matex_core::eval::{
    run_eval, serve_mock_oracle, write_mock_dataset, write_report, DatasetManifest, EvalConfig, Fill, MockConfig,
    MockDatasetConfig, MockModel,
};
use matex_core::fsutil::{read_json, write_json};
use matex_core::render::{load_grayscale, neutral_base, tokens_html};
use matex_core::{
    build_prior, colorize_overlay, explain_with_lexicon, load_bundle, save_bundle, validate_bundle, write_image,
    ExplainParams, Grid, Lexicon, OverlayConfig, TokenRelevance,
};
use serde::Serialize;

mod config;

use config::{ConfigFile, FusionArgs};

/// A problem with the invocation itself: bad flags, config or parameters.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "matex", version, about = "Anatomically guided attribution maps for image-text similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the fused attribution map for one bundle
    Explain(ExplainArgs),
    /// Run perturbation and localization metrics over a dataset manifest
    Eval(EvalArgs),
    /// Print the anatomical regions found in a report
    Parse(ParseArgs),
    /// Print the spatial prior grid for a report
    Prior(PriorArgs),
    /// Check a bundle against every format invariant
    Validate(ValidateArgs),
    /// Render a saved map as an overlay and/or tokens as HTML
    Render(RenderArgs),
    /// Write a seeded mock bundle, or a mock dataset with --samples
    Mock(MockArgs),
    /// Serve the mock score oracle over stdin/stdout
    #[command(hide = true)]
    MockOracle,
}

#[derive(Args)]
struct OverlayArgs {
    /// Heat opacity in [0, 1] [default: 0.45]
    #[arg(long = "overlay-alpha")]
    overlay_alpha: Option<f64>,
    /// Heat below this value is not drawn, in [0, 1) [default: 0.2]
    #[arg(long)]
    threshold: Option<f64>,
}

impl OverlayArgs {
    fn resolve(&self, file: &ConfigFile) -> Result<OverlayConfig, Invalid> {
        let d = OverlayConfig::default();
        let cfg = OverlayConfig {
            alpha: self.overlay_alpha.or(file.overlay_alpha).unwrap_or(d.alpha),
            threshold: self.threshold.or(file.threshold).unwrap_or(d.threshold),
        };
        cfg.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExplainArgs {
    /// Bundle directory
    #[arg(long)]
    bundle: PathBuf,
    /// Report text [default: the text stored in the bundle]
    #[arg(long)]
    report: Option<String>,
    #[command(flatten)]
    fusion: FusionArgs,
    #[command(flatten)]
    overlay: OverlayArgs,
    /// Pixel map plus component grids
    #[arg(long = "out-map", default_value = "map.json")]
    out_map: PathBuf,
    /// Heatmap overlay
    #[arg(long = "out-png", default_value = "overlay.png")]
    out_png: PathBuf,
    /// Token relevance, written only when the bundle has text tensors
    #[arg(long = "out-tokens", default_value = "tokens.json")]
    out_tokens: PathBuf,
    /// Optional HTML rendering of the token relevance
    #[arg(long = "out-html")]
    out_html: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FillArg {
    Zero,
    Mean,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest JSON
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for report.json and report.csv
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods [default: matex,grad,flow plus every external map in the manifest]
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Fraction of patches masked [default: 0.1]
    #[arg(long)]
    fraction: Option<f64>,
    /// Oracle subprocess command [default: built-in mock oracle]
    #[arg(long = "oracle-cmd")]
    oracle_cmd: Option<String>,
    /// Fill rule sent to the oracle subprocess [default: mean]
    #[arg(long, value_enum)]
    fill: Option<FillArg>,
    /// Worker threads; 0 picks automatically [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Args)]
struct ParseArgs {
    /// Report text
    #[arg(long)]
    text: String,
    /// Lexicon file [default: $MATEX_LEXICON, else built-in]
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct PriorArgs {
    /// Report text
    #[arg(long)]
    text: String,
    /// Patch rows
    #[arg(long, default_value_t = 7)]
    h: usize,
    /// Patch columns
    #[arg(long, default_value_t = 7)]
    w: usize,
    /// Spatial prior strength, >= 1
    #[arg(long = "lambda-s", default_value_t = matex_core::attribution::DEFAULT_LAMBDA_S)]
    lambda_s: f64,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Bundle directory
    #[arg(long)]
    bundle: PathBuf,
    /// Print findings as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Map JSON with pixel-resolution `h`, `w`, `grid`
    #[arg(long)]
    map: Option<PathBuf>,
    /// Grayscale base image [default: uniform gray]
    #[arg(long)]
    image: Option<PathBuf>,
    /// Overlay PNG path
    #[arg(long = "out-png", default_value = "overlay.png")]
    out_png: PathBuf,
    /// Token relevance JSON
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// HTML output for --tokens
    #[arg(long = "out-html", default_value = "tokens.html")]
    out_html: PathBuf,
    #[command(flatten)]
    overlay: OverlayArgs,
}

#[derive(Args)]
struct MockArgs {
    /// RNG seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Transformer layers
    #[arg(long, default_value_t = 12)]
    layers: usize,
    /// Patch rows
    #[arg(long, default_value_t = 7)]
    h: usize,
    /// Patch columns
    #[arg(long, default_value_t = 7)]
    w: usize,
    /// Embedding channels
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Report text stored in the bundle, enabling text tensors
    #[arg(long)]
    text: Option<String>,
    /// Write a dataset of this many samples plus dataset.json
    #[arg(long)]
    samples: Option<usize>,
}

fn lexicon(path: Option<&Path>) -> Result<Lexicon, Invalid> {
    match path {
        Some(p) => Lexicon::from_path(p),
        None => Lexicon::from_env(),
    }
    .map_err(|e| Invalid(format!("lexicon: {e}")))
}

#[derive(Serialize)]
struct Components<'a> {
    fused_patch: &'a Grid,
    grad: &'a Grid,
    flow: &'a Grid,
    consistency: &'a Grid,
    prior: &'a Grid,
}

#[derive(Serialize)]
struct MapFile<'a> {
    h: usize,
    w: usize,
    grid: &'a [f64],
    report: &'a str,
    regions: &'a [AnatomicalRegion],
    params: &'a ExplainParams,
    components: Components<'a>,
}

fn explain_cmd(a: &ExplainArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.fusion.config.as_deref())?;
    let params = a.fusion.resolve(&file)?;
    let overlay = a.overlay.resolve(&file)?;
    let lexicon = lexicon(None)?;

    let bundle = load_bundle(&a.bundle)?;
    let report = a.report.clone().unwrap_or_else(|| bundle.text.clone());
    let out = explain_with_lexicon(&bundle, &report, &params, &lexicon)?;

    let base = match &bundle.image.path {
        Some(p) => {
            let path = a.bundle.join(p);
            let img = load_grayscale(&path).with_context(|| format!("loading base image {}", path.display()))?;
            if (img.height() as usize, img.width() as usize) != (bundle.image.height_px, bundle.image.width_px) {
                bail!(
                    "base image {} is {}x{} but the bundle says {}x{}",
                    path.display(),
                    img.height(),
                    img.width(),
                    bundle.image.height_px,
                    bundle.image.width_px
                );
            }
            img
        }
        None => neutral_base(bundle.image.height_px, bundle.image.width_px),
    };
    let map_file = MapFile {
        h: out.map.grid.h,
        w: out.map.grid.w,
        grid: &out.map.grid.data,
        report: &report,
        regions: &out.regions,
        params: &params,
        components: Components {
            fused_patch: &out.fused_patch.grid,
            grad: &out.grad.grid,
            flow: &out.flow.grid,
            consistency: &out.consistency.grid,
            prior: &out.prior.grid,
        },
    };
    write_json(&a.out_map, &map_file)?;
    write_image(&colorize_overlay(&base, &out.map.grid, &overlay)?, &a.out_png)?;
    if let Some(tokens) = &out.tokens {
        write_json(&a.out_tokens, tokens)?;
        if let Some(html) = &a.out_html {
            matex_core::render_tokens(tokens, html)?;
        }
    }
    let labels: Vec<&str> = out.regions.iter().map(|r| r.label.as_str()).collect();
    eprintln!("regions: [{}]", labels.join(", "));
    eprintln!("wrote {} and {}", a.out_map.display(), a.out_png.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let file = ConfigFile::load(a.fusion.config.as_deref())?;
    let params = a.fusion.resolve(&file)?;
    let fraction = a.fraction.or(file.fraction).unwrap_or(DEFAULT_FRACTION);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Invalid(format!("--fraction must be in [0, 1], got {fraction}")).into());
    }
    let fill = match (a.fill, file.fill.as_deref()) {
        (Some(FillArg::Zero), _) | (None, Some("zero")) => Fill::Zero,
        (Some(FillArg::Mean), _) | (None, Some("mean")) | (None, None) => Fill::Mean,
        (None, Some(other)) => return Err(Invalid(format!("config fill must be zero or mean, got {other}")).into()),
    };
    let lexicon_path = std::env::var_os(matex_core::anatomy::LEXICON_ENV)
        .filter(|p| !p.is_empty())
        .map(PathBuf::from);
    if let Some(p) = &lexicon_path {
        Lexicon::from_path(p).map_err(|e| Invalid(format!("lexicon: {e}")))?;
    }

    let methods = match a.methods.clone().or(file.methods.clone()) {
        Some(m) if m.is_empty() => return Err(Invalid("--methods is empty".into()).into()),
        Some(m) => m,
        None => {
            let manifest: DatasetManifest = read_json(&a.dataset)?;
            let mut m: Vec<String> = [METHOD_MATEX, METHOD_GRAD, METHOD_FLOW].map(String::from).to_vec();
            let external: std::collections::BTreeSet<&String> =
                manifest.samples.iter().flat_map(|s| s.external_maps.keys()).collect();
            m.extend(external.into_iter().filter(|k| !m.contains(k)).cloned().collect::<Vec<_>>());
            m
        }
    };
    let cfg = EvalConfig {
        methods,
        params,
        fraction,
        oracle_cmd: a.oracle_cmd.clone().or(file.oracle_cmd.clone()),
        fill,
        jobs: a.jobs.or(file.jobs).unwrap_or(1),
        lexicon_path,
    };
    let report = run_eval(&a.dataset, &cfg)?;
    write_report(&report, &a.out)?;
    for (method, agg) in &report.aggregates {
        eprintln!(
            "{method:>10}  n={:<3} drop {:.3} ± {:.3}  incr {:.3} ± {:.3}  pointing {:.3}  mass {:.3}",
            agg.n,
            agg.conf_drop_pct.mean,
            agg.conf_drop_pct.std,
            agg.conf_incr_pct.mean,
            agg.conf_incr_pct.std,
            agg.pointing_hit_rate.mean,
            agg.mass_in_box.mean
        );
    }
    for f in &report.failures {
        eprintln!("failed: {} {}: {}", f.sample_id, f.method.as_deref().unwrap_or("*"), f.error);
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_cmd(a: &ParseArgs) -> anyhow::Result<()> {
    let lexicon = lexicon(a.lexicon.as_deref())?;
    print_json(&lexicon.parse(&a.text))
}

fn prior_cmd(a: &PriorArgs) -> anyhow::Result<()> {
    if a.h == 0 || a.w == 0 {
        return Err(Invalid("--h and --w must be positive".into()).into());
    }
    if !(a.lambda_s >= 1.0 && a.lambda_s.is_finite()) {
        return Err(Invalid(format!("--lambda-s must be >= 1, got {}", a.lambda_s)).into());
    }
    let regions = lexicon(None)?.parse(&a.text);
    let prior = build_prior(&regions, a.lambda_s, a.h, a.w)?;
    match &a.out {
        Some(p) => Ok(write_json(p, &prior)?),
        None => print_json(&prior),
    }
}

fn validate_cmd(a: &ValidateArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let report = validate_bundle(&bundle);
    if a.json {
        print_json(&report)?;
    } else if report.is_empty() {
        println!("ok");
    } else {
        for f in &report.findings {
            println!("{f}");
        }
    }
    let errors = report.errors().count();
    if errors > 0 {
        return Err(Invalid(format!("{errors} invariant violation(s)")).into());
    }
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> anyhow::Result<()> {
    if a.map.is_none() && a.tokens.is_none() {
        return Err(Invalid("nothing to render: pass --map and/or --tokens".into()).into());
    }
    let overlay = a.overlay.resolve(&ConfigFile::default())?;
    if let Some(map_path) = &a.map {
        let raw: Grid = read_json(map_path)?;
        let heat = Grid::new(raw.h, raw.w, raw.data)?;
        let base = match &a.image {
            Some(p) => load_grayscale(p)?,
            None => neutral_base(heat.h, heat.w),
        };
        write_image(&colorize_overlay(&base, &heat, &overlay)?, &a.out_png)?;
    }
    if let Some(tok_path) = &a.tokens {
        let tokens: TokenRelevance = read_json(tok_path)?;
        matex_core::fsutil::atomic_write(&a.out_html, tokens_html(&tokens)?.as_bytes())?;
    }
    Ok(())
}

fn mock_cmd(a: &MockArgs) -> anyhow::Result<()> {
    if a.layers == 0 || a.h == 0 || a.w == 0 || a.channels == 0 {
        return Err(Invalid("--layers, --h, --w and --channels must be positive".into()).into());
    }
    match a.samples {
        Some(0) => Err(Invalid("--samples must be positive".into()).into()),
        Some(samples) => {
            let cfg = MockDatasetConfig {
                seed: a.seed,
                samples,
                n_layers: a.layers,
                h_patches: a.h,
                w_patches: a.w,
                channels: a.channels,
            };
            let path = write_mock_dataset(&a.out, &cfg)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => {
            let mut cfg = MockConfig::new(a.seed, a.layers, a.h, a.w, a.channels);
            cfg.text = a.text.clone();
            save_bundle(&MockModel::generate(&cfg).bundle(), &a.out)?;
            eprintln!("wrote {}", a.out.display());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Explain(a) => explain_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Parse(a) => parse_cmd(a),
        Command::Prior(a) => prior_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Mock(a) => mock_cmd(a),
        Command::MockOracle => Ok(serve_mock_oracle(std::io::stdin().lock(), std::io::stdout().lock())?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
