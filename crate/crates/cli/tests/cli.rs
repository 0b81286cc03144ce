use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_matex");

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

fn matex(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MATEX_LEXICON")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn parse_prints_regions() {
    let dir = tempfile::tempdir().unwrap();
    let o = matex(dir.path(), &["parse", "--text", "right apex"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["label"], "right_apex");
    assert_eq!(v[0]["x_min"], 0.5);
    assert_eq!(v[0]["y_max"], 0.4);
}

#[test]
fn missing_bundle_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = matex(dir.path(), &["explain", "--bundle", "missing/"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn bad_parameters_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let b = data("mock_seed7");
    let b = b.to_str().unwrap();
    assert_eq!(code(&matex(dir.path(), &["explain", "--bundle", b, "--alpha", "0.7"])), 1);
    assert_eq!(code(&matex(dir.path(), &["explain", "--bundle", b, "--lambda-s", "0.5"])), 1);
    assert_eq!(code(&matex(dir.path(), &["explain", "--bundle", b, "--threshold", "1.0"])), 1);
    assert_eq!(code(&matex(dir.path(), &["explain", "--bundle", b, "--tau", "abc"])), 1);
    assert_eq!(code(&matex(dir.path(), &["nonsense"])), 1);
    assert_eq!(code(&matex(dir.path(), &["mock", "--out", "x", "--h", "0"])), 1);
    // Nothing was written before validation failed.
    assert!(!dir.path().join("map.json").exists());
}

#[test]
fn help_lists_defaults_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["explain", "eval", "parse", "prior", "validate", "render", "mock"] {
        let o = matex(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(!o.stdout.is_empty());
    }
    let help = String::from_utf8(matex(dir.path(), &["explain", "--help"]).stdout).unwrap();
    for needle in ["[default: 0.5]", "[default: 0.2]", "[default: 0.35]", "[default: 2.5]", "--delta", "--tau"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn mock_matches_committed_bundle() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&matex(dir.path(), &["mock", "--seed", "7", "--out", "d/"])), 0);
    for entry in std::fs::read_dir(data("mock_seed7")).unwrap() {
        let name = entry.unwrap().file_name();
        let fresh = std::fs::read(dir.path().join("d").join(&name)).unwrap();
        assert_eq!(fresh, std::fs::read(data("mock_seed7").join(&name)).unwrap(), "{name:?}");
    }
}

fn assert_grid(actual: &Value, expected: &Value, what: &str) {
    let a: Vec<f64> = actual["grid"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let e: Vec<f64> = expected.as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().clone()).map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(a.len(), e.len(), "{what}");
    for (k, (x, y)) in a.iter().zip(&e).enumerate() {
        assert!((x - y).abs() < 1e-6, "{what}[{k}]: {x} vs {y}");
    }
}

#[test]
fn mock_then_explain_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&matex(dir.path(), &["mock", "--seed", "7", "--out", "d/"])), 0);
    let o = matex(dir.path(), &["explain", "--bundle", "d/", "--report", "left base"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let map = json_file(&dir.path().join("map.json"));
    let golden = json_file(&data("golden_seed7_left_base.json"));
    assert_eq!(map["h"], 224);
    assert_eq!(map["regions"][0]["label"], "left_base");
    for part in ["fused_patch", "grad", "flow", "consistency", "prior"] {
        assert_grid(&map["components"][part], &golden[part], part);
    }
    let grid = map["grid"].as_array().unwrap();
    for s in golden["pixel_samples"].as_array().unwrap() {
        let (r, c, v) = (s[0].as_u64().unwrap() as usize, s[1].as_u64().unwrap() as usize, s[2].as_f64().unwrap());
        assert!((grid[r * 224 + c].as_f64().unwrap() - v).abs() < 1e-6, "pixel ({r}, {c})");
    }
    let png = matex_core::render::load_grayscale(&dir.path().join("overlay.png")).unwrap();
    assert_eq!(png.dimensions(), (224, 224));
    // No text tensors in this bundle, so no token output.
    assert!(!dir.path().join("tokens.json").exists());
}

#[test]
fn explain_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--seed", "3", "--out", "d", "--text", "left lower lobe opacification"]);
    let run = |tag: &str| {
        let map = format!("{tag}.json");
        let png = format!("{tag}.png");
        let tok = format!("{tag}.tokens.json");
        let o = matex(dir.path(), &["explain", "--bundle", "d", "--out-map", &map, "--out-png", &png, "--out-tokens", &tok]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        [map, png, tok].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--out", "d"]);
    std::fs::write(dir.path().join("cfg.json"), r#"{"lambda_s": 3.5, "tau": 1.0}"#).unwrap();
    let o = matex(dir.path(), &["explain", "--bundle", "d", "--report", "right apex", "--config", "cfg.json", "--tau", "0.25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let params = &json_file(&dir.path().join("map.json"))["params"];
    assert_eq!(params["lambda_s"], 3.5);
    assert_eq!(params["weights"]["tau"], 0.25);
    assert_eq!(params["weights"]["alpha"], 0.5);

    std::fs::write(dir.path().join("bad.json"), r#"{"lambda": 3.5}"#).unwrap();
    assert_eq!(code(&matex(dir.path(), &["explain", "--bundle", "d", "--config", "bad.json"])), 1);
}

#[test]
fn render_reproduces_explain_outputs() {
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--out", "d", "--text", "bilateral lower lobe consolidation"]);
    let o = matex(dir.path(), &["explain", "--bundle", "d", "--out-html", "t1.html"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = matex(
        dir.path(),
        &["render", "--map", "map.json", "--out-png", "o2.png", "--tokens", "tokens.json", "--out-html", "t2.html"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("t1.html"), read("t2.html"));
    assert_eq!(read("overlay.png"), read("o2.png"));
    assert_eq!(code(&matex(dir.path(), &["render"])), 1);
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--out", "d"]);
    let o = matex(dir.path(), &["validate", "--bundle", "d"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "ok");

    let m = dir.path().join("d/manifest.json");
    let mut v = json_file(&m);
    v["n_layers"] = 11.into();
    std::fs::write(&m, v.to_string()).unwrap();
    let o = matex(dir.path(), &["validate", "--bundle", "d", "--json"]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["findings"][0]["code"], "LAYER_COUNT_MISMATCH");
}

#[test]
fn prior_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = matex(dir.path(), &["prior", "--text", "left base", "--h", "4", "--w", "4", "--lambda-s", "2"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let grid: Vec<f64> = v["grid"]["grid"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(grid.len(), 16);
    assert_eq!(grid.iter().cloned().fold(f64::MIN, f64::max), 2.0);
    assert_eq!(grid[3], 1.0);
}

#[test]
fn lexicon_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let lex = r#"{"version": 1, "window": 4, "compound_joiners": ["to"],
        "x_ranges": {"left": [0, 0.5], "right": [0.5, 1], "unlateralized": [0, 1]},
        "y_ranges": {"apex": [0, 0.4], "mid": [0.3, 0.7], "base": [0.6, 1], "lung": [0, 1]},
        "entries": [{"pattern": ["heart"], "label": "cardiac", "x": [0.3, 0.7], "y": [0.4, 0.9]}]}"#;
    std::fs::write(dir.path().join("lex.json"), lex).unwrap();
    let o = Command::new(BIN)
        .args(["parse", "--text", "enlarged heart, right apex"])
        .current_dir(dir.path())
        .env("MATEX_LEXICON", dir.path().join("lex.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["label"], "cardiac");

    let o = Command::new(BIN)
        .args(["parse", "--text", "x"])
        .env("MATEX_LEXICON", dir.path().join("absent.json"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&matex(dir.path(), &["mock", "--out", "ds", "--samples", "4"])), 0);
    let o = matex(dir.path(), &["eval", "--dataset", "ds/dataset.json", "--out", "r", "--methods", "matex,grad"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json_file(&dir.path().join("r/report.json"));
    assert_eq!(report["records"].as_array().unwrap().len(), 8);
    assert_eq!(report["metadata"]["oracle"], "mock");
    assert!(report["metadata"]["roar_plus"]["value"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("r/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "sample_id,method,conf_drop_pct,conf_incr_pct,pointing_hit,mass_in_box");
    assert_eq!(lines.count(), 8);
    assert_eq!(code(&matex(dir.path(), &["eval", "--dataset", "ds/dataset.json", "--out", "r", "--fraction", "2"])), 1);
    assert_eq!(code(&matex(dir.path(), &["eval", "--dataset", "nope.json", "--out", "r"])), 2);
}

#[test]
fn subprocess_oracle_agrees_with_mock() {
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--out", "ds", "--samples", "3"]);
    let o = matex(dir.path(), &["eval", "--dataset", "ds/dataset.json", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cmd = format!("{BIN} mock-oracle");
    let o = matex(dir.path(), &["eval", "--dataset", "ds/dataset.json", "--out", "b", "--oracle-cmd", &cmd, "--jobs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = json_file(&dir.path().join("a/report.json"));
    let b = json_file(&dir.path().join("b/report.json"));
    assert_eq!(b["metadata"]["fill"], "mean");
    assert!(b["failures"].as_array().unwrap().is_empty(), "{}", b["failures"]);
    assert_eq!(a["records"], b["records"]);
}

#[test]
fn mock_oracle_speaks_the_line_protocol() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    matex(dir.path(), &["mock", "--out", "d"]);
    let manifest = json_file(&dir.path().join("d/manifest.json"));
    let bundle = dir.path().join("d");
    let mut child = Command::new(BIN)
        .arg("mock-oracle")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        let b = bundle.display();
        writeln!(stdin, r#"{{"id": 41, "bundle": "{b}", "patch_mask": [], "fill": "mean"}}"#).unwrap();
        writeln!(stdin, r#"{{"id": 42, "bundle": "{b}", "patch_mask": [0, 1], "token_mask": [0]}}"#).unwrap();
        writeln!(stdin, r#"{{"id": 43, "bundle": "{b}", "token_mask": [0]}}"#).unwrap();
    }
    let out = child.wait_with_output().unwrap();
    let lines: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], 41);
    assert_eq!(lines[0]["score"], manifest["score"]);
    assert_eq!(lines[1]["id"], 42);
    assert!(lines[1]["error"].is_string());
    // Image-only bundle: token masks are unsupported.
    assert_eq!(lines[2]["id"], 43);
    assert!(lines[2]["error"].is_string());
}
