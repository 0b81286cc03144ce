//! Engine outputs against values frozen from the standalone Python script in
//! `tests/oracle/equations.py`.

use matex_core::eval::attention_bundle;
use matex_core::{build_prior, consistency_map, fuse_raw, layer_weights, AnatomicalRegion, FusionWeights, Grid};
use serde::Deserialize;

const TOL: f64 = 1e-6;

#[derive(Deserialize)]
struct Cases {
    layer_weights: Vec<LayerCase>,
    build_prior: Vec<PriorCase>,
    consistency: Vec<ConsistencyCase>,
    fuse: Vec<FuseCase>,
}

#[derive(Deserialize)]
struct LayerCase {
    n_layers: usize,
    tau: f64,
    expected: Vec<f64>,
}

#[derive(Deserialize)]
struct PriorCase {
    regions: Vec<[f64; 4]>,
    lambda_s: f64,
    h: usize,
    w: usize,
    expected: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ConsistencyCase {
    attn: Vec<Vec<f64>>,
    expected: Vec<f64>,
}

#[derive(Deserialize)]
struct FuseCase {
    grad: Vec<Vec<f64>>,
    flow: Vec<Vec<f64>>,
    consistency: Vec<Vec<f64>>,
    prior: Vec<Vec<f64>>,
    weights: [f64; 4],
    free_weights: bool,
    expected: Vec<Vec<f64>>,
}

fn cases() -> Cases {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/oracle_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn grid(rows: &[Vec<f64>]) -> Grid {
    Grid::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn assert_close(actual: &[f64], expected: &[f64], what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (k, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!((a - e).abs() <= TOL, "{what}[{k}]: got {a}, expected {e}");
    }
}

#[test]
fn layer_weights_match_oracle() {
    let c = cases();
    assert!(c.layer_weights.len() >= 10);
    for (k, case) in c.layer_weights.iter().enumerate() {
        assert_close(&layer_weights(case.n_layers, case.tau), &case.expected, &format!("case {k}"));
    }
}

#[test]
fn build_prior_matches_oracle_on_all_small_grids() {
    let c = cases();
    let mut sets = std::collections::BTreeSet::new();
    for (k, case) in c.build_prior.iter().enumerate() {
        let regions: Vec<AnatomicalRegion> = case
            .regions
            .iter()
            .map(|r| AnatomicalRegion::new("r", [r[0], r[1]], [r[2], r[3]]))
            .collect();
        sets.insert(format!("{:?}", case.regions));
        let m = build_prior(&regions, case.lambda_s, case.h, case.w).unwrap();
        assert_close(&m.grid.data, &case.expected.concat(), &format!("prior case {k}"));
    }
    assert!(sets.len() >= 10);
    assert_eq!(c.build_prior.len(), sets.len() * 64);
}

#[test]
fn consistency_matches_oracle() {
    let c = cases();
    assert!(c.consistency.len() >= 10);
    for (k, case) in c.consistency.iter().enumerate() {
        let n = case.expected.len();
        let b = attention_bundle(&case.attn, 1, n);
        let map = consistency_map(&b).unwrap();
        assert_close(&map.grid.data, &case.expected, &format!("consistency case {k}"));
    }
}

#[test]
fn fusion_matches_oracle() {
    let c = cases();
    assert!(c.fuse.len() >= 10);
    for (k, case) in c.fuse.iter().enumerate() {
        let [alpha, beta, gamma, delta] = case.weights;
        let w = FusionWeights {
            alpha,
            beta,
            gamma,
            delta,
            tau: 0.5,
            free_weights: case.free_weights,
        };
        let raw = fuse_raw(&grid(&case.grad), &grid(&case.flow), &grid(&case.consistency), &grid(&case.prior), &w)
            .unwrap();
        let fused = matex_core::minmax_normalize(&raw);
        assert_close(&fused.data, &case.expected.concat(), &format!("fuse case {k}"));
    }
}

#[test]
fn anchored_examples_present_in_fixture() {
    let c = cases();
    let two = c.layer_weights.iter().find(|k| k.n_layers == 2 && (k.tau - 2f64.ln()).abs() < 1e-12);
    let two = two.expect("L=2, tau=ln 2 case");
    assert_close(&two.expected, &[1.0 / 3.0, 2.0 / 3.0], "ln2");
    let last = c.consistency.last().unwrap();
    assert_close(&last.expected, &[1.0 / 1.1], "two-layer gate");
}
