use matex_core::parse_regions;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    text: String,
    expected: Vec<Expected>,
}

#[derive(Deserialize)]
struct Expected {
    label: String,
    x: [f64; 2],
    y: [f64; 2],
}

fn corpus() -> Vec<Case> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/parser_corpus.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn golden_corpus_matches_exactly() {
    let cases = corpus();
    assert!(cases.len() >= 30);
    let mut failures = Vec::new();
    for case in &cases {
        let got: Vec<(String, [f64; 2], [f64; 2])> = parse_regions(&case.text)
            .into_iter()
            .map(|r| (r.label, [r.x_min, r.x_max], [r.y_min, r.y_max]))
            .collect();
        let want: Vec<(String, [f64; 2], [f64; 2])> =
            case.expected.iter().map(|e| (e.label.clone(), e.x, e.y)).collect();
        if got != want {
            failures.push(format!("{:?}: got {got:?}, want {want:?}", case.text));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn spans_point_at_the_phrase() {
    let text = "Patchy opacity in the RIGHT  apex.";
    let r = &parse_regions(text)[0];
    let chars: Vec<char> = text.chars().collect();
    let phrase: String = chars[r.source_span.start..r.source_span.end].iter().collect();
    assert_eq!(phrase, "RIGHT  apex");
}
