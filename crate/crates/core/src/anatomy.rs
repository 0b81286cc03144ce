//! Rule-based extraction of lung regions from free-text radiology phrases.
//!
//! Text is tokenized into lowercase alphanumeric runs and matched
//! longest-pattern-first against a lexicon of laterality words (`left`,
//! `right`, `bilateral`) and zone words (`apex`, `mid`, `base` and their
//! synonyms). A zone picks up the nearest laterality within a small token
//! window, preferring one that precedes it. Unpaired laterality yields the
//! whole lung on that side. `bilateral` expands to both sides.
//!
//! Coordinates are normalized viewer-frame: x grows rightward, y downward.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that points at a replacement lexicon file.
pub const LEXICON_ENV: &str = "MATEX_LEXICON";

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// A named lung zone with normalized coordinate ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomicalRegion {
    pub label: String,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Character range (in `char`s, end-exclusive) of the phrase in the input text.
    pub source_span: Span,
}

impl AnatomicalRegion {
    pub fn new(label: impl Into<String>, x: [f64; 2], y: [f64; 2]) -> Self {
        Self {
            label: label.into(),
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
            source_span: Span { start: 0, end: 0 },
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Label and coordinates, ignoring where in the text the region came from.
    pub fn same_region(&self, other: &AnatomicalRegion) -> bool {
        self.label == other.label
            && self.x_min == other.x_min
            && self.x_max == other.x_max
            && self.y_min == other.y_min
            && self.y_max == other.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bilateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Apex,
    Mid,
    Base,
}

const ZONES: [Zone; 3] = [Zone::Apex, Zone::Mid, Zone::Base];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct XRanges {
    left: [f64; 2],
    right: [f64; 2],
    unlateralized: [f64; 2],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct YRanges {
    apex: [f64; 2],
    mid: [f64; 2],
    base: [f64; 2],
    lung: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub pattern: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<Zone>,
    /// Fixed-region entries carry their own label and ranges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconFile {
    version: u32,
    window: usize,
    #[serde(default)]
    compound_joiners: Vec<String>,
    x_ranges: XRanges,
    y_ranges: YRanges,
    entries: Vec<LexiconEntry>,
}

/// Pattern table plus coordinate ranges driving [`Lexicon::parse`].
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub version: u32,
    window: usize,
    joiners: Vec<String>,
    x: XRanges,
    y: YRanges,
    /// Sorted by pattern length, longest first; stable within a length.
    entries: Vec<LexiconEntry>,
    labels: HashSet<String>,
}

fn check_range(what: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] >= 0.0 && r[0] < r[1] && r[1] <= 1.0) {
        return Err(Error::InvalidLexicon(format!("{what} range {r:?} must satisfy 0 <= lo < hi <= 1")));
    }
    Ok(())
}

fn zone_name(lo: Zone, hi: Zone) -> &'static str {
    match (lo, hi) {
        (Zone::Apex, Zone::Apex) => "apex",
        (Zone::Mid, Zone::Mid) => "mid",
        (Zone::Base, Zone::Base) => "base",
        (Zone::Apex, Zone::Mid) => "apex_mid",
        (Zone::Mid, Zone::Base) => "mid_base",
        _ => "lung",
    }
}

impl Lexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: LexiconFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidLexicon(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The lexicon named by `MATEX_LEXICON`, or the built-in one.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(LEXICON_ENV) {
            Some(p) if !p.is_empty() => Self::from_path(p),
            _ => Ok(Self::builtin().clone()),
        }
    }

    pub fn builtin() -> &'static Lexicon {
        static BUILTIN: OnceLock<Lexicon> = OnceLock::new();
        BUILTIN.get_or_init(|| Lexicon::from_json(DEFAULT_LEXICON).expect("built-in lexicon is valid"))
    }

    fn from_file(file: LexiconFile) -> Result<Self> {
        for (name, r) in [
            ("x_ranges.left", file.x_ranges.left),
            ("x_ranges.right", file.x_ranges.right),
            ("x_ranges.unlateralized", file.x_ranges.unlateralized),
            ("y_ranges.apex", file.y_ranges.apex),
            ("y_ranges.mid", file.y_ranges.mid),
            ("y_ranges.base", file.y_ranges.base),
            ("y_ranges.lung", file.y_ranges.lung),
        ] {
            check_range(name, r)?;
        }

        let mut labels = HashSet::new();
        for side in ["left_", "right_", ""] {
            for (lo, hi) in [
                (Zone::Apex, Zone::Apex),
                (Zone::Mid, Zone::Mid),
                (Zone::Base, Zone::Base),
                (Zone::Apex, Zone::Mid),
                (Zone::Mid, Zone::Base),
                (Zone::Apex, Zone::Base),
            ] {
                labels.insert(format!("{side}{}", zone_name(lo, hi)));
            }
        }

        let mut entries = file.entries;
        for e in &entries {
            let shown = e.pattern.join(" ");
            if e.pattern.is_empty() {
                return Err(Error::InvalidLexicon("entry with empty pattern".into()));
            }
            if e.pattern.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace) || normalize_text(t) != *t) {
                return Err(Error::InvalidLexicon(format!(
                    "pattern `{shown}` must consist of normalized single tokens"
                )));
            }
            match (&e.label, e.x, e.y) {
                (Some(label), Some(x), Some(y)) => {
                    if e.side.is_some() || e.zone.is_some() {
                        return Err(Error::InvalidLexicon(format!(
                            "fixed entry `{shown}` cannot also set side/zone"
                        )));
                    }
                    check_range(&format!("{label}.x"), x)?;
                    check_range(&format!("{label}.y"), y)?;
                    labels.insert(label.clone());
                }
                (None, None, None) => {
                    if e.side.is_none() && e.zone.is_none() {
                        return Err(Error::InvalidLexicon(format!(
                            "entry `{shown}` needs a side, a zone, or label+x+y"
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidLexicon(format!(
                        "fixed entry `{shown}` needs label, x and y together"
                    )))
                }
            }
        }
        entries.sort_by_key(|e| std::cmp::Reverse(e.pattern.len()));

        Ok(Self {
            version: file.version,
            window: file.window,
            joiners: file.compound_joiners,
            x: file.x_ranges,
            y: file.y_ranges,
            entries,
            labels,
        })
    }

    pub fn is_known_label(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    fn x_range(&self, side: Option<Side>) -> [f64; 2] {
        match side {
            Some(Side::Left) => self.x.left,
            Some(Side::Right) => self.x.right,
            Some(Side::Bilateral) | None => self.x.unlateralized,
        }
    }

    fn y_range(&self, lo: Zone, hi: Zone) -> [f64; 2] {
        let range = |z: Zone| match z {
            Zone::Apex => self.y.apex,
            Zone::Mid => self.y.mid,
            Zone::Base => self.y.base,
        };
        let covered = ZONES.iter().filter(|&&z| z >= lo && z <= hi).map(|&z| range(z));
        let mut out = [f64::INFINITY, f64::NEG_INFINITY];
        for r in covered {
            out[0] = out[0].min(r[0]);
            out[1] = out[1].max(r[1]);
        }
        out
    }

    /// Emits the regions for `side` (expanding bilateral) over a zone range,
    /// or the whole lung when `zones` is `None`.
    fn emit(&self, side: Option<Side>, zones: Option<(Zone, Zone)>, span: Span, out: &mut Vec<AnatomicalRegion>) {
        let (zone_label, y) = match zones {
            Some((lo, hi)) => (zone_name(lo, hi), self.y_range(lo, hi)),
            None => ("lung", self.y.lung),
        };
        let sides: &[Option<Side>] = match side {
            Some(Side::Bilateral) => &[Some(Side::Left), Some(Side::Right)],
            _ => std::slice::from_ref(&side),
        };
        for &s in sides {
            let prefix = match s {
                Some(Side::Left) => "left_",
                Some(Side::Right) => "right_",
                _ => "",
            };
            let mut region = AnatomicalRegion::new(format!("{prefix}{zone_label}"), self.x_range(s), y);
            region.source_span = span;
            out.push(region);
        }
    }

    /// Extracts anatomical regions from `text`. Deterministic; returns an empty
    /// list when nothing matches.
    pub fn parse(&self, text: &str) -> Vec<AnatomicalRegion> {
        let tokens = tokenize(text);
        let items = self.match_items(&tokens);
        let items = self.merge_compounds(items, &tokens);

        // Pair each zone with a laterality word.
        let mut side_used = vec![false; items.len()];
        let mut pairing: Vec<Option<usize>> = vec![None; items.len()];
        for (zi, item) in items.iter().enumerate() {
            let wants_side = matches!(item.kind, ItemKind::Zone(..) | ItemKind::SidedZone(..));
            if !wants_side {
                continue;
            }
            let mut before: Option<(usize, usize)> = None;
            let mut after: Option<(usize, usize)> = None;
            for (si, cand) in items.iter().enumerate() {
                if !matches!(cand.kind, ItemKind::Side(_)) {
                    continue;
                }
                if cand.last < item.first {
                    let d = item.first - cand.last;
                    if d <= self.window && before.is_none_or(|(_, bd)| d < bd) {
                        before = Some((si, d));
                    }
                } else if cand.first > item.last {
                    let d = cand.first - item.last;
                    if d <= self.window && after.is_none_or(|(_, ad)| d < ad) {
                        after = Some((si, d));
                    }
                }
            }
            let chosen = match item.kind {
                // Entries with their own laterality only absorb a preceding side word.
                ItemKind::SidedZone(..) => before,
                _ => before.or(after),
            };
            if let Some((si, _)) = chosen {
                side_used[si] = true;
                pairing[zi] = Some(si);
            }
        }

        let mut emitted: Vec<(usize, Vec<AnatomicalRegion>)> = Vec::new();
        for (idx, item) in items.iter().enumerate() {
            let mut regions = Vec::new();
            let mut first_token = item.first;
            match &item.kind {
                ItemKind::Side(side) => {
                    if !side_used[idx] {
                        self.emit(Some(*side), None, item.span, &mut regions);
                    }
                }
                ItemKind::Zone(lo, hi) => {
                    let (side, span) = match pairing[idx] {
                        Some(si) => {
                            let s = &items[si];
                            first_token = first_token.min(s.first);
                            let ItemKind::Side(side) = s.kind else { unreachable!() };
                            (Some(side), join_spans(s.span, item.span))
                        }
                        None => (None, item.span),
                    };
                    self.emit(side, Some((*lo, *hi)), span, &mut regions);
                }
                ItemKind::SidedZone(side, zone) => {
                    let span = match pairing[idx] {
                        Some(si) => {
                            first_token = first_token.min(items[si].first);
                            join_spans(items[si].span, item.span)
                        }
                        None => item.span,
                    };
                    self.emit(Some(*side), Some((*zone, *zone)), span, &mut regions);
                }
                ItemKind::Fixed(entry) => {
                    let e = &self.entries[*entry];
                    let mut region = AnatomicalRegion::new(
                        e.label.clone().unwrap_or_default(),
                        e.x.unwrap_or([0.0, 1.0]),
                        e.y.unwrap_or([0.0, 1.0]),
                    );
                    region.source_span = item.span;
                    regions.push(region);
                }
            }
            if !regions.is_empty() {
                emitted.push((first_token, regions));
            }
        }
        emitted.sort_by_key(|(pos, _)| *pos);

        let mut seen = HashSet::new();
        emitted
            .into_iter()
            .flat_map(|(_, r)| r)
            .filter(|r| seen.insert(r.label.clone()))
            .collect()
    }

    fn match_items(&self, tokens: &[Token]) -> Vec<Item> {
        let mut items = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            let hit = self.entries.iter().enumerate().find(|(_, e)| {
                let n = e.pattern.len();
                pos + n <= tokens.len() && e.pattern.iter().zip(&tokens[pos..pos + n]).all(|(p, t)| *p == t.text)
            });
            match hit {
                Some((idx, e)) => {
                    let n = e.pattern.len();
                    let kind = if e.label.is_some() {
                        ItemKind::Fixed(idx)
                    } else {
                        match (e.side, e.zone) {
                            (Some(s), Some(z)) => ItemKind::SidedZone(s, z),
                            (Some(s), None) => ItemKind::Side(s),
                            (None, Some(z)) => ItemKind::Zone(z, z),
                            (None, None) => unreachable!("validated at load"),
                        }
                    };
                    items.push(Item {
                        kind,
                        first: pos,
                        last: pos + n - 1,
                        span: Span {
                            start: tokens[pos].span.start,
                            end: tokens[pos + n - 1].span.end,
                        },
                    });
                    pos += n;
                }
                None => pos += 1,
            }
        }
        items
    }

    /// Collapses `<zone> to <zone>` into one zone range.
    fn merge_compounds(&self, items: Vec<Item>, tokens: &[Token]) -> Vec<Item> {
        let mut out: Vec<Item> = Vec::with_capacity(items.len());
        for item in items {
            if let (Some(prev), ItemKind::Zone(lo, hi)) = (out.last_mut(), item.kind) {
                if let ItemKind::Zone(plo, phi) = prev.kind {
                    let joined = item.first == prev.last + 2
                        && self.joiners.iter().any(|j| *j == tokens[prev.last + 1].text);
                    if joined {
                        prev.kind = ItemKind::Zone(plo.min(lo), phi.max(hi));
                        prev.last = item.last;
                        prev.span = join_spans(prev.span, item.span);
                        continue;
                    }
                }
            }
            out.push(item);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum ItemKind {
    Side(Side),
    Zone(Zone, Zone),
    SidedZone(Side, Zone),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy)]
struct Item {
    kind: ItemKind,
    first: usize,
    last: usize,
    span: Span,
}

fn join_spans(a: Span, b: Span) -> Span {
    Span {
        start: a.start.min(b.start),
        end: a.end.max(b.end),
    }
}

#[derive(Debug, Clone)]
struct Token {
    text: String,
    span: Span,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut n_chars = 0;
    for (idx, ch) in text.chars().enumerate() {
        n_chars = idx + 1;
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = idx;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(&mut current),
                span: Span { start, end: idx },
            });
        }
    }
    if !current.is_empty() {
        tokens.push(Token {
            text: current,
            span: Span { start, end: n_chars },
        });
    }
    tokens
}

/// Lowercases, turns punctuation (hyphens included) into spaces and collapses
/// whitespace.
pub fn normalize_text(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

/// [`Lexicon::parse`] with the built-in lexicon.
pub fn parse_regions(text: &str) -> Vec<AnatomicalRegion> {
    Lexicon::builtin().parse(text)
}
