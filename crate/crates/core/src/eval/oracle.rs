//! Score oracles: re-scoring of masked inputs.
//!
//! The subprocess oracle speaks line-delimited JSON on the child's standard
//! streams. Each request is one object
//! `{"id", "bundle", "patch_mask" | "token_mask", "fill"}` with masks given as
//! index lists; each response is `{"id", "score"}` or `{"id", "error"}`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bundle::IntermediatesBundle;
use crate::error::{Error, Result};

use super::mock::{linear_score, MOCK_TOKEN_WEIGHTS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mask {
    Patches(Vec<usize>),
    Tokens(Vec<usize>),
}

impl Mask {
    pub fn patches(idx: Vec<usize>) -> Self {
        Mask::Patches(idx)
    }

    pub fn tokens(idx: Vec<usize>) -> Self {
        Mask::Tokens(idx)
    }

    pub fn none() -> Self {
        Mask::Patches(Vec::new())
    }
}

/// How masked image patches are filled before re-encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Zero,
    Mean,
}

impl Fill {
    pub fn as_str(self) -> &'static str {
        match self {
            Fill::Zero => "zero",
            Fill::Mean => "mean",
        }
    }
}

/// Re-scores one bundle's input under a patch or token mask.
pub trait ScoreOracle {
    fn score(&self, mask: &Mask) -> Result<f64>;
}

fn bool_mask(idx: &[usize], n: usize, what: &str) -> Result<Vec<bool>> {
    let mut m = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::InvalidParameter(format!("{what} index {i} out of range (n = {n})")));
        }
        m[i] = true;
    }
    Ok(m)
}

/// Pure oracle for a linear scorer: masked patches have their embeddings
/// zeroed and the score `sum W·E` is re-evaluated with `W = grad_patch_embed`.
/// Token masks scale that score by the unmasked share of the bundle's
/// `mock_token_weights`.
#[derive(Debug, Clone, Copy)]
pub struct MockOracle<'a> {
    bundle: &'a IntermediatesBundle,
}

pub fn mock_oracle(bundle: &IntermediatesBundle) -> MockOracle<'_> {
    MockOracle { bundle }
}

impl ScoreOracle for MockOracle<'_> {
    fn score(&self, mask: &Mask) -> Result<f64> {
        let b = self.bundle;
        match mask {
            Mask::Patches(idx) => {
                if idx.is_empty() {
                    return Ok(b.score);
                }
                let m = bool_mask(idx, b.n_patches(), "patch")?;
                Ok(linear_score(&b.grad_patch_embed.data, &b.patch_embed.data, b.channel_dim, Some(&m)))
            }
            Mask::Tokens(idx) => {
                let omega = b.extra.get(MOCK_TOKEN_WEIGHTS).ok_or(Error::OracleFailure {
                    id: -1,
                    message: format!("bundle has no {MOCK_TOKEN_WEIGHTS} tensor; token masks unsupported"),
                })?;
                let m = bool_mask(idx, omega.numel(), "token")?;
                let total: f64 = omega.data.iter().map(|&v| v as f64).sum();
                let kept: f64 = omega
                    .data
                    .iter()
                    .zip(&m)
                    .filter(|(_, &masked)| !masked)
                    .map(|(&v, _)| v as f64)
                    .sum();
                if kept == total {
                    return Ok(b.score);
                }
                Ok(b.score * kept / total)
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct OracleRequest<'a> {
    id: i64,
    bundle: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    patch_mask: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_mask: Option<&'a [usize]>,
    fill: Fill,
}

#[derive(Debug, Deserialize)]
struct OracleResponse {
    id: i64,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: i64,
}

/// External oracle process. Requests from concurrent callers are serialized.
pub struct SubprocessOracle {
    channel: Mutex<Channel>,
    fill: Fill,
}

impl SubprocessOracle {
    /// Spawns `command`, split on whitespace into program and arguments.
    pub fn spawn(command: &str, fill: Fill) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty oracle command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            channel: Mutex::new(Channel {
                child,
                stdin,
                stdout,
                next_id: 0,
            }),
            fill,
        })
    }

    pub fn fill(&self) -> Fill {
        self.fill
    }

    /// Oracle view for one bundle directory.
    pub fn bind<'a>(&'a self, bundle_dir: &Path) -> BoundOracle<'a> {
        BoundOracle {
            oracle: self,
            bundle_dir: bundle_dir.to_path_buf(),
        }
    }

    fn request(&self, bundle_dir: &Path, mask: &Mask) -> Result<f64> {
        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        let id = ch.next_id;
        ch.next_id += 1;
        let (patch_mask, token_mask) = match mask {
            Mask::Patches(p) => (Some(p.as_slice()), None),
            Mask::Tokens(t) => (None, Some(t.as_slice())),
        };
        let req = OracleRequest {
            id,
            bundle: bundle_dir,
            patch_mask,
            token_mask,
            fill: self.fill,
        };
        let fail = |message: String| Error::OracleFailure { id, message };
        let mut line = serde_json::to_string(&req).map_err(|e| fail(e.to_string()))?;
        line.push('\n');
        ch.stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| fail(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = ch
            .stdout
            .read_line(&mut reply)
            .map_err(|e| fail(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(fail("oracle closed its output".into()));
        }
        let resp: OracleResponse =
            serde_json::from_str(reply.trim_end()).map_err(|e| fail(format!("malformed response {reply:?}: {e}")))?;
        if resp.id != id {
            return Err(fail(format!("response id {} does not echo request id", resp.id)));
        }
        match (resp.score, resp.error) {
            (_, Some(message)) => Err(fail(message)),
            (Some(s), None) if s.is_finite() => Ok(s),
            (Some(s), None) => Err(fail(format!("non-finite score {s}"))),
            (None, None) => Err(fail("response carries neither score nor error".into())),
        }
    }
}

impl Drop for SubprocessOracle {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|p| p.into_inner());
        // Closing stdin is the shutdown signal; kill covers servers that ignore it.
        let _ = ch.stdin.flush();
        let _ = ch.child.kill();
        let _ = ch.child.wait();
    }
}

pub struct BoundOracle<'a> {
    oracle: &'a SubprocessOracle,
    bundle_dir: PathBuf,
}

impl ScoreOracle for BoundOracle<'_> {
    fn score(&self, mask: &Mask) -> Result<f64> {
        self.oracle.request(&self.bundle_dir, mask)
    }
}

/// Parsed request as seen by an oracle server.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ServedRequest {
    pub id: i64,
    pub bundle: PathBuf,
    #[serde(default)]
    pub patch_mask: Option<Vec<usize>>,
    #[serde(default)]
    pub token_mask: Option<Vec<usize>>,
    #[serde(default = "default_fill")]
    pub fill: Fill,
}

fn default_fill() -> Fill {
    Fill::Zero
}

/// Serves the line protocol with the mock oracle until `input` closes.
/// Bundles are loaded on first use and cached by path.
pub fn serve_mock_oracle<R: BufRead, W: Write>(input: R, mut output: W) -> std::io::Result<()> {
    let mut cache: std::collections::HashMap<PathBuf, IntermediatesBundle> = Default::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ServedRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_i64()))
                    .unwrap_or(-1);
                serde_json::json!({ "id": id, "error": format!("bad request: {e}") })
            }
            Ok(req) => {
                let result = (|| {
                    let mask = match (req.patch_mask, req.token_mask) {
                        (Some(p), None) => Mask::Patches(p),
                        (None, Some(t)) => Mask::Tokens(t),
                        _ => {
                            return Err(Error::InvalidParameter(
                                "exactly one of patch_mask and token_mask is required".into(),
                            ))
                        }
                    };
                    if !cache.contains_key(&req.bundle) {
                        let b = crate::bundle::load_bundle(&req.bundle)?;
                        cache.insert(req.bundle.clone(), b);
                    }
                    mock_oracle(&cache[&req.bundle]).score(&mask)
                })();
                match result {
                    Ok(score) => serde_json::json!({ "id": req.id, "score": score }),
                    Err(e) => serde_json::json!({ "id": req.id, "error": e.to_string() }),
                }
            }
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::mock::{mock_bundle, MockConfig, MockModel};

    #[test]
    fn empty_mask_gives_exact_score_and_full_mask_zero() {
        let b = mock_bundle(2, 3, 4, 4, 8);
        let o = mock_oracle(&b);
        assert_eq!(o.score(&Mask::none()).unwrap(), b.score);
        assert_eq!(o.score(&Mask::patches((0..16).collect())).unwrap(), 0.0);
    }

    #[test]
    fn masked_score_is_score_minus_contributions() {
        let b = mock_bundle(8, 2, 3, 3, 6);
        let o = mock_oracle(&b);
        let contrib = |i: usize| -> f64 {
            b.grad_patch_embed.row(i).iter().zip(b.patch_embed.row(i)).map(|(&g, &e)| g as f64 * e as f64).sum()
        };
        let masked = o.score(&Mask::patches(vec![1, 4, 7])).unwrap();
        let expected = b.score - contrib(1) - contrib(4) - contrib(7);
        assert!((masked - expected).abs() < 1e-12);
    }

    #[test]
    fn token_mask_scales_by_omega() {
        let m = MockModel::generate(&MockConfig::new(4, 2, 2, 2, 8).with_text("right apex opacity"));
        let b = m.bundle();
        let o = mock_oracle(&b);
        assert_eq!(o.score(&Mask::tokens(vec![])).unwrap(), b.score);
        assert_eq!(o.score(&Mask::tokens(vec![0, 1, 2])).unwrap(), 0.0);
        let omega = &m.text.as_ref().unwrap().omega;
        let s = o.score(&Mask::tokens(vec![1])).unwrap();
        assert!((s - b.score * (1.0 - omega[1])).abs() < 1e-6 * b.score.abs().max(1.0));
    }

    #[test]
    fn out_of_range_index_rejected() {
        let b = mock_bundle(2, 1, 2, 2, 2);
        assert!(mock_oracle(&b).score(&Mask::patches(vec![4])).is_err());
        assert!(matches!(mock_oracle(&b).score(&Mask::tokens(vec![0])), Err(Error::OracleFailure { .. })));
    }

    #[test]
    fn server_answers_in_order_and_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let b = mock_bundle(1, 2, 2, 2, 4);
        crate::bundle::save_bundle(&b, dir.path()).unwrap();
        let p = dir.path().display();
        let input = format!(
            "{{\"id\":0,\"bundle\":\"{p}\",\"patch_mask\":[],\"fill\":\"mean\"}}\n\
             {{\"id\":1,\"bundle\":\"{p}\",\"patch_mask\":[0,1,2,3],\"fill\":\"zero\"}}\n\
             {{\"id\":2,\"bundle\":\"{p}\"}}\n\
             not json\n"
        );
        let mut out = Vec::new();
        serve_mock_oracle(input.as_bytes(), &mut out).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["score"].as_f64().unwrap(), b.score);
        assert_eq!(lines[1]["score"].as_f64().unwrap(), 0.0);
        assert_eq!(lines[2]["id"], 2);
        assert!(lines[2]["error"].is_string());
        assert_eq!(lines[3]["id"], -1);
    }
}
