//! Heatmap overlays and token highlighting.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::attribution::TokenRelevance;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::grid::Grid;

/// Colormap stops: position and RGB.
pub const COLORMAP: [(f64, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

/// Gray level used when a bundle carries no source image.
pub const NEUTRAL_GRAY: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub alpha: f64,
    pub threshold: f64,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            threshold: 0.2,
        }
    }
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidParameter(format!("threshold must be in [0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Piecewise-linear colormap in floating point; input is clamped to `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    for pair in COLORMAP.windows(2) {
        let ((p0, c0), (p1, c1)) = (pair[0], pair[1]);
        if v <= p1 {
            let t = (v - p0) / (p1 - p0);
            return std::array::from_fn(|k| c0[k] as f64 + t * (c1[k] as f64 - c0[k] as f64));
        }
    }
    COLORMAP[4].1.map(f64::from)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `out = (1 - a) * base + a * colormap(heat)` with `a = alpha` where
/// `heat >= threshold` and 0 elsewhere.
pub fn colorize_overlay(base: &GrayImage, heat: &Grid, cfg: &OverlayConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let (w, h) = base.dimensions();
    if (h as usize, w as usize) != (heat.h, heat.w) {
        return Err(Error::DimensionMismatch(format!(
            "base image is {h}x{w} but heat map is {}x{}",
            heat.h, heat.w
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let g = base.get_pixel(x, y)[0];
        let v = heat.get(y as usize, x as usize);
        if !(v >= cfg.threshold) {
            return Rgb([g, g, g]);
        }
        let c = colormap(v);
        let a = cfg.alpha;
        Rgb(c.map(|ck| to_u8((1.0 - a) * g as f64 + a * ck)))
    }))
}

/// Uniform gray base of the given size.
pub fn neutral_base(height: usize, width: usize) -> GrayImage {
    GrayImage::from_pixel(width as u32, height as u32, Luma([NEUTRAL_GRAY]))
}

pub fn load_grayscale(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?.into_luma8())
}

/// Encodes as PNG and writes atomically.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    atomic_write(path, buf.get_ref())
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// HTML fragment with each token's background opacity set to its score.
/// Tokens scoring zero are left as plain text.
pub fn tokens_html(tok: &TokenRelevance) -> Result<String> {
    if tok.tokens.len() != tok.scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} tokens but {} scores",
            tok.tokens.len(),
            tok.scores.len()
        )));
    }
    let mut out = String::from("<p class=\"matex-tokens\">");
    for (i, (t, &s)) in tok.tokens.iter().zip(&tok.scores).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let text = escape_html(t);
        let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
        if s > 0.0 {
            let _ = write!(out, "<span style=\"background-color: rgba(255, 0, 0, {s})\">{text}</span>");
        } else {
            out.push_str(&text);
        }
    }
    out.push_str("</p>\n");
    Ok(out)
}

pub fn render_tokens(tok: &TokenRelevance, path: &Path) -> Result<()> {
    atomic_write(path, tokens_html(tok)?.as_bytes())
}
