//! Glyph rasterization and record rendering.

use super::glyphs::glyph_strokes;
use super::{GrayImage, Record};
use crate::error::{Error, Result};
use crate::rng::{label, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Rendering parameters. Distances marked "grid units" are multiplied by
/// `scale`; the glyph design grid is 8x12 units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Pixels per glyph grid unit.
    pub scale: u32,
    /// Horizontal advance per character, grid units.
    pub char_advance: f32,
    /// Extra gap between words, grid units.
    pub word_gap: f32,
    /// Vertical gap between line bands, grid units.
    pub line_gap: f32,
    /// Page margin, pixels.
    pub margin: u32,
    /// Max per-glyph placement jitter, pixels (drawn uniformly in [-j, j]).
    pub jitter: u32,
    /// Max per-glyph shear; x shifts by `slant * (baseline - y)`.
    pub slant_max: f32,
    /// Stroke thickness range, pixels.
    pub thickness_min: u32,
    pub thickness_max: u32,
    /// Per-pixel salt-and-pepper probability inside each glyph cell.
    pub noise_p: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            scale: 2,
            char_advance: 7.0,
            word_gap: 4.0,
            line_gap: 4.0,
            margin: 8,
            jitter: 1,
            slant_max: 0.12,
            thickness_min: 1,
            thickness_max: 2,
            noise_p: 0.01,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::config("render scale must be >= 1"));
        }
        if self.thickness_min == 0 || self.thickness_max < self.thickness_min {
            return Err(Error::config("invalid stroke thickness range"));
        }
        if self.noise_p < 0.0 || self.noise_p > 0.02 {
            return Err(Error::config("noise_p must be in [0, 0.02]"));
        }
        if self.jitter > 2 {
            return Err(Error::config("jitter must be <= 2 px"));
        }
        // Jittered, thickened ink must stay inside its line band so that
        // line boxes never overlap.
        let half_gap = self.line_gap * self.scale as f32 / 2.0;
        if (self.jitter + self.thickness_max) as f32 >= half_gap {
            return Err(Error::config(
                "line_gap too small for the configured jitter and thickness",
            ));
        }
        Ok(())
    }

    fn advance_px(&self) -> usize {
        (self.char_advance * self.scale as f32).round() as usize
    }

    fn word_gap_px(&self) -> usize {
        (self.word_gap * self.scale as f32).round() as usize
    }

    fn line_pitch_px(&self) -> usize {
        ((12.0 + self.line_gap) * self.scale as f32).round() as usize
    }

    fn glyph_h_px(&self) -> usize {
        12 * self.scale as usize
    }
}

/// Rasterize one glyph's strokes at the origin: returns the set of ink
/// pixels relative to the glyph's top-left corner. Pure in its arguments,
/// so an identical glyph stamps an identical pattern anywhere on the page.
pub(super) fn rasterize_glyph(
    strokes: &[&[(f32, f32)]],
    scale: u32,
    thickness: u32,
    slant: f32,
) -> BTreeSet<(i32, i32)> {
    let s = scale as f32;
    let baseline = 9.0 * s;
    let mut px = BTreeSet::new();
    for poly in strokes {
        for seg in poly.windows(2) {
            let (x0, y0) = (seg[0].0 * s, seg[0].1 * s);
            let (x1, y1) = (seg[1].0 * s, seg[1].1 * s);
            let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            let steps = (len * 3.0).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let t = i as f32 / steps as f32;
                let y = y0 + (y1 - y0) * t;
                let x = x0 + (x1 - x0) * t + slant * (baseline - y);
                let (cx, cy) = (x.round() as i32, y.round() as i32);
                // A thickness-t stroke stamps a t x t block.
                for dy in 0..thickness as i32 {
                    for dx in 0..thickness as i32 {
                        px.insert((cx + dx, cy + dy));
                    }
                }
            }
        }
    }
    px
}

/// Render a record to a grayscale page. Deterministic for a fixed
/// `(rec, seed, cfg)`: every per-glyph perturbation (jitter, slant, stroke
/// thickness, salt-and-pepper noise) is drawn from a stream derived from
/// `(seed, line, word, char)`.
pub fn render_record(rec: &Record, seed: u64, cfg: &RenderConfig) -> Result<GrayImage> {
    cfg.validate()?;
    for w in rec.words() {
        for c in w.text.chars() {
            if glyph_strokes(c).is_none() {
                return Err(Error::UnknownChar(c, "glyph set"));
            }
        }
    }
    if rec.lines.is_empty() {
        return Err(Error::data("cannot render a record with no lines"));
    }

    let adv = cfg.advance_px();
    let gap = cfg.word_gap_px();
    let pitch = cfg.line_pitch_px();
    let margin = cfg.margin as usize;

    let line_width = |line: &super::Line| -> usize {
        let chars: usize = line.iter().map(|w| w.text.chars().count()).sum();
        chars * adv + line.len().saturating_sub(1) * gap
    };
    let max_w = rec.lines.iter().map(|l| line_width(l)).max().unwrap_or(0);
    let width = max_w + 2 * margin + 2 * cfg.jitter as usize + 2;
    let height = rec.lines.len() * pitch + 2 * margin;

    let mut img = GrayImage::blank(width, height);
    let glyph_label = label("glyph");

    for (li, line) in rec.lines.iter().enumerate() {
        let line_top = (margin + li * pitch) as i32;
        let mut x = (margin + cfg.jitter as usize + 1) as i32;
        for (wi, word) in line.iter().enumerate() {
            if wi > 0 {
                x += gap as i32;
            }
            for (ci, ch) in word.text.chars().enumerate() {
                let mut rng = stream(
                    seed,
                    &[glyph_label, li as u64, wi as u64, ci as u64],
                );
                let j = cfg.jitter as i32;
                let jx = rng.random_range(-j..=j);
                let jy = rng.random_range(-j..=j);
                let slant = if cfg.slant_max > 0.0 {
                    rng.random_range(-cfg.slant_max..cfg.slant_max)
                } else {
                    0.0
                };
                let thickness = rng.random_range(cfg.thickness_min..=cfg.thickness_max);

                let strokes = glyph_strokes(ch).expect("checked above");
                for (dx, dy) in rasterize_glyph(strokes, cfg.scale, thickness, slant) {
                    let px = x + jx + dx;
                    let py = line_top + jy + dy;
                    if px >= 0 && py >= 0 {
                        img.put(px as usize, py as usize, 0);
                    }
                }

                // Salt-and-pepper inside this glyph's cell.
                if cfg.noise_p > 0.0 {
                    let cell_h = cfg.glyph_h_px() as i32;
                    for py in line_top..line_top + cell_h {
                        for px in x..x + adv as i32 {
                            if rng.random_bool(cfg.noise_p) {
                                let ink = rng.random_bool(0.5);
                                if px >= 0 && py >= 0 {
                                    img.put(px as usize, py as usize, if ink { 0 } else { 255 });
                                }
                            }
                        }
                    }
                }
                x += adv as i32;
            }
        }
    }

    // Line boxes from actual ink inside each line's (disjoint) band.
    let half_gap = ((cfg.line_gap * cfg.scale as f32) / 2.0) as usize;
    let mut boxes = Vec::with_capacity(rec.lines.len());
    for li in 0..rec.lines.len() {
        let band_top = (margin + li * pitch).saturating_sub(half_gap);
        let band_bot = (margin + li * pitch + cfg.glyph_h_px() + half_gap).min(height);
        let mut top = None;
        let mut bot = None;
        for y in band_top..band_bot {
            let row = &img.pixels[y * width..(y + 1) * width];
            if row.iter().any(|&p| p < 128) {
                top.get_or_insert(y);
                bot = Some(y + 1);
            }
        }
        match (top, bot) {
            (Some(t), Some(b)) => boxes.push((t, b)),
            _ => return Err(Error::data(format!("line {li} rendered no ink"))),
        }
    }
    img.line_boxes = boxes;
    img.validate()?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate_record, glyph_ink_count, GrammarConfig, TaggedWord};

    fn one_line_record(text: &str) -> Record {
        Record {
            id: "t".into(),
            lines: vec![text.split(' ').map(TaggedWord::plain).collect()],
        }
    }

    #[test]
    fn ink_stays_inside_line_boxes() {
        let rec = one_line_record("ab");
        let img = render_record(&rec, 5, &RenderConfig::default()).unwrap();
        assert_eq!(img.line_boxes.len(), 1);
        let (top, bot) = img.line_boxes[0];
        for y in 0..img.height {
            let has_ink = (0..img.width).any(|x| img.get(x, y) < 128);
            if has_ink {
                assert!(y >= top && y < bot, "ink at row {y} outside box {top}..{bot}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = GrammarConfig::default();
        let rec = generate_record(9, &cfg).unwrap();
        let a = render_record(&rec, 1, &RenderConfig::default()).unwrap();
        let b = render_record(&rec, 1, &RenderConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = render_record(&rec, 2, &RenderConfig::default()).unwrap();
        assert_ne!(a.pixels, c.pixels, "different seeds should perturb differently");
    }

    #[test]
    fn clean_render_conserves_glyph_ink() {
        // With all perturbations off, page ink equals the sum of the
        // reference ink counts of every glyph, counted directly.
        let cfg = RenderConfig {
            jitter: 0,
            slant_max: 0.0,
            noise_p: 0.0,
            thickness_min: 1,
            thickness_max: 1,
            ..RenderConfig::default()
        };
        let rec = Record {
            id: "t".into(),
            lines: vec![
                "the quick brown fox".split(' ').map(TaggedWord::plain).collect(),
                "jumps over lazy dogs".split(' ').map(TaggedWord::plain).collect(),
            ],
        };
        let img = render_record(&rec, 0, &cfg).unwrap();
        let expected: usize = rec
            .words()
            .flat_map(|w| w.text.chars())
            .map(|c| glyph_ink_count(c, cfg.scale, 1).unwrap())
            .sum();
        assert_eq!(img.ink_count(), expected);
    }

    #[test]
    fn missing_glyph_is_reported_by_character() {
        let rec = one_line_record("naïve");
        match render_record(&rec, 0, &RenderConfig::default()) {
            Err(crate::Error::UnknownChar(c, _)) => assert_eq!(c, 'ï'),
            other => panic!("expected UnknownChar, got {other:?}"),
        }
    }
}
