//! Synthetic record generation.
//!
//! Produces annotated multi-line "records" (text plus entity labels) and
//! renders them to grayscale images, so every experiment runs without any
//! proprietary dataset. Generation and rendering are pure functions of
//! (seed, config).

mod glyphs;
mod grammar;
mod manifest;
mod render;

pub use glyphs::{glyph_ink_count, glyph_strokes, GLYPH_GRID_H, GLYPH_GRID_W};
pub use grammar::{GrammarConfig, Template, TemplateToken};
pub use manifest::{
    build_dataset, load_image, read_manifest, save_png, DatasetConfig, DatasetManifest,
    ManifestLine, ManifestRow, ManifestWord, Split,
};
pub use render::{render_record, RenderConfig};

use crate::error::{Error, Result};
use crate::rng::{label, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Entity label sets
// ---------------------------------------------------------------------------

/// Semantic class of an entity word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Name,
    Surname,
    Occupation,
    Location,
    State,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Name,
        Category::Surname,
        Category::Occupation,
        Category::Location,
        Category::State,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Name => "name",
            Category::Surname => "surname",
            Category::Occupation => "occupation",
            Category::Location => "location",
            Category::State => "state",
            Category::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.as_str() == s)
    }
}

/// Which person an entity word refers to. `NoPerson` is a real tag value
/// ("none"), distinct from a word carrying no tags at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Person {
    Husband,
    Wife,
    HusbandsFather,
    HusbandsMother,
    WifesFather,
    WifesMother,
    OtherPerson,
    #[serde(rename = "none")]
    NoPerson,
}

impl Person {
    pub const ALL: [Person; 8] = [
        Person::Husband,
        Person::Wife,
        Person::HusbandsFather,
        Person::HusbandsMother,
        Person::WifesFather,
        Person::WifesMother,
        Person::OtherPerson,
        Person::NoPerson,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Person::Husband => "husband",
            Person::Wife => "wife",
            Person::HusbandsFather => "husbands_father",
            Person::HusbandsMother => "husbands_mother",
            Person::WifesFather => "wifes_father",
            Person::WifesMother => "wifes_mother",
            Person::OtherPerson => "other_person",
            Person::NoPerson => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Person> {
        Person::ALL.iter().copied().find(|p| p.as_str() == s)
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// One word of a record, optionally carrying an entity label.
/// `category` and `person` are either both set or both unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedWord {
    pub text: String,
    pub category: Option<Category>,
    pub person: Option<Person>,
}

impl TaggedWord {
    pub fn plain(text: impl Into<String>) -> Self {
        TaggedWord {
            text: text.into(),
            category: None,
            person: None,
        }
    }

    pub fn tagged(text: impl Into<String>, category: Category, person: Person) -> Self {
        TaggedWord {
            text: text.into(),
            category: Some(category),
            person: Some(person),
        }
    }

    pub fn is_entity(&self) -> bool {
        self.category.is_some()
    }
}

pub type Line = Vec<TaggedWord>;

/// A multi-line record: ordered lines of words with entity labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub lines: Vec<Line>,
}

impl Record {
    /// Line count L.
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Word count N.
    pub fn n_words(&self) -> usize {
        self.lines.iter().map(|l| l.len()).sum()
    }

    /// Tag-bearing word count M.
    pub fn n_tagged(&self) -> usize {
        self.lines
            .iter()
            .flat_map(|l| l.iter())
            .filter(|w| w.is_entity())
            .count()
    }

    /// Iterate words in reading order.
    pub fn words(&self) -> impl Iterator<Item = &TaggedWord> {
        self.lines.iter().flat_map(|l| l.iter())
    }

    /// Full transcription: words joined by spaces, lines by newlines.
    pub fn text(&self) -> String {
        self.lines
            .iter()
            .map(|l| {
                l.iter()
                    .map(|w| w.text.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Check the structural invariants (L >= 1, non-empty lines, well-formed
    /// words). Generated records always satisfy these; decoded model output
    /// may not and is kept as-is with diagnostics instead.
    pub fn validate(&self, charset: &[char]) -> Result<()> {
        if self.lines.is_empty() {
            return Err(Error::data(format!("record {}: no lines", self.id)));
        }
        for (i, line) in self.lines.iter().enumerate() {
            if line.is_empty() {
                return Err(Error::data(format!("record {}: line {} empty", self.id, i)));
            }
            for w in line {
                if w.text.is_empty() {
                    return Err(Error::data(format!("record {}: empty word", self.id)));
                }
                if w.category.is_some() != w.person.is_some() {
                    return Err(Error::data(format!(
                        "record {}: word {:?} has partial tags",
                        self.id, w.text
                    )));
                }
                for c in w.text.chars() {
                    if c.is_whitespace() || c == '[' || c == ']' {
                        return Err(Error::data(format!(
                            "record {}: word {:?} contains {:?}",
                            self.id, w.text, c
                        )));
                    }
                    if !charset.contains(&c) {
                        return Err(Error::data(format!(
                            "record {}: char {:?} not in charset",
                            self.id, c
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// 8-bit grayscale raster: 0 = black ink, 255 = background.
/// `line_boxes` are `(y_top, y_bottom)` half-open row spans, one per line,
/// vertically ordered and non-overlapping, covering that line's ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub line_boxes: Vec<(usize, usize)>,
}

impl GrayImage {
    pub fn blank(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![255u8; width * height],
            line_boxes: Vec::new(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < 128).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.width * self.height {
            return Err(Error::data("pixel buffer length mismatch"));
        }
        let mut prev_end = 0usize;
        for &(top, bot) in &self.line_boxes {
            if top < prev_end || bot <= top || bot > self.height {
                return Err(Error::data("line boxes unordered or overlapping"));
            }
            prev_end = bot;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Record generation
// ---------------------------------------------------------------------------

/// Generate one annotated record. Deterministic for a fixed `(seed, cfg)`:
/// a template is drawn, its slots are filled from the matching lexicons, and
/// the resulting word stream is wrapped into a feasible number of lines.
pub fn generate_record(seed: u64, cfg: &GrammarConfig) -> Result<Record> {
    cfg.validate()?;
    let mut rng = stream(seed, &[label("grammar")]);

    let template = &cfg.templates[rng.random_range(0..cfg.templates.len())];
    let mut words: Vec<TaggedWord> = Vec::new();
    for tok in &template.tokens {
        match tok {
            TemplateToken::Literal(t) => words.push(TaggedWord::plain(t.clone())),
            TemplateToken::Slot { category, person } => {
                let lex = cfg
                    .lexicons
                    .get(category)
                    .ok_or_else(|| Error::config(format!("no lexicon for {}", category.as_str())))?;
                let w = &lex[rng.random_range(0..lex.len())];
                words.push(TaggedWord::tagged(w.clone(), *category, *person));
            }
        }
    }

    let feasible = cfg.feasible_line_counts(words.len());
    if feasible.is_empty() {
        return Err(Error::config(format!(
            "no feasible line count for a {}-word template",
            words.len()
        )));
    }
    let n_lines = feasible[rng.random_range(0..feasible.len())];

    // Distribute words as evenly as possible: the first N % L lines get one extra.
    let n = words.len();
    let base = n / n_lines;
    let extra = n % n_lines;
    let mut lines = Vec::with_capacity(n_lines);
    let mut it = words.into_iter();
    for i in 0..n_lines {
        let take = base + usize::from(i < extra);
        lines.push(it.by_ref().take(take).collect::<Line>());
    }

    Ok(Record {
        id: format!("rec{seed:06}"),
        lines,
    })
}

// ---------------------------------------------------------------------------
// Block extraction
// ---------------------------------------------------------------------------

/// Cut a `k`-line block starting at `start_line` (1-based) out of a record
/// and its rendered image. Labels are preserved verbatim. The image strip
/// extends to the midpoints of the gaps around the selected lines (or the
/// image border), so `extract_block(rec, img, 1, L)` is the identity.
pub fn extract_block(
    rec: &Record,
    img: &GrayImage,
    start_line: usize,
    k: usize,
) -> Result<(Record, GrayImage)> {
    let l = rec.n_lines();
    if start_line < 1 || k < 1 || start_line + k - 1 > l {
        return Err(Error::bounds(format!(
            "block (start={start_line}, k={k}) out of range for {l} lines"
        )));
    }
    if img.line_boxes.len() != l {
        return Err(Error::data(format!(
            "image has {} line boxes, record has {} lines",
            img.line_boxes.len(),
            l
        )));
    }
    let first = start_line - 1;
    let last = start_line + k - 2;

    let y0 = if first == 0 {
        0
    } else {
        (img.line_boxes[first - 1].1 + img.line_boxes[first].0) / 2
    };
    let y1 = if last == l - 1 {
        img.height
    } else {
        (img.line_boxes[last].1 + img.line_boxes[last + 1].0) / 2
    };

    let out = GrayImage {
        width: img.width,
        height: y1 - y0,
        pixels: img.pixels[y0 * img.width..y1 * img.width].to_vec(),
        line_boxes: img.line_boxes[first..=last]
            .iter()
            .map(|&(t, b)| (t - y0, b - y0))
            .collect(),
    };
    out.validate()?;

    let sub = Record {
        id: format!("{}#l{}k{}", rec.id, start_line, k),
        lines: rec.lines[first..=last].to_vec(),
    };
    Ok((sub, out))
}
