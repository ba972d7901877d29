//! Class set and target-sequence codec.
//!
//! The decoder's output classes are the visual labels (the charset, including
//! the space that separates words) plus contextual labels: the four structural
//! markers and the entity-tag tokens of the active tagging scheme. A record is
//! serialized as `<sop> .. <eop>` with `<eol>` between lines and tag tokens
//! placed immediately before the word they label.

use crate::datasynth::{Category, GrammarConfig, Person, Record, TaggedWord};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: u32 = 0;
pub const SOP: u32 = 1;
pub const EOL: u32 = 2;
pub const EOP: u32 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One `[category_person]` token per entity word.
    #[default]
    Joint,
    /// A `[category]` token then a `[person]` token per entity word.
    Separate,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Joint => "joint",
            Scheme::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "joint" => Some(Scheme::Joint),
            "separate" => Some(Scheme::Separate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Pad,
    Sop,
    Eol,
    Eop,
    Char(char),
    Cat(Category),
    Per(Person),
    Pair(Category, Person),
}

impl Label {
    pub fn as_string(&self) -> String {
        match self {
            Label::Pad => "<pad>".into(),
            Label::Sop => "<sop>".into(),
            Label::Eol => "<eol>".into(),
            Label::Eop => "<eop>".into(),
            Label::Char(c) => c.to_string(),
            Label::Cat(c) => format!("[{}]", c.as_str()),
            Label::Per(p) => format!("[{}]", p.as_str()),
            Label::Pair(c, p) => format!("[{}_{}]", c.as_str(), p.as_str()),
        }
    }

    /// Inverse of [`Label::as_string`]. Bracketed bodies are tried as a bare
    /// category, a bare person, then a `category_person` pair; the three
    /// namespaces are disjoint, so the order only matters for pairs, whose
    /// bodies never equal a bare name.
    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "<pad>" => return Ok(Label::Pad),
            "<sop>" => return Ok(Label::Sop),
            "<eol>" => return Ok(Label::Eol),
            "<eop>" => return Ok(Label::Eop),
            _ => {}
        }
        if let Some(body) = s.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
            if let Some(c) = Category::parse(body) {
                return Ok(Label::Cat(c));
            }
            if let Some(p) = Person::parse(body) {
                return Ok(Label::Per(p));
            }
            if let Some((a, b)) = body.split_once('_') {
                if let (Some(c), Some(p)) = (Category::parse(a), Person::parse(b)) {
                    return Ok(Label::Pair(c, p));
                }
            }
            return Err(Error::data(format!("unknown tag label {s:?}")));
        }
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Ok(Label::Char(c)),
            _ => Err(Error::data(format!("unparseable label {s:?}"))),
        }
    }

    pub fn is_tag(&self) -> bool {
        matches!(self, Label::Cat(_) | Label::Per(_) | Label::Pair(..))
    }
}

/// Immutable class set. Index 0 is `<pad>`, 1..=3 the structural markers,
/// then the charset in configured order, then the tag tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    scheme: Scheme,
    labels: Vec<Label>,
    index: BTreeMap<Label, u32>,
}

pub fn build_vocab(
    scheme: Scheme,
    charset: &[char],
    categories: &[Category],
    persons: &[Person],
    observed_pairs: &[(Category, Person)],
) -> Result<Vocab> {
    if charset.is_empty() {
        return Err(Error::config("charset is empty"));
    }
    let mut labels = vec![Label::Pad, Label::Sop, Label::Eol, Label::Eop];
    labels.extend(charset.iter().map(|&c| Label::Char(c)));
    match scheme {
        Scheme::Separate => {
            labels.extend(categories.iter().map(|&c| Label::Cat(c)));
            labels.extend(persons.iter().map(|&p| Label::Per(p)));
        }
        Scheme::Joint => {
            for &(c, p) in observed_pairs {
                if !categories.contains(&c) || !persons.contains(&p) {
                    return Err(Error::config(format!(
                        "observed pair [{}_{}] outside the configured label sets",
                        c.as_str(),
                        p.as_str()
                    )));
                }
                labels.push(Label::Pair(c, p));
            }
        }
    }
    Vocab::from_labels(scheme, labels)
}

impl Vocab {
    /// Builds the vocabulary a grammar induces under the given scheme.
    pub fn for_grammar(scheme: Scheme, g: &GrammarConfig) -> Result<Vocab> {
        build_vocab(
            scheme,
            &g.charset,
            &g.categories,
            &g.persons,
            &g.observed_pairs(),
        )
    }

    fn from_labels(scheme: Scheme, labels: Vec<Label>) -> Result<Vocab> {
        if labels.len() < 4
            || labels[..4] != [Label::Pad, Label::Sop, Label::Eol, Label::Eop]
        {
            return Err(Error::config(
                "vocabulary must start with <pad> <sop> <eol> <eop>",
            ));
        }
        let mut index = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            match l {
                Label::Cat(_) | Label::Per(_) if scheme == Scheme::Joint => {
                    return Err(Error::config("singleton tag in a joint vocabulary"))
                }
                Label::Pair(..) if scheme == Scheme::Separate => {
                    return Err(Error::config("pair tag in a separate vocabulary"))
                }
                _ => {}
            }
            if index.insert(*l, i as u32).is_some() {
                return Err(Error::config(format!(
                    "duplicate label {:?}",
                    l.as_string()
                )));
            }
        }
        Ok(Vocab {
            scheme,
            labels,
            index,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// NB_class: the decoder's output dimension.
    pub fn nb_class(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, idx: u32) -> Result<&Label> {
        self.labels
            .get(idx as usize)
            .ok_or_else(|| Error::bounds(format!("class index {idx} >= {}", self.labels.len())))
    }

    pub fn index_of(&self, l: &Label) -> Option<u32> {
        self.index.get(l).copied()
    }

    pub fn char_index(&self, c: char) -> Result<u32> {
        self.index_of(&Label::Char(c))
            .ok_or(Error::UnknownChar(c, "vocabulary"))
    }

    pub fn is_tag(&self, idx: u32) -> bool {
        self.labels
            .get(idx as usize)
            .is_some_and(|l| l.is_tag())
    }

    /// Renders a token stream for logs and test failure messages.
    pub fn describe(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| {
                self.label(t)
                    .map(|l| l.as_string())
                    .unwrap_or_else(|_| format!("<bad:{t}>"))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex digest of the canonical JSON form; stored in checkpoints so a
    /// model is never evaluated against a different class set.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("vocab serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabJson {
    scheme: Scheme,
    labels: Vec<String>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        VocabJson {
            scheme: self.scheme,
            labels: self.labels.iter().map(Label::as_string).collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Vocab, D::Error> {
        let raw = VocabJson::deserialize(de)?;
        let labels = raw
            .labels
            .iter()
            .map(|s| Label::parse(s))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Vocab::from_labels(raw.scheme, labels).map_err(serde::de::Error::custom)
    }
}

/// A decoder target or decoder output: class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Structural invariants of well-formed targets. Model output is not
    /// required to satisfy these; `decode_target` accepts anything.
    pub fn validate(&self, v: &Vocab) -> Result<()> {
        if self.tokens.first() != Some(&SOP) {
            return Err(Error::data("sequence does not start with <sop>"));
        }
        if self.tokens.last() != Some(&EOP) {
            return Err(Error::data("sequence does not end with <eop>"));
        }
        for &t in &self.tokens {
            v.label(t)?;
        }
        if self.tokens[1..self.tokens.len() - 1].contains(&PAD) {
            return Err(Error::data("<pad> between markers"));
        }
        Ok(())
    }
}

pub fn encode_target(rec: &Record, v: &Vocab, include_tags: bool) -> Result<TokenSequence> {
    let mut tokens = vec![SOP];
    let n_lines = rec.lines.len();
    for (li, line) in rec.lines.iter().enumerate() {
        for (wi, w) in line.iter().enumerate() {
            if wi > 0 {
                tokens.push(v.char_index(' ')?);
            }
            if include_tags {
                push_tags(&mut tokens, v, w)?;
            }
            for c in w.text.chars() {
                if c.is_whitespace() {
                    return Err(Error::data(format!("word {:?} contains whitespace", w.text)));
                }
                tokens.push(v.char_index(c)?);
            }
        }
        if li + 1 < n_lines {
            tokens.push(EOL);
        }
    }
    tokens.push(EOP);
    Ok(TokenSequence { tokens })
}

fn push_tags(tokens: &mut Vec<u32>, v: &Vocab, w: &TaggedWord) -> Result<()> {
    match (v.scheme, w.category, w.person) {
        (_, None, None) => {}
        (Scheme::Joint, Some(c), Some(p)) => {
            let idx = v.index_of(&Label::Pair(c, p)).ok_or_else(|| {
                Error::data(format!(
                    "pair [{}_{}] not in vocabulary",
                    c.as_str(),
                    p.as_str()
                ))
            })?;
            tokens.push(idx);
        }
        (Scheme::Joint, _, _) => {
            return Err(Error::data(format!(
                "word {:?} has partial tags; joint scheme needs both",
                w.text
            )))
        }
        (Scheme::Separate, c, p) => {
            if let Some(c) = c {
                let idx = v
                    .index_of(&Label::Cat(c))
                    .ok_or_else(|| Error::data(format!("[{}] not in vocabulary", c.as_str())))?;
                tokens.push(idx);
            }
            if let Some(p) = p {
                let idx = v
                    .index_of(&Label::Per(p))
                    .ok_or_else(|| Error::data(format!("[{}] not in vocabulary", p.as_str())))?;
                tokens.push(idx);
            }
        }
    }
    Ok(())
}

/// A violation found while decoding model output. Decoding is tolerant: it
/// reports problems and keeps going rather than failing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// A tag not followed by a word before the next same-kind tag or a
    /// boundary; dropped.
    OrphanTag { pos: usize, tag: String },
    /// A second person tag arrived while one was already pending; the first
    /// is dropped.
    DuplicatePerson { pos: usize, tag: String },
    MissingSop,
    MissingEop,
    UnexpectedToken { pos: usize, token: String },
    /// An `<eol>` arrived with no words since the previous boundary.
    EmptyLine { pos: usize },
}

impl Diagnostic {
    pub fn kind(&self) -> &'static str {
        match self {
            Diagnostic::OrphanTag { .. } => "orphan_tag",
            Diagnostic::DuplicatePerson { .. } => "duplicate_person",
            Diagnostic::MissingSop => "missing_sop",
            Diagnostic::MissingEop => "missing_eop",
            Diagnostic::UnexpectedToken { .. } => "unexpected_token",
            Diagnostic::EmptyLine { .. } => "empty_line",
        }
    }
}

struct Decoder {
    lines: Vec<Vec<TaggedWord>>,
    line: Vec<TaggedWord>,
    word: String,
    pend_cat: Option<(Category, usize)>,
    pend_per: Option<(Person, usize)>,
    pend_pair: Option<(Category, Person, usize)>,
    diags: Vec<Diagnostic>,
}

impl Decoder {
    fn flush_word(&mut self) {
        if self.word.is_empty() {
            return;
        }
        let (category, person) = if let Some((c, p, _)) = self.pend_pair.take() {
            (Some(c), Some(p))
        } else {
            (
                self.pend_cat.take().map(|(c, _)| c),
                self.pend_per.take().map(|(p, _)| p),
            )
        };
        self.line.push(TaggedWord {
            text: std::mem::take(&mut self.word),
            category,
            person,
        });
    }

    /// Pending tags hitting a boundary never get a word; report and drop.
    fn orphan_pending(&mut self) {
        if let Some((c, p, pos)) = self.pend_pair.take() {
            self.diags.push(Diagnostic::OrphanTag {
                pos,
                tag: Label::Pair(c, p).as_string(),
            });
        }
        if let Some((c, pos)) = self.pend_cat.take() {
            self.diags.push(Diagnostic::OrphanTag {
                pos,
                tag: Label::Cat(c).as_string(),
            });
        }
        if let Some((p, pos)) = self.pend_per.take() {
            self.diags.push(Diagnostic::OrphanTag {
                pos,
                tag: Label::Per(p).as_string(),
            });
        }
    }

    fn flush_line(&mut self, at_eol: Option<usize>) {
        self.flush_word();
        self.orphan_pending();
        if self.line.is_empty() {
            if let Some(pos) = at_eol {
                self.diags.push(Diagnostic::EmptyLine { pos });
            }
        } else {
            self.lines.push(std::mem::take(&mut self.line));
        }
    }
}

/// Parses a decoded token stream back into a [`Record`] (id left empty).
/// Tags attach to the next word. Fails only on out-of-range indices;
/// structural violations become [`Diagnostic`]s.
pub fn decode_target(tokens: &[u32], v: &Vocab) -> Result<(Record, Vec<Diagnostic>)> {
    let mut d = Decoder {
        lines: Vec::new(),
        line: Vec::new(),
        word: String::new(),
        pend_cat: None,
        pend_per: None,
        pend_pair: None,
        diags: Vec::new(),
    };
    if tokens.first() != Some(&SOP) {
        d.diags.push(Diagnostic::MissingSop);
    }
    let mut closed = false;
    for (pos, &t) in tokens.iter().enumerate() {
        let lab = *v.label(t)?;
        if closed {
            d.diags.push(Diagnostic::UnexpectedToken {
                pos,
                token: lab.as_string(),
            });
            continue;
        }
        match lab {
            Label::Sop if pos == 0 => {}
            Label::Sop | Label::Pad => d.diags.push(Diagnostic::UnexpectedToken {
                pos,
                token: lab.as_string(),
            }),
            Label::Eol => d.flush_line(Some(pos)),
            Label::Eop => {
                d.flush_line(None);
                closed = true;
            }
            Label::Char(' ') => d.flush_word(),
            Label::Char(c) => d.word.push(c),
            Label::Cat(c) => {
                d.flush_word();
                if let Some((old, old_pos)) = d.pend_cat.replace((c, pos)) {
                    d.diags.push(Diagnostic::OrphanTag {
                        pos: old_pos,
                        tag: Label::Cat(old).as_string(),
                    });
                }
            }
            Label::Per(p) => {
                d.flush_word();
                if let Some((old, old_pos)) = d.pend_per.replace((p, pos)) {
                    d.diags.push(Diagnostic::DuplicatePerson {
                        pos: old_pos,
                        tag: Label::Per(old).as_string(),
                    });
                }
            }
            Label::Pair(c, p) => {
                d.flush_word();
                if let Some((oc, op, old_pos)) = d.pend_pair.replace((c, p, pos)) {
                    d.diags.push(Diagnostic::OrphanTag {
                        pos: old_pos,
                        tag: Label::Pair(oc, op).as_string(),
                    });
                }
            }
        }
    }
    if !closed {
        d.diags.push(Diagnostic::MissingEop);
        d.flush_line(None);
    }
    Ok((
        Record {
            id: String::new(),
            lines: d.lines,
        },
        d.diags,
    ))
}

/// Tag-bearing words in reading order, for entity-level scoring.
pub fn parse_entities(rec: &Record) -> Vec<TaggedWord> {
    rec.words().filter(|w| w.is_entity()).cloned().collect()
}
