//! Record grammar: lexicons, sentence templates, line-wrapping rules.

use super::{Category, Person};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

/// One token of a sentence template: a fixed connector word or an entity
/// slot to be filled from the lexicon of its category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateToken {
    Literal(String),
    Slot { category: Category, person: Person },
}

/// A sentence template. Written as a whitespace-separated string where
/// `{category/person}` marks an entity slot, e.g.
/// `"en {name/husband} {surname/husband} de {location/husband}"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub tokens: Vec<TemplateToken>,
}

impl Template {
    pub fn n_words(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_slots(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, TemplateToken::Slot { .. }))
            .count()
    }

    pub fn slots(&self) -> impl Iterator<Item = (Category, Person)> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            TemplateToken::Slot { category, person } => Some((*category, *person)),
            TemplateToken::Literal(_) => None,
        })
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Template> {
        let mut tokens = Vec::new();
        for tok in s.split_whitespace() {
            if let Some(body) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                let (cat, per) = body
                    .split_once('/')
                    .ok_or_else(|| Error::config(format!("slot {tok:?} must be {{category/person}}")))?;
                let category = Category::parse(cat)
                    .ok_or_else(|| Error::config(format!("unknown category {cat:?}")))?;
                let person = Person::parse(per)
                    .ok_or_else(|| Error::config(format!("unknown person {per:?}")))?;
                tokens.push(TemplateToken::Slot { category, person });
            } else {
                tokens.push(TemplateToken::Literal(tok.to_string()));
            }
        }
        if tokens.is_empty() {
            return Err(Error::config("empty template"));
        }
        Ok(Template { tokens })
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Literal(w) => w.clone(),
                TemplateToken::Slot { category, person } => {
                    format!("{{{}/{}}}", category.as_str(), person.as_str())
                }
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl Serialize for Template {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Template {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Template, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to generate annotated records: label sets, lexicons,
/// sentence templates and line-wrapping bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub categories: Vec<Category>,
    pub persons: Vec<Person>,
    pub lexicons: BTreeMap<Category, Vec<String>>,
    pub templates: Vec<Template>,
    /// Characters records may use; also the visual label set of the vocabulary.
    pub charset: Vec<char>,
    pub min_words_per_line: usize,
    pub max_words_per_line: usize,
    pub min_lines: usize,
    pub max_lines: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let lex = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let mut lexicons = BTreeMap::new();
        // Catalan-flavoured marriage-record vocabulary. Together the lists
        // cover the whole a-z charset several times over, so any reasonably
        // sized training split exercises every character class.
        lexicons.insert(
            Category::Name,
            lex(&[
                "joan", "maria", "josep", "anna", "pere", "quima", "xavier", "zenobia",
                "jacint", "eulalia", "francesc", "magdalena", "quirze", "ignasi", "beatriu",
                "teresa", "jaume", "caterina", "ramon", "margarida", "miquel", "elisabet",
                "bartomeu", "paula", "onofre", "agnes", "kilian", "yolanda", "wanda", "hug",
            ]),
        );
        lexicons.insert(
            Category::Surname,
            lex(&[
                "puig", "ferrer", "vila", "soler", "roca", "marti", "lopez", "vazquez",
                "serra", "font", "riba", "costa", "bosch", "prats", "rovira", "sala",
                "pujol", "camps", "quintana", "ximenez", "zaragoza", "duran", "huguet",
                "markez", "wilkens", "jordana", "yuste", "oliva",
            ]),
        );
        lexicons.insert(
            Category::Occupation,
            lex(&[
                "pages", "teixidor", "fuster", "sabater", "pescador", "moliner",
                "jornaler", "boter", "sastre", "barber", "mestre", "notari",
                "quincaller", "zelador", "jutge", "vaquer", "hostaler", "forner",
            ]),
        );
        lexicons.insert(
            Category::Location,
            lex(&[
                "barcelona", "girona", "vic", "reus", "olot", "manresa", "valls",
                "tarragona", "lleida", "figueres", "sitges", "ripoll", "berga",
                "tortosa", "banyoles", "queralt", "xerta", "xativa", "matadepera",
                "kentville", "weiler",
            ]),
        );
        lexicons.insert(
            Category::State,
            lex(&["solter", "soltera", "viudo", "viuda", "donzella", "fadri", "casat"]),
        );
        lexicons.insert(
            Category::Other,
            lex(&["difunt", "difunta", "habitant", "natural", "legitima", "legitim"]),
        );

        let templates: Vec<Template> = [
            // 23 words, 12 slots
            "en {name/husband} {surname/husband} {occupation/husband} de {location/husband} \
             fill de {name/husbands_father} i de {name/husbands_mother} ab {name/wife} \
             {surname/wife} {state/wife} filla de {name/wifes_father} {occupation/wifes_father} \
             i de {name/wifes_mother}",
            // 14 words, 6 slots
            "dit dia reberem de {name/husband} {surname/husband} {occupation/husband} ab \
             {name/wife} filla de {name/wifes_father} de {location/other_person}",
            // 21 words, 11 slots
            "en {name/husband} {surname/husband} {state/husband} de {location/husband} ab na \
             {name/wife} {surname/wife} donzella filla de {name/wifes_father} \
             {surname/wifes_father} {occupation/wifes_father} y de {name/wifes_mother} de \
             {location/none}",
            // 18 words, 10 slots
            "lo {occupation/husband} {name/husband} {surname/husband} {state/husband} habitant \
             de {location/husband} ab {name/wife} {surname/wife} filla de {name/wifes_father} i \
             {name/wifes_mother} de {location/wifes_father}",
        ]
        .iter()
        .map(|s| s.parse().expect("default templates parse"))
        .collect();

        GrammarConfig {
            categories: Category::ALL.to_vec(),
            persons: Person::ALL.to_vec(),
            lexicons,
            templates,
            charset: default_charset(),
            min_words_per_line: 3,
            max_words_per_line: 9,
            min_lines: 2,
            max_lines: 4,
        }
    }
}

fn default_charset() -> Vec<char> {
    let mut cs: Vec<char> = ('a'..='z').collect();
    cs.push(' ');
    cs
}

impl GrammarConfig {
    /// The (category, person) pairs realizable by the configured templates,
    /// in (category order, person order). This is the joint-tagging class set.
    pub fn observed_pairs(&self) -> Vec<(Category, Person)> {
        let mut pairs = Vec::new();
        for c in &self.categories {
            for p in &self.persons {
                if self
                    .templates
                    .iter()
                    .flat_map(|t| t.slots())
                    .any(|(tc, tp)| tc == *c && tp == *p)
                {
                    pairs.push((*c, *p));
                }
            }
        }
        pairs
    }

    /// Line counts L in `[min_lines, max_lines]` such that an even split of
    /// `n_words` respects the per-line word bounds.
    pub fn feasible_line_counts(&self, n_words: usize) -> Vec<usize> {
        (self.min_lines..=self.max_lines)
            .filter(|&l| {
                if l > n_words {
                    return false;
                }
                let hi = n_words.div_ceil(l);
                let lo = n_words / l;
                hi <= self.max_words_per_line && lo >= self.min_words_per_line
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.charset.is_empty() {
            return Err(Error::config("charset is empty"));
        }
        if self.templates.is_empty() {
            return Err(Error::config("no templates configured"));
        }
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return Err(Error::config("invalid line count range"));
        }
        if self.min_words_per_line == 0 || self.min_words_per_line > self.max_words_per_line {
            return Err(Error::config("invalid words-per-line range"));
        }
        for (cat, words) in &self.lexicons {
            for w in words {
                if w.is_empty() {
                    return Err(Error::config(format!("empty word in {} lexicon", cat.as_str())));
                }
                for ch in w.chars() {
                    if ch.is_whitespace() || ch == '[' || ch == ']' || !self.charset.contains(&ch) {
                        return Err(Error::config(format!(
                            "lexicon word {w:?} uses {ch:?} outside the charset"
                        )));
                    }
                }
            }
        }
        for t in &self.templates {
            if t.n_slots() < 2 {
                return Err(Error::config(format!(
                    "template {t} has fewer than 2 entity slots"
                )));
            }
            for tok in &t.tokens {
                match tok {
                    TemplateToken::Literal(w) => {
                        for ch in w.chars() {
                            if !self.charset.contains(&ch) {
                                return Err(Error::config(format!(
                                    "template literal {w:?} uses {ch:?} outside the charset"
                                )));
                            }
                        }
                    }
                    TemplateToken::Slot { category, person } => {
                        if !self.categories.contains(category) {
                            return Err(Error::config(format!(
                                "template references unlisted category {}",
                                category.as_str()
                            )));
                        }
                        if !self.persons.contains(person) {
                            return Err(Error::config(format!(
                                "template references unlisted person {}",
                                person.as_str()
                            )));
                        }
                        match self.lexicons.get(category) {
                            Some(words) if !words.is_empty() => {}
                            _ => {
                                return Err(Error::config(format!(
                                    "empty lexicon for referenced category {}",
                                    category.as_str()
                                )))
                            }
                        }
                    }
                }
            }
            if self.feasible_line_counts(t.n_words()).is_empty() {
                return Err(Error::config(format!(
                    "template with {} words cannot be wrapped into {}..={} lines of {}..={} words",
                    t.n_words(),
                    self.min_lines,
                    self.max_lines,
                    self.min_words_per_line,
                    self.max_words_per_line
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = GrammarConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.templates.len(), 4);
    }

    #[test]
    fn default_lexicons_cover_the_alphabet() {
        let cfg = GrammarConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for words in cfg.lexicons.values() {
            for w in words {
                seen.extend(w.chars());
            }
        }
        for ch in 'a'..='z' {
            assert!(seen.contains(&ch), "no lexicon word uses {ch:?}");
        }
    }

    #[test]
    fn template_parse_display_round_trip() {
        let src = "en {name/husband} de {location/none} fill";
        let t: Template = src.parse().unwrap();
        assert_eq!(t.n_words(), 5);
        assert_eq!(t.n_slots(), 2);
        assert_eq!(t.to_string(), src);
        let json = serde_json::to_string(&t).unwrap();
        let back: Template = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn template_rejects_malformed_slots() {
        assert!("{name}".parse::<Template>().is_err());
        assert!("{verb/husband}".parse::<Template>().is_err());
        assert!("{name/stranger}".parse::<Template>().is_err());
        assert!("".parse::<Template>().is_err());
    }

    #[test]
    fn observed_pairs_follow_category_then_person_order() {
        let cfg = GrammarConfig::default();
        let pairs = cfg.observed_pairs();
        assert!(!pairs.is_empty());
        // Every realizable pair appears exactly once, in lexicographic
        // (category index, person index) order.
        let index = |c: Category, p: Person| {
            let ci = cfg.categories.iter().position(|x| *x == c).unwrap();
            let pi = cfg.persons.iter().position(|x| *x == p).unwrap();
            (ci, pi)
        };
        let keys: Vec<_> = pairs.iter().map(|&(c, p)| index(c, p)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
        assert!(pairs.contains(&(Category::Name, Person::Husband)));
        assert!(pairs.contains(&(Category::Location, Person::NoPerson)));
    }

    #[test]
    fn feasible_line_counts_respect_bounds() {
        let cfg = GrammarConfig::default();
        for t in &cfg.templates {
            let counts = cfg.feasible_line_counts(t.n_words());
            assert!(!counts.is_empty());
            for l in counts {
                let hi = t.n_words().div_ceil(l);
                let lo = t.n_words() / l;
                assert!(hi <= cfg.max_words_per_line);
                assert!(lo >= cfg.min_words_per_line);
            }
        }
        // All line counts in 2..=4 are reachable through some template.
        let mut reachable = std::collections::BTreeSet::new();
        for t in &cfg.templates {
            reachable.extend(cfg.feasible_line_counts(t.n_words()));
        }
        assert_eq!(reachable.into_iter().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn validate_flags_charset_violations() {
        let mut cfg = GrammarConfig::default();
        cfg.lexicons
            .get_mut(&Category::Name)
            .unwrap()
            .push("andré".into());
        assert!(cfg.validate().is_err());
    }
}
