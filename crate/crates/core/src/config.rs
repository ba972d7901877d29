//! The experiment file: everything one training run needs, in one JSON
//! document. Every section has defaults, so `{}` is a valid (if slow)
//! experiment, and validation runs before any expensive work starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::training::{Level, Scenario, ScenarioConfig};
use crate::vocab::{Scheme, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub scheme: Scheme,
    pub training: ScenarioConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.training.validate()?;
        // Sections must also agree with each other.
        if matches!(
            self.training.scenario,
            Scenario::CurriculumSequential | Scenario::CurriculumDual
        ) {
            for level in &self.training.schedule {
                if let Level::Lines(k) = level {
                    if *k > self.dataset.grammar.max_lines {
                        return Err(Error::config(format!(
                            "schedule asks for {k}-line blocks but records have at most {} lines",
                            self.dataset.grammar.max_lines
                        )));
                    }
                }
            }
        }
        // The largest paragraph target must fit the decoder. Bound the
        // target length from grammar limits: every character plus a marker
        // per word (tag), per line (eol), and the two page markers.
        let longest_word = self
            .dataset
            .grammar
            .lexicons
            .values()
            .flatten()
            .map(|w| w.chars().count())
            .chain(self.dataset.grammar.templates.iter().flat_map(|t| {
                t.tokens.iter().filter_map(|tok| match tok {
                    crate::datasynth::TemplateToken::Literal(w) => Some(w.chars().count()),
                    crate::datasynth::TemplateToken::Slot { .. } => None,
                })
            }))
            .max()
            .unwrap_or(0);
        let max_words = self.dataset.grammar.max_lines * self.dataset.grammar.max_words_per_line;
        // Per word: text, a separating space, and at most 2 tag tokens.
        let bound = 2 + self.dataset.grammar.max_lines + max_words * (longest_word + 3);
        if bound > self.arch.model.max_target_len() {
            return Err(Error::config(format!(
                "worst-case target of {bound} tokens exceeds max_decode {}; \
                 raise max_decode or shrink the grammar",
                self.arch.model.max_decode
            )));
        }
        self.vocab()?;
        Ok(())
    }

    /// The class set this experiment trains and decodes with.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::for_grammar(self.scheme, &self.dataset.grammar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Level;

    #[test]
    fn empty_document_yields_a_valid_default_experiment() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.scheme, Scheme::Joint);
        assert_eq!(cfg.training.scenario, Scenario::OneStage);
        assert_eq!(cfg.arch.model.hidden, 256);
    }

    #[test]
    fn sections_override_independently() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{
                "scheme": "separate",
                "training": {"scenario": "two_stage_mixed", "steps_per_phase": 7},
                "arch": {"model": {"hidden": 32}}
            }"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.scheme, Scheme::Separate);
        assert_eq!(cfg.training.scenario, Scenario::TwoStageMixed);
        assert_eq!(cfg.training.steps_per_phase, 7);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.arch.model.hidden, 32);
        assert_eq!(cfg.arch.image_h, 256);
    }

    #[test]
    fn cross_section_conflicts_are_caught() {
        let mut cfg = RunConfig::default();
        cfg.training.scenario = Scenario::CurriculumDual;
        cfg.training.schedule = vec![Level::Lines(1), Level::Lines(9), Level::Paragraph];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.arch.model.max_decode = 40;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("max_decode"), "{err}");
    }

    #[test]
    fn load_reports_file_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunConfig::load(&dir.path().join("missing.json")).is_err());
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        assert!(RunConfig::load(&bad).is_err());
        let good = dir.path().join("good.json");
        fs::write(&good, r#"{"training": {"seed": 3}}"#).unwrap();
        let cfg = RunConfig::load(&good).unwrap();
        assert_eq!(cfg.training.seed, 3);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }
}
