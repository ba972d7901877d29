//! Training scenarios: phase schedules, corpus assembly, and the step loop.
//!
//! A scenario is a fixed sequence of phases. Each phase trains on one corpus
//! level (k-line blocks, whole paragraphs, or the mixed union of all block
//! sizes) with or without entity tags in the targets. The optimizer is reset
//! at every phase boundary; model weights carry over. Batch sampling and
//! dropout draw from streams derived from `(seed, phase, step)`, so a run is
//! reproducible from its config and training is insensitive to wall-clock
//! interruptions: halting and resuming from a checkpoint continues the exact
//! same trajectory.

pub mod checkpoint;
pub mod loss;
pub mod optim;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, Cursor,
    LoadedCheckpoint,
};
pub use loss::cross_entropy;
pub use optim::{Adam, OptimConfig};

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::preprocess;
use crate::datasynth::{extract_block, GrayImage, Record};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::zero_grads;
use crate::rng::{label, stream};
use crate::scalar::Scalar;
use crate::vocab::{encode_target, TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Tagged paragraphs from the start.
    OneStage,
    /// Plain-text paragraphs, then tagged paragraphs.
    TwoStage,
    /// Tagged mixed-size blocks from the start.
    MixedLevel,
    /// Plain-text mixed blocks, then tagged mixed blocks.
    TwoStageMixed,
    /// Plain text at each schedule level in turn, then tagged paragraphs.
    CurriculumSequential,
    /// Plain text then tagged at each schedule level in turn.
    CurriculumDual,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::OneStage,
        Scenario::TwoStage,
        Scenario::MixedLevel,
        Scenario::TwoStageMixed,
        Scenario::CurriculumSequential,
        Scenario::CurriculumDual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::OneStage => "one_stage",
            Scenario::TwoStage => "two_stage",
            Scenario::MixedLevel => "mixed_level",
            Scenario::TwoStageMixed => "two_stage_mixed",
            Scenario::CurriculumSequential => "curriculum_sequential",
            Scenario::CurriculumDual => "curriculum_dual",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}")))
    }
}

/// A curriculum rung: fixed-size line blocks or whole paragraphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Lines(usize),
    Paragraph,
}

/// JSON form: a bare line count or the string `"paragraph"`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LevelRepr {
    Count(usize),
    Name(String),
}

impl Serialize for Level {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Level::Lines(k) => LevelRepr::Count(*k).serialize(ser),
            Level::Paragraph => LevelRepr::Name("paragraph".into()).serialize(ser),
        }
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Level, D::Error> {
        match LevelRepr::deserialize(de)? {
            LevelRepr::Count(k) => Ok(Level::Lines(k)),
            LevelRepr::Name(s) if s == "paragraph" => Ok(Level::Paragraph),
            LevelRepr::Name(s) => Err(serde::de::Error::custom(format!(
                "level must be a line count or \"paragraph\", got {s:?}"
            ))),
        }
    }
}

/// The corpus a single phase trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusLevel {
    /// Every contiguous k-line block of every paragraph.
    K(usize),
    /// Paragraphs as-is.
    Paragraph,
    /// Union of K(k) for every k up to each paragraph's line count.
    Mixed,
}

impl CorpusLevel {
    fn describe(self) -> String {
        match self {
            CorpusLevel::K(k) => format!("lines{k}"),
            CorpusLevel::Paragraph => "paragraph".into(),
            CorpusLevel::Mixed => "mixed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSpec {
    pub level: CorpusLevel,
    pub include_tags: bool,
}

impl PhaseSpec {
    pub fn name(&self) -> String {
        let suffix = if self.include_tags { "tagged" } else { "text" };
        format!("{}_{}", self.level.describe(), suffix)
    }
}

/// The phase sequence a scenario expands to. `schedule` is consulted only
/// by the two curriculum scenarios.
pub fn phases_for(scenario: Scenario, schedule: &[Level]) -> Vec<PhaseSpec> {
    let corpus = |l: Level| match l {
        Level::Lines(k) => CorpusLevel::K(k),
        Level::Paragraph => CorpusLevel::Paragraph,
    };
    match scenario {
        Scenario::OneStage => vec![PhaseSpec { level: CorpusLevel::Paragraph, include_tags: true }],
        Scenario::TwoStage => vec![
            PhaseSpec { level: CorpusLevel::Paragraph, include_tags: false },
            PhaseSpec { level: CorpusLevel::Paragraph, include_tags: true },
        ],
        Scenario::MixedLevel => vec![PhaseSpec { level: CorpusLevel::Mixed, include_tags: true }],
        Scenario::TwoStageMixed => vec![
            PhaseSpec { level: CorpusLevel::Mixed, include_tags: false },
            PhaseSpec { level: CorpusLevel::Mixed, include_tags: true },
        ],
        Scenario::CurriculumSequential => {
            let mut phases: Vec<PhaseSpec> = schedule
                .iter()
                .map(|&l| PhaseSpec { level: corpus(l), include_tags: false })
                .collect();
            phases.push(PhaseSpec { level: CorpusLevel::Paragraph, include_tags: true });
            phases
        }
        Scenario::CurriculumDual => schedule
            .iter()
            .flat_map(|&l| {
                [
                    PhaseSpec { level: corpus(l), include_tags: false },
                    PhaseSpec { level: corpus(l), include_tags: true },
                ]
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub steps_per_phase: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Curriculum rungs, easiest first. Ignored by non-curriculum scenarios.
    pub schedule: Vec<Level>,
    /// End a phase early once the 20-step moving average drops below this.
    pub stop_below_loss: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::OneStage,
            steps_per_phase: 500,
            batch_size: 4,
            optim: OptimConfig::default(),
            seed: 0,
            schedule: vec![Level::Lines(1), Level::Paragraph],
            stop_below_loss: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_phase == 0 {
            return Err(Error::config("steps_per_phase must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.optim.validate()?;
        if self.schedule.is_empty() {
            return Err(Error::config("schedule is empty"));
        }
        // Rungs must get strictly harder, with paragraphs hardest.
        let rank = |l: &Level| match l {
            Level::Lines(k) => *k,
            Level::Paragraph => usize::MAX,
        };
        for l in &self.schedule {
            if *l == Level::Lines(0) {
                return Err(Error::config("schedule level 0 is meaningless"));
            }
        }
        for pair in self.schedule.windows(2) {
            if rank(&pair[0]) >= rank(&pair[1]) {
                return Err(Error::config(
                    "schedule levels must be strictly increasing",
                ));
            }
        }
        if let Some(t) = self.stop_below_loss {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::config("stop_below_loss must be finite and positive"));
            }
        }
        Ok(())
    }
}

/// Materialize the corpus for one phase from whole annotated paragraphs.
/// Block records keep only the lines they cover; their images are cropped to
/// the matching line boxes.
pub fn build_corpus(
    paragraphs: &[(Record, GrayImage)],
    level: CorpusLevel,
) -> Result<Vec<(Record, GrayImage)>> {
    if paragraphs.is_empty() {
        return Err(Error::data("no paragraphs to build a corpus from"));
    }
    let blocks_of = |k: usize| -> Result<Vec<(Record, GrayImage)>> {
        let mut out = Vec::new();
        for (rec, img) in paragraphs {
            let n = rec.n_lines();
            for start in 1..=n.saturating_sub(k - 1) {
                out.push(extract_block(rec, img, start, k)?);
            }
        }
        if out.is_empty() {
            return Err(Error::data(format!("no paragraph has {k} or more lines")));
        }
        Ok(out)
    };
    match level {
        CorpusLevel::Paragraph => Ok(paragraphs.to_vec()),
        CorpusLevel::K(k) => {
            if k == 0 {
                return Err(Error::config("block size 0 is meaningless"));
            }
            blocks_of(k)
        }
        CorpusLevel::Mixed => {
            let max_lines = paragraphs.iter().map(|(r, _)| r.n_lines()).max().unwrap_or(0);
            let mut out = Vec::new();
            for k in 1..=max_lines {
                // Paragraphs shorter than k simply contribute nothing.
                for (rec, img) in paragraphs {
                    let n = rec.n_lines();
                    for start in 1..=n.saturating_sub(k - 1) {
                        out.push(extract_block(rec, img, start, k)?);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Corpus indices for one optimizer step, drawn with replacement from a
/// stream keyed by `(seed, phase, step)`. Independent of corpus contents,
/// so the same config always visits the same index sequence.
pub fn sample_batch(seed: u64, phase: usize, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[label("batch"), phase as u64, step as u64]);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Step within its phase, 0-based.
    pub step: usize,
    pub phase: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseLogEntry {
    pub phase: usize,
    pub name: String,
    pub corpus_size: usize,
    /// Steps executed in this process (a resumed run reports only its own).
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub phases: Vec<PhaseLogEntry>,
    pub final_loss: f64,
    /// True when the run stopped at `halt_after` rather than completing.
    pub halted: bool,
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Where to write checkpoints, the loss trace, and the phase log.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint cursor. Mid-phase resumption needs the
    /// optimizer state saved alongside it.
    pub resume: Option<(Cursor, Option<Adam>)>,
    /// Stop after completing this (phase, step), writing `halt.ckpt`.
    pub halt_after: Option<(usize, usize)>,
    /// Report progress on stderr every this many steps.
    pub log_every: Option<usize>,
}

struct Artifacts {
    dir: Option<PathBuf>,
}

impl Artifacts {
    fn new(dir: Option<PathBuf>) -> Result<Artifacts> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(Artifacts { dir })
    }

    fn save<S: Scalar>(
        &self,
        file: &str,
        model: &mut Model<S>,
        vocab: &Vocab,
        cursor: &Cursor,
        optim: Option<&Adam>,
    ) -> Result<()> {
        if let Some(d) = &self.dir {
            save_checkpoint(&d.join(file), model, vocab, cursor, optim)?;
        }
        Ok(())
    }

    fn flush(&self, trace: &[TraceRow], phases: &[PhaseLogEntry]) -> Result<()> {
        let Some(d) = &self.dir else { return Ok(()) };
        let mut csv = String::from("step,phase,loss\n");
        for row in trace {
            csv.push_str(&format!("{},{},{}\n", row.step, row.phase, row.loss));
        }
        fs::write(d.join("loss_trace.csv"), csv)?;
        fs::write(d.join("phase_log.json"), serde_json::to_vec_pretty(phases)?)?;
        Ok(())
    }
}

/// Run (or continue) a training scenario over pre-rendered paragraphs.
pub fn run_scenario<S: Scalar>(
    model: &mut Model<S>,
    vocab: &Vocab,
    paragraphs: &[(Record, GrayImage)],
    cfg: &ScenarioConfig,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let phases = phases_for(cfg.scenario, &cfg.schedule);
    let artifacts = Artifacts::new(opts.out_dir)?;

    let (start_phase, start_step, mut resumed_adam) = match opts.resume {
        Some((cursor, adam)) => {
            if cursor.scenario != cfg.scenario.as_str() {
                return Err(Error::config(format!(
                    "checkpoint is from scenario {:?}, config says {:?}",
                    cursor.scenario,
                    cfg.scenario.as_str()
                )));
            }
            if cursor.phase > phases.len() || cursor.step > cfg.steps_per_phase {
                return Err(Error::config("checkpoint cursor is outside this run"));
            }
            if cursor.step > 0 && adam.is_none() {
                return Err(Error::config(
                    "mid-phase resumption requires saved optimizer state",
                ));
            }
            (cursor.phase, cursor.step, adam)
        }
        None => (0, 0, None),
    };

    let (img_h, img_w) = (model.arch.image_h, model.arch.image_w);
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut phase_log: Vec<PhaseLogEntry> = Vec::new();

    for (phase, spec) in phases.iter().enumerate().skip(start_phase) {
        let corpus = build_corpus(paragraphs, spec.level)?;
        let targets: Vec<TokenSequence> = corpus
            .iter()
            .map(|(rec, _)| encode_target(rec, vocab, spec.include_tags))
            .collect::<Result<_>>()?;
        for t in &targets {
            if t.len() > model.arch.model.max_target_len() {
                return Err(Error::data(format!(
                    "a {} target has {} tokens, over the decoder limit {}",
                    spec.name(),
                    t.len(),
                    model.arch.model.max_target_len()
                )));
            }
        }

        let first_step = if phase == start_phase { start_step } else { 0 };
        let mut adam = match resumed_adam.take() {
            Some(a) if first_step > 0 => a,
            _ => Adam::new(cfg.optim.clone()),
        };
        let mut window: VecDeque<f64> = VecDeque::with_capacity(20);
        let mut seen = 0usize;
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;

        for step in first_step..cfg.steps_per_phase {
            let indices = sample_batch(cfg.seed, phase, step, corpus.len(), cfg.batch_size);
            zero_grads(model);
            let mut batch_loss = 0.0;
            let inv_b = S::of_f64(1.0 / cfg.batch_size as f64);
            for (slot, &idx) in indices.iter().enumerate() {
                let (_, img) = &corpus[idx];
                let x = preprocess::<S>(img, img_h, img_w)?;
                let mut drop_rng = stream(
                    cfg.seed,
                    &[label("dropout"), phase as u64, step as u64, slot as u64],
                );
                let (logits, cache) = model.forward_train(&x, &targets[idx].tokens, &mut drop_rng)?;
                let (sample_loss, mut dlogits) = cross_entropy(&logits, &targets[idx].tokens)?;
                if !sample_loss.is_finite() {
                    return Err(Error::Diverged { phase, step });
                }
                dlogits.mapv_inplace(|g| g * inv_b);
                model.backward(&cache, &dlogits)?;
                batch_loss += sample_loss;
            }
            batch_loss /= cfg.batch_size as f64;
            let (grad_norm, _) = adam.apply(model);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged { phase, step });
            }

            if seen == 0 {
                first_loss = batch_loss;
            }
            last_loss = batch_loss;
            seen += 1;
            trace.push(TraceRow { step, phase, loss: batch_loss });
            if let Some(every) = opts.log_every {
                if (step + 1) % every == 0 || step + 1 == cfg.steps_per_phase {
                    eprintln!(
                        "phase {phase} ({}) step {}/{}: loss {batch_loss:.4}",
                        spec.name(),
                        step + 1,
                        cfg.steps_per_phase
                    );
                }
            }

            if opts.halt_after == Some((phase, step)) {
                let cursor = Cursor {
                    scenario: cfg.scenario.as_str().into(),
                    phase,
                    step: step + 1,
                };
                artifacts.save("halt.ckpt", model, vocab, &cursor, Some(&adam))?;
                phase_log.push(PhaseLogEntry {
                    phase,
                    name: spec.name(),
                    corpus_size: corpus.len(),
                    steps: seen,
                    first_loss,
                    last_loss,
                });
                artifacts.flush(&trace, &phase_log)?;
                return Ok(TrainOutcome {
                    final_loss: last_loss,
                    trace,
                    phases: phase_log,
                    halted: true,
                });
            }

            if window.len() == 20 {
                window.pop_front();
            }
            window.push_back(batch_loss);
            if let Some(threshold) = cfg.stop_below_loss {
                if window.len() == 20 {
                    let mean = window.iter().sum::<f64>() / window.len() as f64;
                    if mean < threshold {
                        if let Some(every) = opts.log_every {
                            let _ = every;
                            eprintln!(
                                "phase {phase} ({}) stopped early at step {}: mean loss {mean:.4}",
                                spec.name(),
                                step + 1
                            );
                        }
                        break;
                    }
                }
            }
        }

        if seen > 0 {
            phase_log.push(PhaseLogEntry {
                phase,
                name: spec.name(),
                corpus_size: corpus.len(),
                steps: seen,
                first_loss,
                last_loss,
            });
        }
        let cursor = Cursor {
            scenario: cfg.scenario.as_str().into(),
            phase: phase + 1,
            step: 0,
        };
        artifacts.save(&format!("phase{phase}.ckpt"), model, vocab, &cursor, None)?;
    }

    let final_cursor = Cursor::finished(cfg.scenario.as_str(), phases.len());
    artifacts.save("final.ckpt", model, vocab, &final_cursor, None)?;
    artifacts.flush(&trace, &phase_log)?;
    let final_loss = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome { trace, phases: phase_log, final_loss, halted: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::datasynth::{generate_record, render_record, GrammarConfig, RenderConfig};
    use crate::model::ArchConfig;
    use crate::posenc::PosEnc;
    use crate::transformer::ModelConfig;
    use crate::vocab::{Scheme, Vocab};
    use std::collections::BTreeSet;
    use tempfile::tempdir;

    fn grammar() -> GrammarConfig {
        GrammarConfig::default()
    }

    fn paragraphs(n: usize, want_lines: Option<usize>) -> Vec<(Record, GrayImage)> {
        let g = grammar();
        let render = RenderConfig::default();
        let mut out = Vec::new();
        let mut seed = 0u64;
        while out.len() < n {
            let rec = generate_record(seed, &g).unwrap();
            if want_lines.is_none_or(|l| rec.n_lines() == l) {
                let img = render_record(&rec, seed, &render).unwrap();
                out.push((rec, img));
            }
            seed += 1;
        }
        out
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            image_h: 32,
            image_w: 64,
            backbone: BackboneConfig {
                stem: 2,
                stages: vec![2, 2, 3, 3],
                blocks: vec![1, 1, 1, 1],
                bottleneck: false,
                stem_pool: false,
            },
            positional_encoding: PosEnc::A2dpe,
            model: ModelConfig {
                hidden: 8,
                heads: 1,
                layers: 1,
                feedforward: Some(16),
                dropout: 0.1,
                max_decode: 400,
                scale: crate::nn::AttnScale::Standard,
            },
        }
    }

    fn tiny_cfg(scenario: Scenario, steps: usize) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            steps_per_phase: steps,
            batch_size: 2,
            seed: 11,
            ..ScenarioConfig::default()
        }
    }

    fn vocab() -> Vocab {
        Vocab::for_grammar(Scheme::Joint, &grammar()).unwrap()
    }

    #[test]
    fn scenario_names_round_trip() {
        for sc in Scenario::ALL {
            assert_eq!(sc.as_str().parse::<Scenario>().unwrap(), sc);
            let json = serde_json::to_string(&sc).unwrap();
            assert_eq!(json, format!("\"{}\"", sc.as_str()));
            let back: Scenario = serde_json::from_str(&json).unwrap();
            assert_eq!(back, sc);
        }
        assert!("three_stage".parse::<Scenario>().is_err());
    }

    #[test]
    fn levels_serialize_as_counts_or_paragraph() {
        let sched = vec![Level::Lines(1), Level::Lines(3), Level::Paragraph];
        let json = serde_json::to_string(&sched).unwrap();
        assert_eq!(json, r#"[1,3,"paragraph"]"#);
        let back: Vec<Level> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sched);
        assert!(serde_json::from_str::<Level>(r#""sentence""#).is_err());
    }

    #[test]
    fn phase_expansion_per_scenario() {
        let sched = vec![Level::Lines(1), Level::Paragraph];
        let p = |level, include_tags| PhaseSpec { level, include_tags };
        assert_eq!(
            phases_for(Scenario::OneStage, &sched),
            vec![p(CorpusLevel::Paragraph, true)]
        );
        assert_eq!(
            phases_for(Scenario::TwoStage, &sched),
            vec![p(CorpusLevel::Paragraph, false), p(CorpusLevel::Paragraph, true)]
        );
        assert_eq!(
            phases_for(Scenario::MixedLevel, &sched),
            vec![p(CorpusLevel::Mixed, true)]
        );
        assert_eq!(
            phases_for(Scenario::TwoStageMixed, &sched),
            vec![p(CorpusLevel::Mixed, false), p(CorpusLevel::Mixed, true)]
        );
        assert_eq!(
            phases_for(Scenario::CurriculumSequential, &sched),
            vec![
                p(CorpusLevel::K(1), false),
                p(CorpusLevel::Paragraph, false),
                p(CorpusLevel::Paragraph, true),
            ]
        );
        let dual = phases_for(
            Scenario::CurriculumDual,
            &[Level::Lines(1), Level::Lines(2), Level::Paragraph],
        );
        assert_eq!(
            dual,
            vec![
                p(CorpusLevel::K(1), false),
                p(CorpusLevel::K(1), true),
                p(CorpusLevel::K(2), false),
                p(CorpusLevel::K(2), true),
                p(CorpusLevel::Paragraph, false),
                p(CorpusLevel::Paragraph, true),
            ]
        );
        assert_eq!(dual[0].name(), "lines1_text");
        assert_eq!(dual[5].name(), "paragraph_tagged");
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let mut cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        cfg.schedule = vec![];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![Level::Lines(2), Level::Lines(2)];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![Level::Paragraph, Level::Lines(1)];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![Level::Lines(0), Level::Paragraph];
        assert!(cfg.validate().is_err());
        cfg.schedule = vec![Level::Lines(1), Level::Lines(4), Level::Paragraph];
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn block_corpora_enumerate_every_window() {
        let paras = paragraphs(1, Some(4));
        let (rec, _) = &paras[0];
        assert_eq!(rec.n_lines(), 4);

        let k2 = build_corpus(&paras, CorpusLevel::K(2)).unwrap();
        assert_eq!(k2.len(), 3);
        for (i, (block, img)) in k2.iter().enumerate() {
            assert_eq!(block.n_lines(), 2);
            assert_eq!(block.lines[0], rec.lines[i]);
            assert_eq!(block.lines[1], rec.lines[i + 1]);
            img.validate().unwrap();
        }

        // 4 + 3 + 2 + 1 windows.
        let mixed = build_corpus(&paras, CorpusLevel::Mixed).unwrap();
        assert_eq!(mixed.len(), 10);

        let paras_only = build_corpus(&paras, CorpusLevel::Paragraph).unwrap();
        assert_eq!(paras_only.len(), 1);
        assert_eq!(paras_only[0].0, *rec);

        assert!(build_corpus(&paras, CorpusLevel::K(5)).is_err());
        assert!(build_corpus(&[], CorpusLevel::Paragraph).is_err());
    }

    #[test]
    fn batch_sampling_is_keyed_by_phase_and_step() {
        let a = sample_batch(7, 0, 3, 100, 8);
        assert_eq!(a, sample_batch(7, 0, 3, 100, 8));
        assert_ne!(a, sample_batch(7, 0, 4, 100, 8));
        assert_ne!(a, sample_batch(7, 1, 3, 100, 8));
        assert_ne!(a, sample_batch(8, 0, 3, 100, 8));
        assert!(a.iter().all(|&i| i < 100));
    }

    #[test]
    fn mixed_batches_span_block_sizes() {
        let paras = paragraphs(1, Some(4));
        let corpus = build_corpus(&paras, CorpusLevel::Mixed).unwrap();
        let mut diverse = 0;
        for step in 0..100 {
            let sizes: BTreeSet<usize> = sample_batch(3, 0, step, corpus.len(), 4)
                .into_iter()
                .map(|i| corpus[i].0.n_lines())
                .collect();
            if sizes.len() >= 2 {
                diverse += 1;
            }
        }
        // With sizes distributed 4:3:2:1 over ten blocks, a single-size
        // batch of four has probability about 0.035.
        assert!(diverse >= 80, "only {diverse}/100 batches mixed block sizes");
    }

    #[test]
    fn identical_configs_produce_identical_traces() {
        let paras = paragraphs(2, None);
        let v = vocab();
        let cfg = tiny_cfg(Scenario::OneStage, 3);
        let mut m1: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 5).unwrap();
        let out1 = run_scenario(&mut m1, &v, &paras, &cfg, RunOptions::default()).unwrap();
        let mut m2: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 5).unwrap();
        let out2 = run_scenario(&mut m2, &v, &paras, &cfg, RunOptions::default()).unwrap();
        assert_eq!(out1.trace, out2.trace);
        assert!(out1.trace.iter().all(|r| r.loss.is_finite()));
        let c = Cursor::finished("one_stage", 1);
        let b1 = checkpoint_bytes(&mut m1, &v, &c, None).unwrap();
        let b2 = checkpoint_bytes(&mut m2, &v, &c, None).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn non_finite_parameters_surface_as_divergence() {
        let paras = paragraphs(1, None);
        let v = vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 5).unwrap();
        use crate::nn::Params;
        model.visit("", &mut |p| {
            if p.name == "compress/conv/w" {
                p.value[0] = f32::NAN;
            }
        });
        let cfg = tiny_cfg(Scenario::OneStage, 5);
        let err = run_scenario(&mut model, &v, &paras, &cfg, RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { phase: 0, step: 0 }), "{err}");
    }

    #[test]
    fn loss_falls_when_overfitting_one_record() {
        let paras = paragraphs(1, Some(2));
        let v = vocab();
        let mut arch = tiny_arch();
        arch.model.dropout = 0.0;
        let mut model: Model<f32> = Model::new(arch, v.nb_class(), 5).unwrap();
        let mut cfg = tiny_cfg(Scenario::OneStage, 200);
        cfg.batch_size = 1;
        cfg.optim.lr = 1e-2;
        cfg.optim.warmup = 20;
        let out = run_scenario(&mut model, &v, &paras, &cfg, RunOptions::default()).unwrap();
        let head: f64 = out.trace[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 =
            out.trace[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(
            tail < 0.5 * head,
            "loss did not fall: first 10 avg {head:.4}, last 10 avg {tail:.4}"
        );
        assert_eq!(out.final_loss, out.trace.last().unwrap().loss);
    }

    #[test]
    fn early_stop_trips_once_the_window_fills() {
        let paras = paragraphs(1, None);
        let v = vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 5).unwrap();
        let mut cfg = tiny_cfg(Scenario::OneStage, 30);
        cfg.batch_size = 1;
        cfg.stop_below_loss = Some(1e9);
        let out = run_scenario(&mut model, &v, &paras, &cfg, RunOptions::default()).unwrap();
        assert_eq!(out.trace.len(), 20);
        assert_eq!(out.phases[0].steps, 20);
    }

    #[test]
    fn halting_and_resuming_matches_an_uninterrupted_run() {
        let paras = paragraphs(2, None);
        let v = vocab();
        let cfg = tiny_cfg(Scenario::TwoStage, 3);
        let dir = tempdir().unwrap();

        let straight_dir = dir.path().join("straight");
        let mut straight: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 9).unwrap();
        let full = run_scenario(
            &mut straight,
            &v,
            &paras,
            &cfg,
            RunOptions { out_dir: Some(straight_dir.clone()), ..RunOptions::default() },
        )
        .unwrap();
        assert!(!full.halted);
        assert_eq!(full.trace.len(), 6);
        assert_eq!(full.phases.len(), 2);
        assert_eq!(full.phases[0].name, "paragraph_text");
        assert_eq!(full.phases[1].name, "paragraph_tagged");

        let halted_dir = dir.path().join("halted");
        let mut interrupted: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 9).unwrap();
        let first_leg = run_scenario(
            &mut interrupted,
            &v,
            &paras,
            &cfg,
            RunOptions {
                out_dir: Some(halted_dir.clone()),
                halt_after: Some((0, 1)),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert!(first_leg.halted);
        assert_eq!(first_leg.trace.len(), 2);

        let loaded: LoadedCheckpoint<f32> =
            load_checkpoint(&halted_dir.join("halt.ckpt")).unwrap();
        assert_eq!(loaded.cursor, Cursor { scenario: "two_stage".into(), phase: 0, step: 2 });
        let mut resumed_model = loaded.model;
        let second_leg = run_scenario(
            &mut resumed_model,
            &v,
            &paras,
            &cfg,
            RunOptions {
                out_dir: Some(halted_dir.clone()),
                resume: Some((loaded.cursor, loaded.optim)),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(second_leg.trace.len(), 4);
        assert_eq!(
            [&first_leg.trace[..], &second_leg.trace[..]].concat(),
            full.trace
        );

        // Same weights, vocab, and cursor: the final checkpoints match byte
        // for byte.
        let a = fs::read(straight_dir.join("final.ckpt")).unwrap();
        let b = fs::read(halted_dir.join("final.ckpt")).unwrap();
        assert_eq!(a, b);

        let csv = fs::read_to_string(straight_dir.join("loss_trace.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("step,phase,loss\n"));
        let log: Vec<serde_json::Value> =
            serde_json::from_slice(&fs::read(straight_dir.join("phase_log.json")).unwrap())
                .unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn resume_validation_catches_mismatches() {
        let paras = paragraphs(1, None);
        let v = vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 9).unwrap();
        let cfg = tiny_cfg(Scenario::OneStage, 2);
        let wrong_scenario = Cursor { scenario: "two_stage".into(), phase: 0, step: 0 };
        assert!(run_scenario(
            &mut model,
            &v,
            &paras,
            &cfg,
            RunOptions { resume: Some((wrong_scenario, None)), ..RunOptions::default() },
        )
        .is_err());
        let mid_phase_without_optim = Cursor { scenario: "one_stage".into(), phase: 0, step: 1 };
        assert!(run_scenario(
            &mut model,
            &v,
            &paras,
            &cfg,
            RunOptions { resume: Some((mid_phase_without_optim, None)), ..RunOptions::default() },
        )
        .is_err());
    }
}
