//! Command line front end: dataset synthesis, scenario training, checkpoint
//! evaluation, raw prediction, offline scoring, and built-in diagnostics.
//!
//! Exit codes: 0 on success, 1 for configuration or usage problems, 2 for
//! runtime failures (I/O, corrupt files, diverged training, failed checks).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use scrivener_core::config::RunConfig;
use scrivener_core::datasynth::{
    build_dataset, generate_record, load_image, read_manifest, render_record, GrayImage,
    ManifestRow, Record, Split,
};
use scrivener_core::error::{Error, Result};
use scrivener_core::metrics::{evaluate_model, transcribe_records, ScoreReport};
use scrivener_core::model::Model;
use scrivener_core::selftest::run_selftests;
use scrivener_core::training::{load_checkpoint, run_scenario, RunOptions, Scenario};

#[derive(Parser)]
#[command(
    name = "scrivener",
    version,
    about = "Handwritten-record transcription and tagging, end to end"
)]
struct Cli {
    /// Override the seeds in the config file (dataset and training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for eval and predict.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: PNG pages plus manifest.jsonl.
    Synth {
        /// Experiment file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured record count.
        #[arg(long)]
        records: Option<usize>,
    },
    /// Train a model under one of the six scenarios.
    ///
    /// The training corpus is regenerated in memory from the config, so it
    /// always matches what `synth` writes for the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints, the loss trace, and the phase log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured scenario.
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Override the configured steps per phase.
        #[arg(long)]
        steps: Option<usize>,
        /// Progress report interval, in steps.
        #[arg(long, default_value_t = 25)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the full per-record report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transcribe one manifest split and write predictions as JSONL.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against reference annotations.
    Score {
        /// Predictions in manifest JSONL shape, joined to references by id.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Restrict references to one split.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in diagnostics.
    Selftest,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Config(_) => 1,
            _ => 2,
        });
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s)
        .ok_or_else(|| Error::config(format!("unknown split {s:?}; use train, valid, or test")))
}

fn split_items(manifest_path: &Path, split: Split) -> Result<Vec<(ManifestRow, GrayImage)>> {
    let manifest = read_manifest(manifest_path)?;
    let mut items = Vec::new();
    for row in manifest.rows_for(split) {
        let img = load_image(&manifest.image_path(row))?;
        items.push((row.clone(), img));
    }
    if items.is_empty() {
        return Err(Error::config(format!(
            "{} has no records in the {} split",
            manifest_path.display(),
            split.as_str()
        )));
    }
    Ok(items)
}

fn write_or_print_report(report: &ScoreReport, out: &Option<PathBuf>) -> Result<()> {
    let truncated = report.records.iter().filter(|r| r.truncated).count();
    println!(
        "basic {:.2}  complete {:.2}  cer {:.4}  ({} scored, {} without entities, {} truncated)",
        report.mean_basic, report.mean_complete, report.corpus_cer, report.n_scored,
        report.n_skipped, truncated
    );
    if !report.diagnostic_counts.is_empty() {
        let kinds: Vec<String> = report
            .diagnostic_counts
            .iter()
            .map(|(k, n)| format!("{k} x{n}"))
            .collect();
        println!("structural diagnostics: {}", kinds.join(", "));
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_vec_pretty(report)?)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, records } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = records {
                cfg.dataset.n_records = n;
            }
            if let Some(s) = cli.seed {
                cfg.dataset.base_seed = s;
            }
            cfg.validate()?;
            let manifest = build_dataset(&cfg.dataset, &out)?;
            let counts: Vec<String> = Split::ALL
                .iter()
                .map(|&s| format!("{} {}", manifest.rows_for(s).count(), s.as_str()))
                .collect();
            println!(
                "wrote {} records ({}) under {}",
                manifest.rows.len(),
                counts.join(", "),
                out.display()
            );
            Ok(())
        }

        Command::Train { config, out, resume, scenario, steps, log_every } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = cli.seed {
                cfg.training.seed = s;
            }
            if let Some(sc) = scenario {
                cfg.training.scenario = sc;
            }
            if let Some(n) = steps {
                cfg.training.steps_per_phase = n;
            }
            cfg.validate()?;
            let vocab = cfg.vocab()?;

            let n_train = cfg.dataset.split_counts()[0];
            if n_train == 0 {
                return Err(Error::config("the train split is empty"));
            }
            eprintln!("rendering {n_train} training paragraphs");
            let mut paragraphs = Vec::with_capacity(n_train);
            for i in 0..n_train {
                let seed = cfg.dataset.base_seed + i as u64;
                let rec = generate_record(seed, &cfg.dataset.grammar)?;
                let img = render_record(&rec, seed, &cfg.dataset.render)?;
                paragraphs.push((rec, img));
            }

            let (mut model, resume_state) = match resume {
                Some(path) => {
                    let loaded = load_checkpoint::<f32>(&path)?;
                    if loaded.vocab.fingerprint() != vocab.fingerprint() {
                        return Err(Error::config(
                            "checkpoint was trained with a different vocabulary",
                        ));
                    }
                    let ckpt_arch = serde_json::to_string(&loaded.model.arch)?;
                    let cfg_arch = serde_json::to_string(&cfg.arch)?;
                    if ckpt_arch != cfg_arch {
                        return Err(Error::config(
                            "checkpoint architecture differs from the config",
                        ));
                    }
                    eprintln!(
                        "resuming {} at phase {}, step {}",
                        loaded.cursor.scenario, loaded.cursor.phase, loaded.cursor.step
                    );
                    (loaded.model, Some((loaded.cursor, loaded.optim)))
                }
                None => (
                    Model::<f32>::new(cfg.arch.clone(), vocab.nb_class(), cfg.training.seed)?,
                    None,
                ),
            };

            let outcome = run_scenario(
                &mut model,
                &vocab,
                &paragraphs,
                &cfg.training,
                RunOptions {
                    out_dir: Some(out.clone()),
                    resume: resume_state,
                    halt_after: None,
                    log_every: Some(log_every.max(1)),
                },
            )?;
            for p in &outcome.phases {
                println!(
                    "phase {} ({}): {} steps over {} samples, loss {:.4} -> {:.4}",
                    p.phase, p.name, p.steps, p.corpus_size, p.first_loss, p.last_loss
                );
            }
            println!(
                "final loss {:.4}; checkpoints in {}",
                outcome.final_loss,
                out.display()
            );
            Ok(())
        }

        Command::Eval { ckpt, manifest, split, out } => {
            let split = parse_split(&split)?;
            let loaded = load_checkpoint::<f32>(&ckpt)?;
            let items = split_items(&manifest, split)?;
            let pairs: Vec<(GrayImage, Record)> = items
                .into_iter()
                .map(|(row, img)| (img, row.to_record()))
                .collect();
            let report = evaluate_model(&loaded.model, &loaded.vocab, &pairs, cli.threads)?;
            write_or_print_report(&report, &out)
        }

        Command::Predict { ckpt, manifest, split, out } => {
            let split = parse_split(&split)?;
            let loaded = load_checkpoint::<f32>(&ckpt)?;
            let items = split_items(&manifest, split)?;
            let images: Vec<GrayImage> = items.iter().map(|(_, img)| img.clone()).collect();
            let decoded = transcribe_records(&loaded.model, &loaded.vocab, &images, cli.threads)?;
            let mut jsonl = Vec::new();
            let mut truncated = 0usize;
            for ((row, _), t) in items.iter().zip(&decoded) {
                truncated += t.truncated as usize;
                let mut rec = t.record.clone();
                rec.id = row.id.clone();
                let out_row = ManifestRow::from_record(&rec, row.image.clone(), row.split);
                serde_json::to_writer(&mut jsonl, &out_row)?;
                jsonl.push(b'\n');
            }
            fs::write(&out, jsonl)?;
            println!(
                "wrote {} predictions to {} ({truncated} truncated)",
                decoded.len(),
                out.display()
            );
            Ok(())
        }

        Command::Score { pred, reference, split, out } => {
            let split = split.as_deref().map(parse_split).transpose()?;
            let refs = read_manifest(&reference)?;
            let preds = read_manifest(&pred)?;
            let by_id: BTreeMap<&str, Record> = preds
                .rows
                .iter()
                .map(|r| (r.id.as_str(), r.to_record()))
                .collect();
            let mut pairs: Vec<(Record, Record)> = Vec::new();
            let mut missing = 0usize;
            for row in &refs.rows {
                if split.is_some_and(|s| s != row.split) {
                    continue;
                }
                let gt = row.to_record();
                let p = match by_id.get(row.id.as_str()) {
                    Some(p) => p.clone(),
                    None => {
                        missing += 1;
                        Record { id: row.id.clone(), lines: Vec::new() }
                    }
                };
                pairs.push((p, gt));
            }
            if pairs.is_empty() {
                return Err(Error::config("no reference records matched the split"));
            }
            if missing > 0 {
                eprintln!("warning: {missing} reference records had no prediction");
            }
            let report = ScoreReport::from_pairs(
                pairs.iter().map(|(p, g)| (p, g, false, 0, &[] as &[String])),
            );
            write_or_print_report(&report, &out)
        }

        Command::Selftest => {
            let outcomes = run_selftests();
            let mut failed = 0usize;
            for c in &outcomes {
                if c.passed {
                    println!("ok   {:<22} {}", c.name, c.detail);
                } else {
                    failed += 1;
                    println!("FAIL {:<22} {}", c.name, c.detail);
                }
            }
            if failed > 0 {
                return Err(Error::data(format!(
                    "{failed} of {} checks failed",
                    outcomes.len()
                )));
            }
            println!("all {} checks passed", outcomes.len());
            Ok(())
        }
    }
}
