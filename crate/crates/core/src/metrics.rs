//! Character error rate and the two entity scores, plus the evaluation
//! harness that runs a model over a dataset split.
//!
//! Scoring walks ground-truth entity words. A dynamic program aligns
//! predicted and reference entities order-preservingly, maximizing total
//! credit; each score defines its own credit. Basic credit gates on the
//! category tag, complete credit on category and person together; a correct
//! gate earns 100 * max(0, 1 - cer) for the word text. A record's score is
//! the mean credit over its reference entity words, so missed entities cost
//! their full share and spurious extra predictions are not charged here.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datasynth::{GrayImage, Record, TaggedWord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::vocab::{decode_target, parse_entities, Vocab};

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length. Unbounded above; 0 is exact.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("cer needs a non-empty reference"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.chars().count() as f64)
}

fn text_credit(pred: &str, gt: &str) -> f64 {
    match cer(pred, gt) {
        Ok(c) => 100.0 * (1.0 - c).max(0.0),
        Err(_) => 0.0,
    }
}

/// Basic credit: category must match; person tags are ignored.
pub fn credit_basic(pred: &TaggedWord, gt: &TaggedWord) -> f64 {
    if pred.category == gt.category {
        text_credit(&pred.text, &gt.text)
    } else {
        0.0
    }
}

/// Complete credit: category and person must both match.
pub fn credit_complete(pred: &TaggedWord, gt: &TaggedWord) -> f64 {
    if pred.category == gt.category && pred.person == gt.person {
        text_credit(&pred.text, &gt.text)
    } else {
        0.0
    }
}

/// Order-preserving one-to-one alignment maximizing total credit.
/// Returns (total credit, matched pred index per gt item).
pub fn align_entities(
    pred: &[TaggedWord],
    gt: &[TaggedWord],
    credit: impl Fn(&TaggedWord, &TaggedWord) -> f64,
) -> (f64, Vec<Option<usize>>) {
    let (n, m) = (pred.len(), gt.len());
    // dp[i][j]: best credit using gt[..i] and pred[..j].
    let mut dp = vec![vec![0.0f64; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            let pair = dp[i - 1][j - 1] + credit(&pred[j - 1], &gt[i - 1]);
            dp[i][j] = dp[i - 1][j].max(dp[i][j - 1]).max(pair);
        }
    }
    let mut matching = vec![None; m];
    let (mut i, mut j) = (m, n);
    while i > 0 && j > 0 {
        if dp[i][j] == dp[i - 1][j] {
            i -= 1;
        } else if dp[i][j] == dp[i][j - 1] {
            j -= 1;
        } else {
            matching[i - 1] = Some(j - 1);
            i -= 1;
            j -= 1;
        }
    }
    (dp[m][n], matching)
}

fn entity_score(
    pred: &Record,
    gt: &Record,
    credit: impl Fn(&TaggedWord, &TaggedWord) -> f64,
) -> Result<f64> {
    let gt_entities = parse_entities(gt);
    if gt_entities.is_empty() {
        return Err(Error::data("record has no entity words to score"));
    }
    let pred_entities = parse_entities(pred);
    let (total, _) = align_entities(&pred_entities, &gt_entities, credit);
    Ok(total / gt_entities.len() as f64)
}

/// Mean per-entity credit gated on category alone, in [0, 100].
pub fn basic_score(pred: &Record, gt: &Record) -> Result<f64> {
    entity_score(pred, gt, credit_basic)
}

/// Mean per-entity credit gated on category and person, in [0, 100].
pub fn complete_score(pred: &Record, gt: &Record) -> Result<f64> {
    entity_score(pred, gt, credit_complete)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    /// None when the reference record has no entities to score.
    pub basic: Option<f64>,
    pub complete: Option<f64>,
    pub cer: f64,
    pub truncated: bool,
    pub diagnostics: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub records: Vec<RecordScore>,
    pub mean_basic: f64,
    pub mean_complete: f64,
    /// Total edit distance over total reference length, tags stripped.
    pub corpus_cer: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
    pub diagnostic_counts: BTreeMap<String, usize>,
}

impl ScoreReport {
    /// Aggregates prediction/reference record pairs. Records whose reference
    /// has no entities contribute to CER but not to the score means.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a Record, &'a Record, bool, usize, &'a [String])>,
    ) -> ScoreReport {
        let mut records = Vec::new();
        let mut basic_sum = 0.0;
        let mut complete_sum = 0.0;
        let mut n_scored = 0usize;
        let mut n_skipped = 0usize;
        let mut dist_sum = 0usize;
        let mut len_sum = 0usize;
        let mut diagnostic_counts = BTreeMap::new();
        for (pred, gt, truncated, n_diags, diag_kinds) in pairs {
            let gt_text = gt.text();
            let pred_text = pred.text();
            dist_sum += levenshtein(&pred_text, &gt_text);
            len_sum += gt_text.chars().count();
            let record_cer = cer(&pred_text, &gt_text).unwrap_or(f64::NAN);
            let (basic, complete) = match (basic_score(pred, gt), complete_score(pred, gt)) {
                (Ok(b), Ok(c)) => {
                    basic_sum += b;
                    complete_sum += c;
                    n_scored += 1;
                    (Some(b), Some(c))
                }
                _ => {
                    n_skipped += 1;
                    (None, None)
                }
            };
            for kind in diag_kinds {
                *diagnostic_counts.entry(kind.clone()).or_insert(0) += 1;
            }
            records.push(RecordScore {
                id: gt.id.clone(),
                basic,
                complete,
                cer: record_cer,
                truncated,
                diagnostics: n_diags,
            });
        }
        let denom = n_scored.max(1) as f64;
        ScoreReport {
            records,
            mean_basic: basic_sum / denom,
            mean_complete: complete_sum / denom,
            corpus_cer: if len_sum == 0 { 0.0 } else { dist_sum as f64 / len_sum as f64 },
            n_scored,
            n_skipped,
            diagnostic_counts,
        }
    }
}

/// One greedy transcription, decoded back into record structure.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub record: Record,
    pub truncated: bool,
    pub diag_kinds: Vec<String>,
}

fn decode_all<S: Scalar, T: Sync>(
    model: &Model<S>,
    vocab: &Vocab,
    items: &[T],
    img_of: impl Fn(&T) -> &GrayImage + Sync,
    threads: usize,
) -> Result<Vec<Transcription>> {
    let decode_one = |item: &T| -> Result<Transcription> {
        let tensor: Array3<S> =
            crate::backbone::preprocess(img_of(item), model.arch.image_h, model.arch.image_w)?;
        let (tokens, truncated) = model.transcribe(&tensor)?;
        let (record, diags) = decode_target(&tokens.tokens, vocab)?;
        Ok(Transcription {
            record,
            truncated,
            diag_kinds: diags.iter().map(|d| d.kind().to_string()).collect(),
        })
    };

    let threads = threads.max(1).min(items.len().max(1));
    let mut slots: Vec<Option<Result<Transcription>>> = (0..items.len()).map(|_| None).collect();
    if threads <= 1 {
        for (slot, item) in slots.iter_mut().zip(items) {
            *slot = Some(decode_one(item));
        }
    } else {
        let mut stripes: Vec<&mut [Option<Result<Transcription>>]> = Vec::new();
        let per = slots.len().div_ceil(threads);
        let mut rest = slots.as_mut_slice();
        // Contiguous chunks keep the borrow checker happy; each thread owns
        // one chunk of the output and reads its share of the input.
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            stripes.push(head);
            rest = tail;
        }
        std::thread::scope(|scope| {
            let mut offset = 0;
            for stripe in stripes {
                let start = offset;
                offset += stripe.len();
                let items = &items[start..start + stripe.len()];
                scope.spawn(move || {
                    for (slot, item) in stripe.iter_mut().zip(items) {
                        *slot = Some(decode_one(item));
                    }
                });
            }
        });
    }
    slots
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect()
}

/// Transcribes each image with greedy decoding. `threads` > 1 fans images
/// out over scoped threads in a fixed stripe order, so results do not
/// depend on timing.
pub fn transcribe_records<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    images: &[GrayImage],
    threads: usize,
) -> Result<Vec<Transcription>> {
    decode_all(model, vocab, images, |img| img, threads)
}

/// Runs the model over (image, reference) pairs and scores the decoded
/// transcriptions.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    items: &[(GrayImage, Record)],
    threads: usize,
) -> Result<ScoreReport> {
    let decoded = decode_all(model, vocab, items, |(img, _)| img, threads)?;
    let pairs: Vec<(&Record, &Record, bool, usize, &[String])> = decoded
        .iter()
        .zip(items)
        .map(|(d, (_, gt))| {
            (&d.record, gt, d.truncated, d.diag_kinds.len(), d.diag_kinds.as_slice())
        })
        .collect();
    Ok(ScoreReport::from_pairs(pairs))
}
