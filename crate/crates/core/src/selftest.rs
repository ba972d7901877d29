//! Built-in diagnostics, runnable from the command line in seconds.
//!
//! Each check verifies an invariant against an independent reference
//! computation, and several include a mutation probe: they re-run the
//! detector on a deliberately broken variant (a sign flip in the position
//! tables, an off-by-one causal mask, a mis-scaled gradient) and fail unless
//! the detector fires. A check that cannot catch the mistake it exists for
//! is worse than no check.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::datasynth::{generate_record, Category, GrammarConfig, Person, TaggedWord};
use crate::error::{Error, Result};
use crate::metrics::{align_entities, credit_basic};
use crate::model::{ArchConfig, Model};
use crate::nn::{AttnScale, Params};
use crate::oracles::{attention_loop, best_matching_exhaustive, sinusoid_direct};
use crate::posenc::{sinusoid_table, A2dpe, PosEnc};
use crate::rng::{label, stream};
use crate::training::{checkpoint_bytes, cross_entropy, load_checkpoint_bytes, Cursor};
use crate::transformer::{ModelConfig, Transformer};
use crate::vocab::{decode_target, encode_target, Scheme, Vocab, EOP, SOP};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, run: fn() -> Result<String>) -> CheckOutcome {
    match run() {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
    }
}

pub fn run_selftests() -> Vec<CheckOutcome> {
    vec![
        outcome("vocab_round_trip", vocab_round_trip),
        outcome("sinusoid_table", sinusoid_check),
        outcome("posenc_gate_identity", posenc_identity),
        outcome("causal_mask", causal_mask),
        outcome("model_gradients", model_gradients),
        outcome("entity_alignment", entity_alignment),
        outcome("checkpoint_round_trip", checkpoint_round_trip),
        outcome("loss_calibration", loss_calibration),
    ]
}

fn vocab_round_trip() -> Result<String> {
    let g = GrammarConfig::default();
    for scheme in [Scheme::Joint, Scheme::Separate] {
        let v = Vocab::for_grammar(scheme, &g)?;
        for seed in 0..3 {
            let rec = generate_record(seed, &g)?;
            let toks = encode_target(&rec, &v, true)?;
            let (back, diags) = decode_target(&toks.tokens, &v)?;
            if back.lines != rec.lines || !diags.is_empty() {
                return Err(Error::data(format!(
                    "tagged round trip diverged ({}, seed {seed})",
                    scheme.as_str()
                )));
            }
            let plain = encode_target(&rec, &v, false)?;
            let (text_back, _) = decode_target(&plain.tokens, &v)?;
            if text_back.text() != rec.text() {
                return Err(Error::data(format!(
                    "plain round trip diverged ({}, seed {seed})",
                    scheme.as_str()
                )));
            }
        }
    }
    Ok("2 schemes x 3 records, tagged and plain".into())
}

fn sinusoid_check() -> Result<String> {
    let (len, d) = (64, 32);
    let table = sinusoid_table::<f64>(len, d)?;
    let deviation = |t: &Array2<f64>| -> f64 {
        let mut worst = 0.0f64;
        for p in 0..len {
            for i in 0..d / 2 {
                let (s, c) = sinusoid_direct(p, i, d);
                worst = worst.max((t[[p, 2 * i]] - s).abs());
                worst = worst.max((t[[p, 2 * i + 1]] - c).abs());
            }
        }
        worst
    };
    let real = deviation(&table);
    if real > 1e-12 {
        return Err(Error::data(format!("table deviates from the closed form by {real:e}")));
    }
    let mut mutant = table.clone();
    for i in (1..d).step_by(2) {
        mutant.column_mut(i).mapv_inplace(|x| -x);
    }
    let caught = deviation(&mutant);
    if caught < 1e-3 {
        return Err(Error::data("sign-flipped table slipped past the detector"));
    }
    Ok(format!("deviation {real:.1e}; sign-flip mutant deviates {caught:.2}"))
}

fn posenc_identity() -> Result<String> {
    let d = 8;
    let mut rng = stream(1, &[label("selftest")]);
    let mut layer: A2dpe<f64> = A2dpe::new(d, &mut rng);
    // With the second gate matrices zeroed the gates sit exactly at 1/2.
    layer.w2_h.w.fill(0.0);
    layer.w2_w.w.fill(0.0);
    let x = Array3::from_shape_fn((d, 3, 5), |_| rng.random::<f64>() - 0.5);
    let (y, _) = layer.forward(&x)?;
    let want = A2dpe::forward_with_scales(&x, 0.5, 0.5)?;
    let gap = y
        .iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if gap > 1e-12 {
        return Err(Error::data(format!("half-scale identity violated by {gap:e}")));
    }
    let mutant = A2dpe::forward_with_scales(&x, -0.5, -0.5)?;
    let caught = mutant
        .iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if caught < 1e-3 {
        return Err(Error::data("sign-flipped scales slipped past the detector"));
    }
    Ok(format!("identity gap {gap:.1e}; sign-flip mutant deviates {caught:.2}"))
}

/// Attention where position i wrongly also sees position i+1.
fn off_by_one_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (n, d) = q.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let visible = (i + 1).min(n - 1);
        let mut scores: Vec<f64> = (0..=visible)
            .map(|j| q.row(i).dot(&k.row(j)) / (d as f64).sqrt())
            .collect();
        let peak = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - peak).exp()).sum();
        for s in &mut scores {
            *s = (*s - peak).exp() / z;
        }
        for (j, w) in scores.iter().enumerate() {
            for c in 0..d {
                out[[i, c]] += w * v[[j, c]];
            }
        }
    }
    out
}

fn causal_mask() -> Result<String> {
    let cfg = ModelConfig {
        hidden: 8,
        heads: 1,
        layers: 1,
        feedforward: Some(16),
        dropout: 0.0,
        max_decode: 16,
        scale: AttnScale::Standard,
    };
    let mut rng = stream(2, &[label("selftest")]);
    let model: Transformer<f64> = Transformer::new(cfg, 12, &mut rng)?;
    let memory = Array2::from_shape_fn((3, 8), |_| rng.random::<f64>() - 0.5);
    let (a, _) = model.decode_teacher_forced(&memory, &[SOP, 4, 5, 6, EOP], None)?;
    let (b, _) = model.decode_teacher_forced(&memory, &[SOP, 4, 5, 7, EOP], None)?;
    for t in 0..3 {
        if a.row(t) != b.row(t) {
            return Err(Error::data(format!("future token leaked into logits row {t}")));
        }
    }
    if a.row(3) == b.row(3) {
        return Err(Error::data("probe is dead: changed token had no effect at all"));
    }

    // The same probe applied to a mask that is off by one must fire.
    let q = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
    let k = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
    let v = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() - 0.5);
    let mut v2 = v.clone();
    v2[[3, 0]] += 1.0;
    let honest = attention_loop(&q, &k, &v, 2.0, true);
    let honest2 = attention_loop(&q, &k, &v2, 2.0, true);
    if honest.row(2) != honest2.row(2) {
        return Err(Error::data("reference causal attention is itself leaky"));
    }
    let mutant = off_by_one_attention(&q, &k, &v);
    let mutant2 = off_by_one_attention(&q, &k, &v2);
    if mutant.row(2) == mutant2.row(2) {
        return Err(Error::data("off-by-one mask slipped past the detector"));
    }
    Ok("rows before a perturbed token are bit-identical; off-by-one mutant caught".into())
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
            hidden: 6,
            heads: 1,
            layers: 1,
            feedforward: Some(12),
            dropout: 0.0,
            max_decode: 16,
            scale: AttnScale::Standard,
        },
    }
}

fn model_gradients() -> Result<String> {
    let mut model: Model<f64> = Model::new(tiny_arch(), 10, 7)?;
    let mut rng = stream(4, &[label("selftest")]);
    let x = Array3::from_shape_fn((3, 32, 64), |_| rng.random::<f64>());
    let target = [SOP, 4, 5, EOP];

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let logits = m.forward_eval(&x, &target)?;
        Ok(cross_entropy(&logits, &target)?.0)
    };
    let mut drop_rng = stream(5, &[label("selftest")]);
    let (logits, cache) = model.forward_train(&x, &target, &mut drop_rng)?;
    let (_, dlogits) = cross_entropy(&logits, &target)?;
    crate::nn::zero_grads(&mut model);
    model.backward(&cache, &dlogits)?;

    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for probe in ["compress/conv/w", "a2dpe/w1_h", "transformer/out/w"] {
        // Probe the steepest coordinate so the relative error is meaningful.
        let mut at = 0usize;
        let mut analytic = 0.0f64;
        model.visit("", &mut |p| {
            if p.name == probe {
                for (i, g) in p.grad.iter().enumerate() {
                    if g.abs() > analytic.abs() {
                        analytic = *g;
                        at = i;
                    }
                }
            }
        });
        if analytic.abs() < 1e-10 {
            return Err(Error::data(format!("gradient of {probe} is suspiciously flat")));
        }
        let h = 1e-5;
        let poke = |m: &mut Model<f64>, delta: f64| {
            m.visit("", &mut |p| {
                if p.name == probe {
                    p.value[at] += delta;
                }
            });
        };
        poke(&mut model, h);
        let up = loss_of(&model)?;
        poke(&mut model, -2.0 * h);
        let down = loss_of(&model)?;
        poke(&mut model, h);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        if rel > 1e-4 {
            return Err(Error::data(format!(
                "{probe}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
            )));
        }
        // A gradient off by a factor of two must be flagged by the same
        // tolerance.
        let doubled = (2.0 * analytic - numeric).abs() / numeric.abs().max(1e-12);
        if doubled <= 1e-4 {
            return Err(Error::data(format!("{probe}: doubled gradient slipped past")));
        }
        worst = worst.max(rel);
        details.push(probe);
    }
    Ok(format!("{} probes, worst relative error {worst:.1e}", details.len()))
}

fn entity_alignment() -> Result<String> {
    let mut rng = stream(6, &[label("selftest")]);
    let texts = ["maria", "marla", "joan", "pere", "puig"];
    let cats = [Category::Name, Category::Surname, Category::Occupation];
    let pers = [Person::Husband, Person::Wife];
    let word = |rng: &mut rand_chacha::ChaCha8Rng| {
        TaggedWord::tagged(
            texts[rng.random_range(0..texts.len())],
            cats[rng.random_range(0..cats.len())],
            pers[rng.random_range(0..pers.len())],
        )
    };
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let pred: Vec<TaggedWord> = (0..rng.random_range(0..5)).map(|_| word(&mut rng)).collect();
        let gt: Vec<TaggedWord> = (0..rng.random_range(1..5)).map(|_| word(&mut rng)).collect();
        let (dp, _) = align_entities(&pred, &gt, credit_basic);
        let oracle = best_matching_exhaustive(pred.len(), gt.len(), &|i, j| {
            credit_basic(&pred[i], &gt[j])
        });
        worst = worst.max((dp - oracle).abs());
    }
    if worst > 1e-9 {
        return Err(Error::data(format!(
            "alignment differs from exhaustive matching by {worst:e}"
        )));
    }
    // A matcher that pairs entities by position alone throws away the
    // correct match here; the oracle gap must expose it.
    let gt = vec![TaggedWord::tagged("maria", Category::Name, Person::Wife)];
    let pred = vec![
        TaggedWord::tagged("puig", Category::Occupation, Person::Wife),
        TaggedWord::tagged("maria", Category::Name, Person::Wife),
    ];
    let (dp, _) = align_entities(&pred, &gt, credit_basic);
    let diagonal: f64 = gt
        .iter()
        .zip(&pred)
        .map(|(g, p)| credit_basic(p, g))
        .sum();
    if dp - diagonal < 50.0 {
        return Err(Error::data("positional matcher mutant slipped past the detector"));
    }
    Ok(format!("40 random instances match the exhaustive oracle (gap {worst:.1e})"))
}

fn checkpoint_round_trip() -> Result<String> {
    let g = GrammarConfig::default();
    let v = Vocab::for_grammar(Scheme::Joint, &g)?;
    let mut model: Model<f32> = Model::new(tiny_arch(), v.nb_class(), 11)?;
    let cursor = Cursor { scenario: "one_stage".into(), phase: 0, step: 0 };
    let bytes = checkpoint_bytes(&mut model, &v, &cursor, None)?;
    let mut back = load_checkpoint_bytes::<f32>(&bytes)?;
    let again = checkpoint_bytes(&mut back.model, &back.vocab, &back.cursor, None)?;
    if bytes != again {
        return Err(Error::data("save -> load -> save changed bytes"));
    }
    let mut rng = stream(8, &[label("selftest")]);
    let x = Array3::from_shape_fn((3, 32, 64), |_| rng.random::<f32>());
    let target = [SOP, 4, EOP];
    if model.forward_eval(&x, &target)? != back.model.forward_eval(&x, &target)? {
        return Err(Error::data("restored model disagrees with the original"));
    }
    if load_checkpoint_bytes::<f32>(&bytes[..bytes.len() - 1]).is_ok() {
        return Err(Error::data("truncated checkpoint slipped past the detector"));
    }
    Ok(format!("{} bytes stable; forward probe bit-identical", bytes.len()))
}

fn loss_calibration() -> Result<String> {
    let classes = 10;
    let logits: Array2<f64> = Array2::zeros((3, classes));
    let target = [SOP, 4, 5, EOP];
    let (loss, dlogits) = cross_entropy(&logits, &target)?;
    let want = (classes as f64).ln();
    if (loss - want).abs() > 1e-12 {
        return Err(Error::data(format!(
            "uniform logits must cost ln({classes}) = {want:.6}, got {loss:.6}"
        )));
    }
    for (t, row) in dlogits.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if sum.abs() > 1e-12 {
            return Err(Error::data(format!("gradient row {t} sums to {sum:e}, not 0")));
        }
    }
    let mut confident = logits.clone();
    for (t, &tok) in target[1..].iter().enumerate() {
        confident[[t, tok as usize]] = 1e3;
    }
    let (small, _) = cross_entropy(&confident, &target)?;
    if small > 1e-6 {
        return Err(Error::data(format!("confident logits still cost {small:e}")));
    }
    Ok(format!("uniform = ln({classes}) exactly; confident -> {small:.1e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_selftests() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn outcomes_cover_the_registry_in_order() {
        let names: Vec<&str> = run_selftests().iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "vocab_round_trip",
                "sinusoid_table",
                "posenc_gate_identity",
                "causal_mask",
                "model_gradients",
                "entity_alignment",
                "checkpoint_round_trip",
                "loss_calibration",
            ]
        );
    }
}
