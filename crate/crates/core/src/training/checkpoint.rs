//! Self-contained binary checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! then one row-major little-endian f32 payload per parameter in header
//! order, then (if present) Adam moments as f64 pairs in the same order.
//! The header carries the architecture and the full vocabulary, so loading
//! needs nothing but the file; the vocabulary fingerprint is recomputed on
//! load to catch tampering. Serialization is canonical, which makes
//! save -> load -> save byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model};
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::training::optim::{Adam, Moments, OptimConfig};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"SCRVCKPT";
const VERSION: u32 = 1;

/// Where training stood when the file was written. `phase` indexes the
/// scenario's phase list; a cursor just past the last phase marks a
/// completed run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub scenario: String,
    pub phase: usize,
    pub step: usize,
}

impl Cursor {
    pub fn finished(scenario: &str, n_phases: usize) -> Self {
        Cursor { scenario: scenario.to_string(), phase: n_phases, step: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimMeta {
    cfg: OptimConfig,
    step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    vocab: Vocab,
    vocab_fingerprint: String,
    cursor: Cursor,
    params: Vec<ParamMeta>,
    optim: Option<OptimMeta>,
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub model: Model<S>,
    pub vocab: Vocab,
    pub cursor: Cursor,
    pub optim: Option<Adam>,
}

fn collect_payload<S: Scalar>(model: &mut Model<S>) -> (Vec<ParamMeta>, Vec<u8>) {
    let mut metas = Vec::new();
    let mut bytes = Vec::new();
    model.visit("", &mut |p| {
        metas.push(ParamMeta { name: p.name.clone(), shape: p.shape.clone() });
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    });
    (metas, bytes)
}

pub fn checkpoint_bytes<S: Scalar>(
    model: &mut Model<S>,
    vocab: &Vocab,
    cursor: &Cursor,
    optim: Option<&Adam>,
) -> Result<Vec<u8>> {
    let (params, payload) = collect_payload(model);
    if let Some(adam) = optim {
        let state_keys: Vec<&String> = adam.state.keys().collect();
        let mut param_names: Vec<&String> = params.iter().map(|p| &p.name).collect();
        param_names.sort();
        if state_keys != param_names {
            return Err(Error::checkpoint(
                "optimizer state does not cover the exact parameter set",
            ));
        }
    }
    let header = Header {
        arch: model.arch.clone(),
        vocab: vocab.clone(),
        vocab_fingerprint: vocab.fingerprint(),
        cursor: cursor.clone(),
        params,
        optim: optim.map(|a| OptimMeta { cfg: a.cfg.clone(), step: a.step }),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(adam) = optim {
        // Moment payloads follow the header's tensor order, not map order.
        for pm in &header.params {
            let moments = &adam.state[&pm.name];
            for &m in &moments.m {
                out.extend_from_slice(&m.to_le_bytes());
            }
            for &v in &moments.v {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &mut Model<S>,
    vocab: &Vocab,
    cursor: &Cursor,
    optim: Option<&Adam>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, vocab, cursor, optim)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes<S: Scalar>(bytes: &[u8]) -> Result<LoadedCheckpoint<S>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(Error::checkpoint("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    if header.vocab.fingerprint() != header.vocab_fingerprint {
        return Err(Error::checkpoint("vocabulary fingerprint mismatch"));
    }

    let n_values: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let param_bytes = n_values * 4;
    let optim_bytes = if header.optim.is_some() { n_values * 16 } else { 0 };
    let rest = &body[header_len..];
    if rest.len() != param_bytes + optim_bytes {
        return Err(Error::checkpoint(format!(
            "payload is {} bytes, expected {}",
            rest.len(),
            param_bytes + optim_bytes
        )));
    }

    // Seed is irrelevant: every value is overwritten below.
    let mut model: Model<S> = Model::new(header.arch.clone(), header.vocab.nb_class(), 0)?;
    let mut offset = 0usize;
    let mut meta_iter = header.params.iter();
    let mut mismatch: Option<String> = None;
    model.visit("", &mut |p| {
        if mismatch.is_some() {
            return;
        }
        let Some(meta) = meta_iter.next() else {
            mismatch = Some("file lists fewer tensors than the model has".into());
            return;
        };
        if meta.name != p.name || meta.shape != p.shape {
            mismatch = Some(format!(
                "tensor mismatch: file has {} {:?}, model expects {} {:?}",
                meta.name, meta.shape, p.name, p.shape
            ));
            return;
        }
        for v in p.value.iter_mut() {
            let raw = f32::from_le_bytes(rest[offset..offset + 4].try_into().expect("4 bytes"));
            *v = S::of_f32(raw);
            offset += 4;
        }
    });
    if let Some(msg) = mismatch {
        return Err(Error::checkpoint(msg));
    }
    if meta_iter.next().is_some() {
        return Err(Error::checkpoint("file lists more tensors than the model has"));
    }

    let optim = match &header.optim {
        Some(meta) => {
            let mut adam = Adam::new(meta.cfg.clone());
            adam.step = meta.step;
            for pm in &header.params {
                let n: usize = pm.shape.iter().product();
                let mut m = Vec::with_capacity(n);
                for _ in 0..n {
                    m.push(f64::from_le_bytes(
                        rest[offset..offset + 8].try_into().expect("8 bytes"),
                    ));
                    offset += 8;
                }
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(f64::from_le_bytes(
                        rest[offset..offset + 8].try_into().expect("8 bytes"),
                    ));
                    offset += 8;
                }
                adam.state.insert(pm.name.clone(), Moments { m, v });
            }
            Some(adam)
        }
        None => None,
    };

    Ok(LoadedCheckpoint { model, vocab: header.vocab, cursor: header.cursor, optim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::nn::testutil::rng;
    use crate::posenc::PosEnc;
    use crate::transformer::ModelConfig;
    use crate::vocab::{Scheme, Vocab, EOP, SOP};
    use ndarray::Array3;
    use rand::Rng;
    use tempfile::tempdir;

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
                heads: 2,
                layers: 1,
                feedforward: Some(16),
                dropout: 0.0,
                max_decode: 16,
                scale: crate::nn::AttnScale::Standard,
            },
        }
    }

    fn tiny_vocab() -> Vocab {
        let grammar = crate::datasynth::GrammarConfig::default();
        Vocab::for_grammar(Scheme::Joint, &grammar).unwrap()
    }

    fn probe_input(seed: u64) -> Array3<f32> {
        let mut r = rng(seed);
        Array3::from_shape_fn((3, 32, 64), |_| r.random::<f32>())
    }

    #[test]
    fn round_trip_preserves_forward_outputs_exactly() {
        let vocab = tiny_vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), vocab.nb_class(), 42).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("probe.ckpt");
        let cursor = Cursor { scenario: "one_stage".into(), phase: 1, step: 0 };
        save_checkpoint(&path, &mut model, &vocab, &cursor, None).unwrap();

        let loaded: LoadedCheckpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cursor, cursor);
        assert_eq!(loaded.vocab.fingerprint(), vocab.fingerprint());

        let x = probe_input(1);
        let target = [SOP, 4, 5, EOP];
        let a = model.forward_eval(&x, &target).unwrap();
        let b = loaded.model.forward_eval(&x, &target).unwrap();
        // Bit-exact: same arch, parameters restored from the same f32 bits.
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let vocab = tiny_vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), vocab.nb_class(), 43).unwrap();
        let cursor = Cursor { scenario: "two_stage".into(), phase: 0, step: 7 };
        let mut adam = Adam::new(OptimConfig::default());
        // Give the optimizer real state covering every tensor.
        model.visit("", &mut |p| {
            for g in p.grad.iter_mut() {
                *g = 0.5;
            }
        });
        adam.apply(&mut model);
        let bytes1 = checkpoint_bytes(&mut model, &vocab, &cursor, Some(&adam)).unwrap();
        let mut loaded: LoadedCheckpoint<f32> = load_checkpoint_bytes(&bytes1).unwrap();
        let bytes2 = checkpoint_bytes(
            &mut loaded.model,
            &loaded.vocab,
            &loaded.cursor,
            loaded.optim.as_ref(),
        )
        .unwrap();
        assert_eq!(bytes1, bytes2);
        let adam2 = loaded.optim.take().unwrap();
        assert_eq!(adam2.step, adam.step);
        assert_eq!(adam2.state, adam.state);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let vocab = tiny_vocab();
        let mut model: Model<f32> = Model::new(tiny_arch(), vocab.nb_class(), 44).unwrap();
        let cursor = Cursor { scenario: "one_stage".into(), phase: 0, step: 0 };
        let good = checkpoint_bytes(&mut model, &vocab, &cursor, None).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        assert!(load_checkpoint_bytes::<f32>(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        assert!(load_checkpoint_bytes::<f32>(&bad_version).is_err());

        let truncated = &good[..good.len() - 5];
        assert!(load_checkpoint_bytes::<f32>(truncated).is_err());

        let mut extended = good.clone();
        extended.extend_from_slice(&[0u8; 12]);
        assert!(load_checkpoint_bytes::<f32>(&extended).is_err());

        // Flip one hex digit of the stored digest: recomputation catches it.
        let key = b"\"vocab_fingerprint\":\"";
        let at = good
            .windows(key.len())
            .position(|w| w == key)
            .expect("fingerprint field present")
            + key.len();
        let mut bad_digest = good.clone();
        bad_digest[at] = if good[at] == b'0' { b'1' } else { b'0' };
        let err = match load_checkpoint_bytes::<f32>(&bad_digest) {
            Ok(_) => panic!("tampered digest accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }

    #[test]
    fn f64_models_round_trip_through_f32_storage() {
        let vocab = tiny_vocab();
        let mut model: Model<f64> = Model::new(tiny_arch(), vocab.nb_class(), 45).unwrap();
        let cursor = Cursor { scenario: "one_stage".into(), phase: 0, step: 0 };
        let bytes = checkpoint_bytes(&mut model, &vocab, &cursor, None).unwrap();
        let mut loaded: LoadedCheckpoint<f64> = load_checkpoint_bytes(&bytes).unwrap();
        // Values live on the f32 grid after one round trip, so a second trip
        // is lossless.
        let bytes2 = checkpoint_bytes(&mut loaded.model, &vocab, &cursor, None).unwrap();
        assert_eq!(bytes, bytes2);
    }
}
