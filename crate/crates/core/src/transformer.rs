//! Encoder-decoder transformer over the flattened feature sequence.
//!
//! Blocks are pre-norm residual: x + sublayer(LN(x)), with one extra LN after
//! the final block of each stack. The decoder runs causal self-attention over
//! the embedded target prefix, cross-attention over the encoder output, then
//! a position-wise feedforward. Gradients are accumulated by hand through
//! cached intermediates; there is no tape.

use ndarray::{Array1, Array2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    dropout, dropout_backward, normal2, AttnCache, AttnMask, AttnScale, KvCache, Linear,
    MultiHeadAttention, Param, ParamView, Params,
};
use crate::nn::LayerNorm;
use crate::posenc::{pe_1d, sinusoid_table};
use crate::scalar::{s as sc, Scalar};
use crate::vocab::{TokenSequence, EOP, SOP};

/// Transformer hyperparameters. Defaults: hidden 256, one head, two layers,
/// feedforward 4x hidden, dropout 0.1, decode cap 600.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Feedforward width; omit for 4x hidden.
    #[serde(default)]
    pub feedforward: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_decode")]
    pub max_decode: usize,
    #[serde(default = "default_scale")]
    pub scale: AttnScale,
}

fn default_hidden() -> usize {
    256
}
fn default_heads() -> usize {
    1
}
fn default_layers() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_max_decode() -> usize {
    600
}
fn default_scale() -> AttnScale {
    AttnScale::Standard
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            heads: default_heads(),
            layers: default_layers(),
            feedforward: None,
            dropout: default_dropout(),
            max_decode: default_max_decode(),
            scale: default_scale(),
        }
    }
}

impl ModelConfig {
    pub fn ff(&self) -> usize {
        self.feedforward.unwrap_or(4 * self.hidden)
    }

    /// Longest target sequence teacher forcing accepts: `max_decode`
    /// generated tokens plus the start marker and a forced end marker.
    pub fn max_target_len(&self) -> usize {
        self.max_decode + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::config(format!(
                "hidden must be positive and even for sinusoid tables, got {}",
                self.hidden
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.ff() == 0 {
            return Err(Error::config("feedforward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.max_decode < 2 {
            return Err(Error::config("max_decode must be at least 2"));
        }
        Ok(())
    }
}

fn maybe_drop<S: Scalar>(
    x: &Array2<S>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<S>, Option<Array2<S>>) {
    match rng {
        Some(r) if p > 0.0 => {
            let (y, m) = dropout(x, p, r);
            (y, Some(m))
        }
        _ => (x.clone(), None),
    }
}

fn drop_back<S: Scalar>(mask: &Option<Array2<S>>, dy: &Array2<S>) -> Array2<S> {
    match mask {
        Some(m) => dropout_backward(m, dy),
        None => dy.clone(),
    }
}

#[derive(Debug, Clone)]
struct FeedForward<S: Scalar> {
    lin1: Linear<S>,
    lin2: Linear<S>,
}

struct FfCache<S: Scalar> {
    x: Array2<S>,
    pre: Array2<S>,
    h: Array2<S>,
}

impl<S: Scalar> FeedForward<S> {
    fn new(d: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward { lin1: Linear::new(d, width, rng), lin2: Linear::new(width, d, rng) }
    }

    fn forward(&self, x: &Array2<S>) -> (Array2<S>, FfCache<S>) {
        let pre = self.lin1.forward(x);
        let h = pre.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let y = self.lin2.forward(&h);
        (y, FfCache { x: x.clone(), pre, h })
    }

    fn forward_row(&self, x: &ndarray::ArrayView1<S>) -> Array1<S> {
        let mut h = self.lin1.forward_row(x);
        h.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
        self.lin2.forward_row(&h.view())
    }

    fn backward(&mut self, cache: &FfCache<S>, dy: &Array2<S>) -> Array2<S> {
        let dh = self.lin2.backward(&cache.h, dy);
        let dpre = ndarray::Zip::from(&dh)
            .and(&cache.pre)
            .map_collect(|&d, &p| if p > S::zero() { d } else { S::zero() });
        self.lin1.backward(&cache.x, &dpre)
    }
}

impl<S: Scalar> Params<S> for FeedForward<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.lin1.visit(&format!("{prefix}/lin1"), f);
        self.lin2.visit(&format!("{prefix}/lin2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<S: Scalar> {
    ln1: LayerNorm<S>,
    attn: MultiHeadAttention<S>,
    ln2: LayerNorm<S>,
    ff: FeedForward<S>,
}

pub struct EncBlockCache<S: Scalar> {
    x: Array2<S>,
    /// Self-attention internals, exposed for reference checks.
    pub attn: AttnCache<S>,
    m1: Option<Array2<S>>,
    y1: Array2<S>,
    ff: FfCache<S>,
    m2: Option<Array2<S>>,
}

impl<S: Scalar> EncoderBlock<S> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(cfg.hidden),
            attn: MultiHeadAttention::new(cfg.hidden, cfg.heads, cfg.scale, rng)?,
            ln2: LayerNorm::new(cfg.hidden),
            ff: FeedForward::new(cfg.hidden, cfg.ff(), rng),
        })
    }

    fn forward(
        &self,
        x: &Array2<S>,
        p: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<S>, EncBlockCache<S>) {
        let xn = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&xn, &xn, AttnMask::None);
        let (ad, m1) = maybe_drop(&a, p, rng.as_deref_mut());
        let y1 = x + &ad;
        let y1n = self.ln2.forward(&y1);
        let (f, ff) = self.ff.forward(&y1n);
        let (fd, m2) = maybe_drop(&f, p, rng);
        let y = &y1 + &fd;
        (y, EncBlockCache { x: x.clone(), attn, m1, y1, ff, m2 })
    }

    fn backward(&mut self, cache: &EncBlockCache<S>, dy: &Array2<S>) -> Array2<S> {
        let df = drop_back(&cache.m2, dy);
        let dy1n = self.ff.backward(&cache.ff, &df);
        let dy1 = dy + &self.ln2.backward(&cache.y1, &dy1n);
        let da = drop_back(&cache.m1, &dy1);
        let (dq, dkv) = self.attn.backward(&cache.attn, &da);
        let dxn = dq + dkv;
        &dy1 + &self.ln1.backward(&cache.x, &dxn)
    }
}

impl<S: Scalar> Params<S> for EncoderBlock<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.ln1.visit(&format!("{prefix}/ln1"), f);
        self.attn.visit(&format!("{prefix}/attn"), f);
        self.ln2.visit(&format!("{prefix}/ln2"), f);
        self.ff.visit(&format!("{prefix}/ff"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock<S: Scalar> {
    ln1: LayerNorm<S>,
    self_attn: MultiHeadAttention<S>,
    ln2: LayerNorm<S>,
    cross_attn: MultiHeadAttention<S>,
    ln3: LayerNorm<S>,
    ff: FeedForward<S>,
}

pub struct DecBlockCache<S: Scalar> {
    x: Array2<S>,
    pub self_attn: AttnCache<S>,
    m1: Option<Array2<S>>,
    y1: Array2<S>,
    pub cross_attn: AttnCache<S>,
    m2: Option<Array2<S>>,
    y2: Array2<S>,
    ff: FfCache<S>,
    m3: Option<Array2<S>>,
}

impl<S: Scalar> DecoderBlock<S> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: LayerNorm::new(cfg.hidden),
            self_attn: MultiHeadAttention::new(cfg.hidden, cfg.heads, cfg.scale, rng)?,
            ln2: LayerNorm::new(cfg.hidden),
            cross_attn: MultiHeadAttention::new(cfg.hidden, cfg.heads, cfg.scale, rng)?,
            ln3: LayerNorm::new(cfg.hidden),
            ff: FeedForward::new(cfg.hidden, cfg.ff(), rng),
        })
    }

    fn forward(
        &self,
        x: &Array2<S>,
        memory: &Array2<S>,
        p: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<S>, DecBlockCache<S>) {
        let xn = self.ln1.forward(x);
        let (a, self_attn) = self.self_attn.forward(&xn, &xn, AttnMask::Causal);
        let (ad, m1) = maybe_drop(&a, p, rng.as_deref_mut());
        let y1 = x + &ad;
        let y1n = self.ln2.forward(&y1);
        let (b, cross_attn) = self.cross_attn.forward(&y1n, memory, AttnMask::None);
        let (bd, m2) = maybe_drop(&b, p, rng.as_deref_mut());
        let y2 = &y1 + &bd;
        let y2n = self.ln3.forward(&y2);
        let (fo, ff) = self.ff.forward(&y2n);
        let (fd, m3) = maybe_drop(&fo, p, rng);
        let y = &y2 + &fd;
        (y, DecBlockCache { x: x.clone(), self_attn, m1, y1, cross_attn, m2, y2, ff, m3 })
    }

    /// Returns (dx, dmemory).
    fn backward(&mut self, cache: &DecBlockCache<S>, dy: &Array2<S>) -> (Array2<S>, Array2<S>) {
        let df = drop_back(&cache.m3, dy);
        let dy2n = self.ff.backward(&cache.ff, &df);
        let dy2 = dy + &self.ln3.backward(&cache.y2, &dy2n);
        let db = drop_back(&cache.m2, &dy2);
        let (dy1n, dmem) = self.cross_attn.backward(&cache.cross_attn, &db);
        let dy1 = &dy2 + &self.ln2.backward(&cache.y1, &dy1n);
        let da = drop_back(&cache.m1, &dy1);
        let (dq, dkv) = self.self_attn.backward(&cache.self_attn, &da);
        let dxn = dq + dkv;
        let dx = &dy1 + &self.ln1.backward(&cache.x, &dxn);
        (dx, dmem)
    }
}

impl<S: Scalar> Params<S> for DecoderBlock<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.ln1.visit(&format!("{prefix}/ln1"), f);
        self.self_attn.visit(&format!("{prefix}/self_attn"), f);
        self.ln2.visit(&format!("{prefix}/ln2"), f);
        self.cross_attn.visit(&format!("{prefix}/cross_attn"), f);
        self.ln3.visit(&format!("{prefix}/ln3"), f);
        self.ff.visit(&format!("{prefix}/ff"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Transformer<S: Scalar> {
    pub cfg: ModelConfig,
    nb_class: usize,
    /// Token embedding, NB_class x hidden. Rows are scaled by sqrt(hidden)
    /// at lookup time.
    pub embed: Param<S, Ix2>,
    enc_blocks: Vec<EncoderBlock<S>>,
    enc_ln: LayerNorm<S>,
    dec_blocks: Vec<DecoderBlock<S>>,
    dec_ln: LayerNorm<S>,
    out: Linear<S>,
}

pub struct EncodeCache<S: Scalar> {
    pub blocks: Vec<EncBlockCache<S>>,
    pre_ln: Array2<S>,
}

pub struct DecodeCache<S: Scalar> {
    tokens: Vec<u32>,
    m0: Option<Array2<S>>,
    pub blocks: Vec<DecBlockCache<S>>,
    pre_ln: Array2<S>,
    normed: Array2<S>,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(cfg: ModelConfig, nb_class: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if nb_class < 4 {
            return Err(Error::config("vocabulary must include the four markers"));
        }
        let d = cfg.hidden;
        let embed = Param::new(normal2(rng, (nb_class, d), (1.0 / d as f64).sqrt()));
        let enc_blocks = (0..cfg.layers)
            .map(|_| EncoderBlock::new(&cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(d);
        let dec_blocks = (0..cfg.layers)
            .map(|_| DecoderBlock::new(&cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(d);
        let out = Linear::new(d, nb_class, rng);
        Ok(Transformer { cfg, nb_class, embed, enc_blocks, enc_ln, dec_blocks, dec_ln, out })
    }

    pub fn nb_class(&self) -> usize {
        self.nb_class
    }

    pub fn max_target_len(&self) -> usize {
        self.cfg.max_target_len()
    }

    pub fn encode(
        &self,
        seq: &Array2<S>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<S>, EncodeCache<S>)> {
        if seq.ncols() != self.cfg.hidden {
            return Err(Error::shape(format!(
                "encoder expects {} features, got {}",
                self.cfg.hidden,
                seq.ncols()
            )));
        }
        let mut x = seq.clone();
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for block in &self.enc_blocks {
            let (y, cache) = block.forward(&x, self.cfg.dropout, rng.as_deref_mut());
            blocks.push(cache);
            x = y;
        }
        let pre_ln = x.clone();
        let y = self.enc_ln.forward(&x);
        Ok((y, EncodeCache { blocks, pre_ln }))
    }

    /// Returns d(seq).
    pub fn encode_backward(&mut self, cache: &EncodeCache<S>, dy: &Array2<S>) -> Array2<S> {
        let mut dx = self.enc_ln.backward(&cache.pre_ln, dy);
        for (block, bc) in self.enc_blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(bc, &dx);
        }
        dx
    }

    /// Embeds a token prefix: scaled table lookup plus 1D positional
    /// encoding.
    fn embed_prefix(&self, tokens: &[u32]) -> Result<Array2<S>> {
        let d = self.cfg.hidden;
        let scale = sc::<S>((d as f64).sqrt());
        let mut x = Array2::zeros((tokens.len(), d));
        for (row, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.nb_class {
                return Err(Error::bounds(format!(
                    "token {t} outside vocabulary of {}",
                    self.nb_class
                )));
            }
            let emb = self.embed.w.index_axis(Axis(0), t);
            x.index_axis_mut(Axis(0), row).assign(&emb.mapv(|v| v * scale));
        }
        pe_1d(&x)
    }

    /// Teacher-forced decoder pass. Consumes `target[..len-1]` as input and
    /// returns one logits row per predicted position, so `logits[t]` scores
    /// `target[t + 1]`.
    pub fn decode_teacher_forced(
        &self,
        memory: &Array2<S>,
        target: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<S>, DecodeCache<S>)> {
        if target.len() < 2 {
            return Err(Error::data(
                "teacher forcing needs at least a start and one following token",
            ));
        }
        if target.len() > self.max_target_len() {
            return Err(Error::data(format!(
                "target of {} tokens exceeds the decode limit of {}",
                target.len(),
                self.max_target_len()
            )));
        }
        let prefix = &target[..target.len() - 1];
        let emb = self.embed_prefix(prefix)?;
        let (x0, m0) = maybe_drop(&emb, self.cfg.dropout, rng.as_deref_mut());
        let mut x = x0;
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for block in &self.dec_blocks {
            let (y, cache) = block.forward(&x, memory, self.cfg.dropout, rng.as_deref_mut());
            blocks.push(cache);
            x = y;
        }
        let pre_ln = x.clone();
        let normed = self.dec_ln.forward(&x);
        let logits = self.out.forward(&normed);
        Ok((logits, DecodeCache { tokens: prefix.to_vec(), m0, blocks, pre_ln, normed }))
    }

    /// Returns d(memory); embedding and all decoder parameter gradients are
    /// accumulated in place.
    pub fn decode_backward(&mut self, cache: &DecodeCache<S>, dlogits: &Array2<S>) -> Array2<S> {
        let dnormed = self.out.backward(&cache.normed, dlogits);
        let mut dx = self.dec_ln.backward(&cache.pre_ln, &dnormed);
        let mut dmem: Option<Array2<S>> = None;
        for (block, bc) in self.dec_blocks.iter_mut().zip(&cache.blocks).rev() {
            let (dxi, dmi) = block.backward(bc, &dx);
            dx = dxi;
            dmem = Some(match dmem {
                Some(acc) => acc + dmi,
                None => dmi,
            });
        }
        let demb = drop_back(&cache.m0, &dx);
        let scale = sc::<S>((self.cfg.hidden as f64).sqrt());
        for (row, &t) in cache.tokens.iter().enumerate() {
            let drow = demb.index_axis(Axis(0), row);
            let mut grow = self.embed.g.index_axis_mut(Axis(0), t as usize);
            grow += &drow.mapv(|v| v * scale);
        }
        dmem.expect("at least one decoder block")
    }

    pub fn project_logits(&self, dec_out: &Array2<S>) -> Array2<S> {
        self.out.forward(dec_out)
    }

    /// Greedy decoding with incremental key/value caches. Starts from the
    /// start marker, appends the lowest-index argmax class each step, and
    /// stops at the end marker or after `max_decode` generated tokens; a
    /// truncated sequence gets the end marker appended and is flagged.
    pub fn greedy_decode(&self, memory: &Array2<S>) -> Result<(TokenSequence, bool)> {
        let d = self.cfg.hidden;
        let max = self.cfg.max_decode;
        let table = sinusoid_table::<S>(max, d)?;
        let scale = sc::<S>((d as f64).sqrt());

        let mut self_kv: Vec<KvCache<S>> = self
            .dec_blocks
            .iter()
            .map(|_| KvCache::with_capacity(max, d))
            .collect();
        let cross_kv: Vec<KvCache<S>> = self
            .dec_blocks
            .iter()
            .map(|b| b.cross_attn.precompute_kv(memory))
            .collect();

        let mut out = vec![SOP];
        let mut truncated = true;
        while out.len() - 1 < max {
            let pos = out.len() - 1;
            let cur = *out.last().expect("nonempty") as usize;
            if cur >= self.nb_class {
                return Err(Error::bounds(format!(
                    "token {cur} outside vocabulary of {}",
                    self.nb_class
                )));
            }
            let mut x: Array1<S> = self
                .embed
                .w
                .index_axis(Axis(0), cur)
                .mapv(|v| v * scale);
            x += &table.index_axis(Axis(0), pos);

            for (i, block) in self.dec_blocks.iter().enumerate() {
                let xn = block.ln1.forward_row(&x.view());
                block.self_attn.append_kv(&mut self_kv[i], &xn.view());
                let a = block.self_attn.attend_one(&xn.view(), &self_kv[i]);
                let y1 = &x + &a;
                let y1n = block.ln2.forward_row(&y1.view());
                let b = block.cross_attn.attend_one(&y1n.view(), &cross_kv[i]);
                let y2 = &y1 + &b;
                let y2n = block.ln3.forward_row(&y2.view());
                let f = block.ff.forward_row(&y2n.view());
                x = &y2 + &f;
            }
            let normed = self.dec_ln.forward_row(&x.view());
            let logits = self.out.forward_row(&normed.view());
            let next = argmax_lowest(&logits);
            out.push(next);
            if next == EOP {
                truncated = false;
                break;
            }
        }
        if truncated {
            out.push(EOP);
        }
        Ok((TokenSequence { tokens: out }, truncated))
    }

    /// Reference greedy decoding that reruns the full teacher-forced pass on
    /// the growing prefix each step. Slow; used to cross-check the
    /// incremental path.
    pub fn greedy_decode_rerun(&self, memory: &Array2<S>) -> Result<(TokenSequence, bool)> {
        let max = self.cfg.max_decode;
        let mut out = vec![SOP];
        let mut truncated = true;
        while out.len() - 1 < max {
            // The trailing 0 is a placeholder: teacher forcing drops the
            // final token before embedding.
            let mut probe = out.clone();
            probe.push(0);
            let (logits, _) = self.decode_teacher_forced(memory, &probe, None)?;
            let last = logits.index_axis(Axis(0), logits.nrows() - 1);
            let next = argmax_lowest(&last.to_owned());
            out.push(next);
            if next == EOP {
                truncated = false;
                break;
            }
        }
        if truncated {
            out.push(EOP);
        }
        Ok((TokenSequence { tokens: out }, truncated))
    }
}

fn argmax_lowest<S: Scalar>(row: &Array1<S>) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

impl<S: Scalar> Params<S> for Transformer<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.embed.visit(format!("{prefix}/embed"), f);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}/enc/{i}"), f);
        }
        self.enc_ln.visit(&format!("{prefix}/enc_ln"), f);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}/dec/{i}"), f);
        }
        self.dec_ln.visit(&format!("{prefix}/dec_ln"), f);
        self.out.visit(&format!("{prefix}/out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{assert_close, randn2, rng};
    use crate::nn::zero_grads;
    use crate::oracles;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            layers: 1,
            feedforward: Some(16),
            dropout: 0.0,
            max_decode: 12,
            scale: AttnScale::Standard,
        }
    }

    fn tiny_model(seed: u64) -> Transformer<f64> {
        Transformer::new(tiny_cfg(), 10, &mut rng(seed)).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.ff(), 1024);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 1;
        cfg.hidden = 7;
        assert!(cfg.validate().is_err());
        cfg.hidden = 8;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_scale_serializes_as_sqrt_or_hidden() {
        let cfg = ModelConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"scale\":\"sqrt\""));
        let parsed: ModelConfig =
            serde_json::from_str("{\"hidden\":16,\"scale\":\"hidden\"}").unwrap();
        assert_eq!(parsed.scale, AttnScale::Hidden);
        assert_eq!(parsed.heads, 1);
    }

    #[test]
    fn literal_scale_encoder_matches_loop_oracle() {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 1,
            layers: 1,
            feedforward: Some(32),
            dropout: 0.0,
            max_decode: 8,
            scale: AttnScale::Hidden,
        };
        let model: Transformer<f64> = Transformer::new(cfg, 10, &mut rng(3)).unwrap();
        let seq = randn2(&mut rng(4), (8, 16));
        let (_, cache) = model.encode(&seq, None).unwrap();
        let attn = &cache.blocks[0].attn;
        let want = oracles::attention_loop(&attn.q, &attn.k, &attn.v, 16.0, false);
        let diff = (&attn.concat - &want)
            .iter()
            .fold(0f64, |m, &v| m.max(v.abs()));
        assert!(diff <= 1e-10, "max deviation {diff}");
    }

    #[test]
    fn encoder_attention_rows_sum_to_one() {
        let model = tiny_model(5);
        let seq = randn2(&mut rng(6), (5, 8));
        let (_, cache) = model.encode(&seq, None).unwrap();
        for head in &cache.blocks[0].attn.attn {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let model = tiny_model(7);
        let x = randn2(&mut rng(8), (4, 8));
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let (y, _) = model.encode(&x, None).unwrap();
        let (yp, _) = model.encode(&xp, None).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[[dst, c]] - y[[src, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_forcing_shapes_and_limits() {
        let model = tiny_model(9);
        let memory = randn2(&mut rng(10), (6, 8));
        let target = [SOP, 4, 5, 6, EOP];
        let (logits, _) = model.decode_teacher_forced(&memory, &target, None).unwrap();
        assert_eq!(logits.dim(), (4, 10));

        assert!(model.decode_teacher_forced(&memory, &[SOP], None).is_err());
        let long = vec![4u32; model.max_target_len() + 1];
        assert!(model.decode_teacher_forced(&memory, &long, None).is_err());
        assert!(model.decode_teacher_forced(&memory, &[SOP, 99, EOP], None).is_err());
    }

    #[test]
    fn causal_mask_blocks_future_leakage() {
        let model = tiny_model(11);
        let memory = randn2(&mut rng(12), (5, 8));
        let base = [SOP, 4, 5, 6, 7, EOP];
        let (l0, _) = model.decode_teacher_forced(&memory, &base, None).unwrap();
        for t in 1..base.len() - 1 {
            let mut changed = base;
            changed[t] = if base[t] == 4 { 8 } else { 4 };
            let (l1, _) = model.decode_teacher_forced(&memory, &changed, None).unwrap();
            for row in 0..t {
                for c in 0..10 {
                    assert_eq!(
                        l0[[row, c]],
                        l1[[row, c]],
                        "row {row} moved after editing position {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_end_to_end() {
        let mut model = tiny_model(13);
        let seq = randn2(&mut rng(14), (5, 8));
        let target = [SOP, 4, 5, 2, EOP];
        let cot = randn2(&mut rng(15), (4, 10));

        let loss = |m: &Transformer<f64>, seq: &Array2<f64>| {
            let (mem, _) = m.encode(seq, None).unwrap();
            let (logits, _) = m.decode_teacher_forced(&mem, &target, None).unwrap();
            (&logits * &cot).sum()
        };

        let (mem, ec) = model.encode(&seq, None).unwrap();
        let (_, dc) = model.decode_teacher_forced(&mem, &target, None).unwrap();
        zero_grads(&mut model);
        let dmem = model.decode_backward(&dc, &cot);
        let dseq = model.encode_backward(&ec, &dmem);

        for &(r, c) in &[(0, 0), (2, 3), (4, 7)] {
            let g = oracles::central_diff(
                |v| {
                    let mut sp = seq.clone();
                    sp[[r, c]] = v;
                    loss(&model, &sp)
                },
                seq[[r, c]],
                1e-5,
            );
            assert_close(dseq[[r, c]], g, "dseq");
        }

        // One probe per parameter group, via the visitor so names stay in
        // sync with the real traversal.
        let mut names = Vec::new();
        model.visit("m", &mut |p| names.push((p.name.clone(), p.value.len())));
        let picks: Vec<(String, usize)> = names
            .iter()
            .map(|(n, len)| (n.clone(), len / 2))
            .collect();
        for (name, idx) in picks {
            let mut analytic = f64::NAN;
            let mut base = f64::NAN;
            model.visit("m", &mut |p| {
                if p.name == name {
                    analytic = p.grad[idx];
                    base = p.value[idx];
                }
            });
            let g = oracles::central_diff(
                |v| {
                    let mut mp = model.clone();
                    mp.visit("m", &mut |p| {
                        if p.name == name {
                            p.value[idx] = v;
                        }
                    });
                    loss(&mp, &seq)
                },
                base,
                1e-5,
            );
            assert_close(analytic, g, &name);
        }
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let mut model = tiny_model(17);
        let seq = randn2(&mut rng(18), (6, 8));
        let target = [SOP, 4, 5, 6, 7, 8, EOP];
        let cot = randn2(&mut rng(19), (6, 10));
        let (mem, ec) = model.encode(&seq, None).unwrap();
        let (_, dc) = model.decode_teacher_forced(&mem, &target, None).unwrap();
        zero_grads(&mut model);
        let dmem = model.decode_backward(&dc, &cot);
        model.encode_backward(&ec, &dmem);
        model.visit("m", &mut |p| {
            let norm: f64 = p.grad.iter().map(|g| g * g).sum::<f64>();
            assert!(norm > 0.0, "no gradient reached {}", p.name);
        });
    }

    #[test]
    fn greedy_stops_immediately_when_end_marker_dominates() {
        let mut model = tiny_model(21);
        model.out.b.w.fill(0.0);
        model.out.b.w[EOP as usize] = 1e6;
        let memory = randn2(&mut rng(22), (4, 8));
        let (toks, truncated) = model.greedy_decode(&memory).unwrap();
        assert_eq!(toks.tokens, vec![SOP, EOP]);
        assert!(!truncated);
    }

    #[test]
    fn greedy_truncation_is_flagged_and_terminated() {
        let mut model = tiny_model(23);
        model.out.b.w.fill(0.0);
        model.out.b.w[5] = 1e6;
        let memory = randn2(&mut rng(24), (4, 8));
        let (toks, truncated) = model.greedy_decode(&memory).unwrap();
        assert!(truncated);
        assert_eq!(toks.tokens.len(), 1 + model.cfg.max_decode + 1);
        assert_eq!(*toks.tokens.last().unwrap(), EOP);
        assert_eq!(toks.tokens[1], 5);
    }

    #[test]
    fn incremental_greedy_matches_rerun_reference() {
        for seed in [25u64, 26, 27] {
            let model = tiny_model(seed);
            let memory = randn2(&mut rng(seed + 100), (5, 8));
            let (fast, t_fast) = model.greedy_decode(&memory).unwrap();
            let (slow, t_slow) = model.greedy_decode_rerun(&memory).unwrap();
            assert_eq!(fast.tokens, slow.tokens);
            assert_eq!(t_fast, t_slow);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let model = tiny_model(29);
        let memory = randn2(&mut rng(30), (5, 8));
        let (a, _) = model.greedy_decode(&memory).unwrap();
        let (b, _) = model.greedy_decode(&memory).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn dropout_draws_only_in_training_mode() {
        let cfg = ModelConfig { dropout: 0.5, ..tiny_cfg() };
        let model: Transformer<f64> = Transformer::new(cfg, 10, &mut rng(31)).unwrap();
        let seq = randn2(&mut rng(32), (4, 8));
        let (e1, _) = model.encode(&seq, None).unwrap();
        let (e2, _) = model.encode(&seq, None).unwrap();
        assert_eq!(e1, e2);
        let mut r1 = rng(33);
        let (t1, _) = model.encode(&seq, Some(&mut r1)).unwrap();
        assert_ne!(e1, t1);
        let mut r2 = rng(33);
        let (t2, _) = model.encode(&seq, Some(&mut r2)).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn forward_passes_stay_finite() {
        let model = tiny_model(35);
        let mut r = rng(36);
        for _ in 0..200 {
            let seq = randn2(&mut r, (6, 8));
            let (mem, _) = model.encode(&seq, None).unwrap();
            let (logits, _) = model
                .decode_teacher_forced(&mem, &[SOP, 4, 5, EOP], None)
                .unwrap();
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }
}
