//! Full image-to-tokens model: backbone, channel compression, positional
//! encoding, then the encoder-decoder transformer.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, Compress};
use crate::error::{Error, Result};
use crate::nn::{Conv2dCache, ParamView, Params};
use crate::posenc::{flatten, pe_1d, unflatten, A2dpe, A2dpeCache, PosEnc};
use crate::rng::{label, stream};
use crate::scalar::Scalar;
use crate::transformer::{DecodeCache, EncodeCache, ModelConfig, Transformer};
use crate::vocab::TokenSequence;

/// Everything that fixes the network shape. Stored inside checkpoints so a
/// loaded model never depends on an out-of-band config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default = "default_image_h")]
    pub image_h: usize,
    #[serde(default = "default_image_w")]
    pub image_w: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_posenc")]
    pub positional_encoding: PosEnc,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_image_h() -> usize {
    256
}
fn default_image_w() -> usize {
    1024
}
fn default_posenc() -> PosEnc {
    PosEnc::A2dpe
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_h: default_image_h(),
            image_w: default_image_w(),
            backbone: BackboneConfig::default(),
            positional_encoding: default_posenc(),
            model: ModelConfig::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_h % 32 != 0 || self.image_w == 0 || self.image_w % 32 != 0 {
            return Err(Error::config(format!(
                "image size {}x{} must be positive multiples of 32",
                self.image_h, self.image_w
            )));
        }
        self.backbone.validate()?;
        self.model.validate()?;
        // Feature rows after flattening must fit the decoder's mask-free
        // cross-attention; no constraint there, but the encoder sequence
        // should not be empty.
        Ok(())
    }

    /// Spatial feature dims (H', W') after the /32 backbone.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_h / 32, self.image_w / 32)
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub arch: ArchConfig,
    pub backbone: Backbone<S>,
    pub compress: Compress<S>,
    /// Present only when the arch selects the adaptive 2D encoding.
    pub a2dpe: Option<A2dpe<S>>,
    pub transformer: Transformer<S>,
}

pub struct ImageCache<S: Scalar> {
    bb: BackboneCache<S>,
    comp: Conv2dCache<S>,
    a2dpe: Option<A2dpeCache<S>>,
    hw: (usize, usize),
    enc: EncodeCache<S>,
}

pub struct TrainCache<S: Scalar> {
    pub image: ImageCache<S>,
    pub dec: DecodeCache<S>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic init: the parameter stream depends only on the seed.
    pub fn new(arch: ArchConfig, nb_class: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, &[label("init")]);
        let backbone = Backbone::new(arch.backbone.clone(), &mut rng)?;
        let compress = Compress::new(arch.backbone.c_out(), arch.model.hidden, &mut rng);
        let a2dpe = match arch.positional_encoding {
            PosEnc::A2dpe => Some(A2dpe::new(arch.model.hidden, &mut rng)),
            PosEnc::OneD => None,
        };
        let transformer = Transformer::new(arch.model.clone(), nb_class, &mut rng)?;
        Ok(Model { arch, backbone, compress, a2dpe, transformer })
    }

    pub fn nb_class(&self) -> usize {
        self.transformer.nb_class()
    }

    /// Image tensor (3, H, W) to encoder memory (H'W', hidden).
    pub fn encode_image(
        &self,
        x: &Array3<S>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<S>, ImageCache<S>)> {
        let (features, bb) = self.backbone.forward(x)?;
        let (compressed, comp) = self.compress.forward(&features);
        let (_, fh, fw) = compressed.dim();
        let (seq, a2dpe_cache) = match (&self.a2dpe, self.arch.positional_encoding) {
            (Some(layer), PosEnc::A2dpe) => {
                let (encoded, cache) = layer.forward(&compressed)?;
                (flatten(&encoded), Some(cache))
            }
            _ => (pe_1d(&flatten(&compressed))?, None),
        };
        let (memory, enc) = self.transformer.encode(&seq, rng.as_deref_mut())?;
        Ok((memory, ImageCache { bb, comp, a2dpe: a2dpe_cache, hw: (fh, fw), enc }))
    }

    /// Teacher-forced training pass; `rng` drives dropout.
    pub fn forward_train(
        &self,
        x: &Array3<S>,
        target: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<S>, TrainCache<S>)> {
        let mut r = Some(rng);
        let (memory, image) = self.encode_image(x, r.as_deref_mut())?;
        let (logits, dec) = self.transformer.decode_teacher_forced(&memory, target, r)?;
        Ok((logits, TrainCache { image, dec }))
    }

    /// Deterministic pass without dropout.
    pub fn forward_eval(&self, x: &Array3<S>, target: &[u32]) -> Result<Array2<S>> {
        let (memory, _) = self.encode_image(x, None)?;
        let (logits, _) = self.transformer.decode_teacher_forced(&memory, target, None)?;
        Ok(logits)
    }

    /// Accumulates gradients for every parameter group; the image gradient
    /// is computed and dropped.
    pub fn backward(&mut self, cache: &TrainCache<S>, dlogits: &Array2<S>) -> Result<()> {
        let dmem = self.transformer.decode_backward(&cache.dec, dlogits);
        let dseq = self.transformer.encode_backward(&cache.image.enc, &dmem);
        let (fh, fw) = cache.image.hw;
        // pe_1d adds a constant table, so its gradient is the identity.
        let dmap = unflatten(&dseq, fh, fw)?;
        let dcompressed = match (&mut self.a2dpe, &cache.image.a2dpe) {
            (Some(layer), Some(ac)) => layer.backward(ac, &dmap),
            _ => dmap,
        };
        let dfeatures = self.compress.backward(&cache.image.comp, &dcompressed);
        self.backbone.backward(&cache.image.bb, &dfeatures);
        Ok(())
    }

    /// Greedy transcription of one image tensor; returns the token sequence
    /// and the truncation flag.
    pub fn transcribe(&self, x: &Array3<S>) -> Result<(TokenSequence, bool)> {
        let (memory, _) = self.encode_image(x, None)?;
        self.transformer.greedy_decode(&memory)
    }
}

impl<S: Scalar> Params<S> for Model<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        let root = if prefix.is_empty() { String::new() } else { format!("{prefix}/") };
        self.backbone.visit(&format!("{root}backbone"), f);
        self.compress.visit(&format!("{root}compress"), f);
        if let Some(layer) = &mut self.a2dpe {
            layer.visit(&format!("{root}a2dpe"), f);
        }
        self.transformer.visit(&format!("{root}transformer"), f);
    }
}
