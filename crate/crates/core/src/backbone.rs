//! Residual CNN feature extractor with a fixed /32 downsampling geometry,
//! plus image preprocessing and the channel-compression conv that matches
//! the transformer's hidden size.
//!
//! Two stem shapes cover both presets: a 3x3 stride-2 conv (stem alone gives
//! /2, every stage strides 2) or a 7x7 stride-2 conv followed by 3x3 stride-2
//! max pooling (stem gives /4, the first stage keeps stride 1). Either way
//! the stride product is exactly 32. Normalization is per-position channel
//! norm, which is deterministic in both train and eval mode.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::GrayImage;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, ChannelNorm, Conv2d, Conv2dCache, MaxPool2d, ParamView, Params, PoolCache};
use crate::scalar::{s as sc, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Stem conv output channels.
    pub stem: usize,
    /// Channel width per residual stage; exactly four stages.
    pub stages: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// 1x1-3x3-1x1 blocks with 4x channel expansion instead of 3x3-3x3.
    pub bottleneck: bool,
    /// 7x7/2 stem conv + 3x3/2 max pool (first stage then keeps stride 1)
    /// instead of a bare 3x3/2 stem conv (every stage strides 2).
    pub stem_pool: bool,
}

impl BackboneConfig {
    /// Desk-scale default: /32 geometry at widths trainable on one core.
    pub fn toy() -> Self {
        BackboneConfig {
            stem: 16,
            stages: vec![32, 64, 128, 256],
            blocks: vec![1, 1, 1, 1],
            bottleneck: false,
            stem_pool: false,
        }
    }

    /// 50-layer bottleneck net: stages of 3/4/6/3 blocks, 2048 output
    /// channels. Full-fidelity geometry; not trainable at desk scale.
    pub fn resnet50() -> Self {
        BackboneConfig {
            stem: 64,
            stages: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            bottleneck: true,
            stem_pool: true,
        }
    }

    pub fn expansion(&self) -> usize {
        if self.bottleneck {
            4
        } else {
            1
        }
    }

    /// Output channel count C_b.
    pub fn c_out(&self) -> usize {
        self.stages.last().copied().unwrap_or(0) * self.expansion()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem == 0 {
            return Err(Error::config("stem width must be positive"));
        }
        if self.stages.len() != 4 {
            return Err(Error::config(format!(
                "the /32 geometry needs exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.blocks.len() != self.stages.len() {
            return Err(Error::config("blocks and stages must have equal length"));
        }
        if self.stages.iter().any(|&c| c == 0) || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::config("stage widths and block counts must be positive"));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::toy()
    }
}

/// Scales with min(target/h, target/w), bilinear, then pads right/bottom
/// with background and inverts so ink is 1 and paper is 0, duplicated to
/// three identical channels. Targets must be multiples of 32.
pub fn preprocess<S: Scalar>(
    img: &GrayImage,
    target_h: usize,
    target_w: usize,
) -> Result<Array3<S>> {
    if img.width == 0 || img.height == 0 || img.pixels.is_empty() {
        return Err(Error::data("cannot preprocess an empty image"));
    }
    if target_h == 0 || target_h % 32 != 0 || target_w == 0 || target_w % 32 != 0 {
        return Err(Error::config(format!(
            "target size {target_h}x{target_w} must be positive multiples of 32"
        )));
    }
    let scale = (target_h as f64 / img.height as f64).min(target_w as f64 / img.width as f64);
    let new_h = ((img.height as f64 * scale).floor() as usize).clamp(1, target_h);
    let new_w = ((img.width as f64 * scale).floor() as usize).clamp(1, target_w);

    let resized: Vec<u8> = if new_h == img.height && new_w == img.width {
        img.pixels.clone()
    } else {
        let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .ok_or_else(|| Error::data("pixel buffer does not match image dimensions"))?;
        image::imageops::resize(
            &buf,
            new_w as u32,
            new_h as u32,
            image::imageops::FilterType::Triangle,
        )
        .into_raw()
    };

    let mut out = Array3::zeros((3, target_h, target_w));
    for y in 0..new_h {
        for x in 0..new_w {
            let v = sc::<S>((255 - resized[y * new_w + x]) as f64 / 255.0);
            out[[0, y, x]] = v;
            out[[1, y, x]] = v;
            out[[2, y, x]] = v;
        }
    }
    Ok(out)
}

/// Conv followed by channel norm; the building element of every block.
#[derive(Debug, Clone)]
struct ConvNorm<S: Scalar> {
    conv: Conv2d<S>,
    norm: ChannelNorm<S>,
}

struct ConvNormCache<S: Scalar> {
    conv: Conv2dCache<S>,
    conv_out: Array3<S>,
}

impl<S: Scalar> ConvNorm<S> {
    fn new(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let pad = k / 2;
        ConvNorm { conv: Conv2d::new(c_in, c_out, k, stride, pad, rng), norm: ChannelNorm::new(c_out) }
    }

    fn forward(&self, x: &Array3<S>) -> (Array3<S>, ConvNormCache<S>) {
        let (conv_out, conv) = self.conv.forward(x);
        let y = self.norm.forward(&conv_out);
        (y, ConvNormCache { conv, conv_out })
    }

    fn backward(&mut self, cache: &ConvNormCache<S>, dy: &Array3<S>) -> Array3<S> {
        let dconv = self.norm.backward(&cache.conv_out, dy);
        self.conv.backward(&cache.conv, &dconv)
    }
}

impl<S: Scalar> Params<S> for ConvNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.conv.visit(&format!("{prefix}/conv"), f);
        self.norm.visit(&format!("{prefix}/norm"), f);
    }
}

/// Residual block; basic (3x3-3x3) or bottleneck (1x1-3x3-1x1, 4x out).
/// A 1x1 projection joins the skip path whenever shape changes.
#[derive(Debug, Clone)]
struct ResidualBlock<S: Scalar> {
    path: Vec<ConvNorm<S>>,
    skip: Option<ConvNorm<S>>,
}

struct BlockCache<S: Scalar> {
    path: Vec<ConvNormCache<S>>,
    /// Pre-relu activations between path elements.
    pres: Vec<Array3<S>>,
    skip: Option<ConvNormCache<S>>,
    sum: Array3<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    fn new(
        c_in: usize,
        width: usize,
        stride: usize,
        bottleneck: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c_out = if bottleneck { width * 4 } else { width };
        let path = if bottleneck {
            vec![
                ConvNorm::new(c_in, width, 1, 1, rng),
                ConvNorm::new(width, width, 3, stride, rng),
                ConvNorm::new(width, c_out, 1, 1, rng),
            ]
        } else {
            vec![
                ConvNorm::new(c_in, width, 3, stride, rng),
                ConvNorm::new(width, c_out, 3, 1, rng),
            ]
        };
        let skip = if stride != 1 || c_in != c_out {
            Some(ConvNorm::new(c_in, c_out, 1, stride, rng))
        } else {
            None
        };
        ResidualBlock { path, skip }
    }

    fn forward(&self, x: &Array3<S>) -> (Array3<S>, BlockCache<S>) {
        let mut caches = Vec::with_capacity(self.path.len());
        let mut pres = Vec::new();
        let mut h = x.clone();
        let last = self.path.len() - 1;
        for (i, cn) in self.path.iter().enumerate() {
            let (y, c) = cn.forward(&h);
            caches.push(c);
            if i < last {
                pres.push(y.clone());
                h = relu(&y);
            } else {
                h = y;
            }
        }
        let (s, skip_cache) = match &self.skip {
            Some(proj) => {
                let (s, c) = proj.forward(x);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let sum = h + s;
        let y = relu(&sum);
        (y, BlockCache { path: caches, pres, skip: skip_cache, sum })
    }

    fn backward(&mut self, cache: &BlockCache<S>, dy: &Array3<S>) -> Array3<S> {
        let dsum = relu_backward(&cache.sum, dy);
        let mut dh = dsum.clone();
        for (i, cn) in self.path.iter_mut().enumerate().rev() {
            dh = cn.backward(&cache.path[i], &dh);
            if i > 0 {
                dh = relu_backward(&cache.pres[i - 1], &dh);
            }
        }
        let dskip = match (&mut self.skip, &cache.skip) {
            (Some(proj), Some(c)) => proj.backward(c, &dsum),
            _ => dsum,
        };
        dh + dskip
    }
}

impl<S: Scalar> Params<S> for ResidualBlock<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        for (i, cn) in self.path.iter_mut().enumerate() {
            cn.visit(&format!("{prefix}/p{i}"), f);
        }
        if let Some(proj) = &mut self.skip {
            proj.visit(&format!("{prefix}/skip"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    cfg: BackboneConfig,
    stem: ConvNorm<S>,
    pool: Option<MaxPool2d>,
    stages: Vec<Vec<ResidualBlock<S>>>,
}

pub struct BackboneCache<S: Scalar> {
    stem: ConvNormCache<S>,
    stem_pre: Array3<S>,
    pool: Option<PoolCache>,
    blocks: Vec<Vec<BlockCache<S>>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (stem, pool) = if cfg.stem_pool {
            (
                ConvNorm::new(3, cfg.stem, 7, 2, rng),
                Some(MaxPool2d { k: 3, stride: 2, pad: 1 }),
            )
        } else {
            (ConvNorm::new(3, cfg.stem, 3, 2, rng), None)
        };
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut c_in = cfg.stem;
        for (si, (&width, &n_blocks)) in cfg.stages.iter().zip(&cfg.blocks).enumerate() {
            // With the pooled stem the first stage keeps stride 1, matching
            // the /4 already done; otherwise every stage halves.
            let stage_stride = if cfg.stem_pool && si == 0 { 1 } else { 2 };
            let mut stage = Vec::with_capacity(n_blocks);
            for bi in 0..n_blocks {
                let stride = if bi == 0 { stage_stride } else { 1 };
                stage.push(ResidualBlock::new(c_in, width, stride, cfg.bottleneck, rng));
                c_in = width * cfg.expansion();
            }
            stages.push(stage);
        }
        Ok(Backbone { cfg, stem, pool, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn c_out(&self) -> usize {
        self.cfg.c_out()
    }

    /// (3, H, W) with H, W multiples of 32 -> (C_b, H/32, W/32).
    pub fn forward(&self, x: &Array3<S>) -> Result<(Array3<S>, BackboneCache<S>)> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::shape(format!("backbone expects 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must have positive dimensions divisible by 32"
            )));
        }
        let (stem_pre, stem_cache) = self.stem.forward(x);
        let mut cur = relu(&stem_pre);
        let pool_cache = self.pool.as_ref().map(|p| {
            let (y, c) = p.forward(&cur);
            cur = y;
            c
        });
        let mut blocks = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(&cur);
                stage_caches.push(c);
                cur = y;
            }
            blocks.push(stage_caches);
        }
        debug_assert_eq!(cur.dim(), (self.c_out(), h / 32, w / 32));
        Ok((cur, BackboneCache { stem: stem_cache, stem_pre, pool: pool_cache, blocks }))
    }

    pub fn backward(&mut self, cache: &BackboneCache<S>, dy: &Array3<S>) -> Array3<S> {
        let mut d = dy.clone();
        for (stage, caches) in self.stages.iter_mut().zip(&cache.blocks).rev() {
            for (block, bc) in stage.iter_mut().zip(caches).rev() {
                d = block.backward(bc, &d);
            }
        }
        if let (Some(pool), Some(pc)) = (&self.pool, &cache.pool) {
            d = pool.backward(pc, &d);
        }
        let d = relu_backward(&cache.stem_pre, &d);
        self.stem.backward(&cache.stem, &d)
    }
}

impl<S: Scalar> Params<S> for Backbone<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.stem.visit(&format!("{prefix}/stem"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit(&format!("{prefix}/s{si}/b{bi}"), f);
            }
        }
    }
}

/// 1x1 conv mapping C_b backbone channels to the transformer hidden size;
/// spatial dims pass through unchanged.
#[derive(Debug, Clone)]
pub struct Compress<S: Scalar> {
    pub conv: Conv2d<S>,
}

impl<S: Scalar> Compress<S> {
    pub fn new(c_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Compress { conv: Conv2d::new(c_in, hidden, 1, 1, 0, rng) }
    }

    pub fn forward(&self, x: &Array3<S>) -> (Array3<S>, Conv2dCache<S>) {
        self.conv.forward(x)
    }

    pub fn backward(&mut self, cache: &Conv2dCache<S>, dy: &Array3<S>) -> Array3<S> {
        self.conv.backward(cache, dy)
    }
}

impl<S: Scalar> Params<S> for Compress<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.conv.visit(&format!("{prefix}/conv"), f);
    }
}
