//! Convolutional encoder `E` and decoder `G`.
//!
//! Residual conv stacks with group normalization and swish, a self-attention
//! block in the middle of each network at the lowest resolution, and mirrored
//! resolution schedules. The downsampling factor is `2^num_downsample_levels`.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::conv::Conv2d;
use crate::layers::{conv, GroupNorm};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Swish,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    GroupNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// One multiplier per resolution level; there are `num_downsample_levels + 1` levels.
    pub channel_multipliers: Vec<usize>,
    pub num_downsample_levels: usize,
    pub num_res_blocks: usize,
    /// Size `n_z` of the latent (and codebook embedding) space.
    pub latent_dim: usize,
    /// Extra attention blocks at these encoder resolutions, counted in
    /// downsampling levels (0 = full resolution). The mid-block attention is
    /// always present.
    #[serde(default)]
    pub attention_levels: Vec<usize>,
    pub norm_groups: usize,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            num_downsample_levels: 4,
            num_res_blocks: 2,
            latent_dim: 256,
            attention_levels: vec![],
            norm_groups: 32,
            nonlinearity: Nonlinearity::Swish,
            normalization: Normalization::GroupNorm,
        }
    }
}

impl CodecConfig {
    pub fn downsampling_factor(&self) -> usize {
        1 << self.num_downsample_levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_downsample_levels == 0 {
            return bad("num_downsample_levels must be at least 1".into());
        }
        if self.num_downsample_levels > 10 {
            return bad(format!(
                "num_downsample_levels = {} gives an unreasonable factor",
                self.num_downsample_levels
            ));
        }
        if self.channel_multipliers.len() != self.num_downsample_levels + 1 {
            return bad(format!(
                "channel_multipliers needs {} entries (one per level), got {}",
                self.num_downsample_levels + 1,
                self.channel_multipliers.len()
            ));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.latent_dim == 0 {
            return bad("input_channels, base_width and latent_dim must be positive".into());
        }
        if self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for &m in &self.channel_multipliers {
            if (self.base_width * m) % self.norm_groups != 0 {
                return bad(format!(
                    "norm_groups {} does not divide channel width {}",
                    self.norm_groups,
                    self.base_width * m
                ));
            }
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l > self.num_downsample_levels) {
            return bad(format!("attention level {l} exceeds the number of levels"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_multipliers[level]
    }
}

fn norm(channels: usize, cfg: &CodecConfig, vb: VarBuilder) -> Result<GroupNorm> {
    match cfg.normalization {
        Normalization::GroupNorm => GroupNorm::new(cfg.norm_groups, channels, 1e-6, vb),
    }
}

fn norm_act(norm: &GroupNorm, x: &Tensor, cfg: &CodecConfig) -> candle_core::Result<Tensor> {
    match cfg.nonlinearity {
        Nonlinearity::Swish => norm.forward_swish(x),
        Nonlinearity::Relu => norm.forward(x)?.relu(),
    }
}

#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    cfg: CodecConfig,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: norm(in_c, cfg, vb.pp("norm1"))?,
            conv1: conv(in_c, out_c, 3, 1, 1, vb.pp("conv1"))?,
            norm2: norm(out_c, cfg, vb.pp("norm2"))?,
            conv2: conv(out_c, out_c, 3, 1, 1, vb.pp("conv2"))?,
            shortcut: if in_c != out_c {
                Some(conv(in_c, out_c, 1, 1, 0, vb.pp("nin_shortcut"))?)
            } else {
                None
            },
            cfg: cfg.clone(),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = norm_act(&self.norm1, x, &self.cfg)?.apply(&self.conv1)?;
        let h = norm_act(&self.norm2, &h, &self.cfg)?.apply(&self.conv2)?;
        let skip = match &self.shortcut {
            Some(c) => x.apply(c)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new(c: usize, cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: norm(c, cfg, vb.pp("norm"))?,
            q: conv(c, c, 1, 1, 0, vb.pp("q"))?,
            k: conv(c, c, 1, 1, 0, vb.pp("k"))?,
            v: conv(c, c, 1, 1, 0, vb.pp("v"))?,
            proj: conv(c, c, 1, 1, 0, vb.pp("proj_out"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hn = self.norm.forward(x)?;
        let q = hn.apply(&self.q)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let k = hn.apply(&self.k)?.reshape((b, c, h * w))?.contiguous()?;
        let v = hn.apply(&self.v)?.reshape((b, c, h * w))?.contiguous()?;
        let attn = (q.matmul(&k)? * (c as f64).powf(-0.5))?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        // out[b, c, i] = sum_j v[b, c, j] attn[b, i, j]
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + out.apply(&self.proj)?)?)
    }
}

#[derive(Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    resample: Option<Conv2d>,
}

#[derive(Debug)]
struct MidBlock {
    block1: ResBlock,
    attn: AttnBlock,
    block2: ResBlock,
}

impl MidBlock {
    fn new(c: usize, cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            block1: ResBlock::new(c, c, cfg, vb.pp("block_1"))?,
            attn: AttnBlock::new(c, cfg, vb.pp("attn_1"))?,
            block2: ResBlock::new(c, c, cfg, vb.pp("block_2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.block1.forward(x)?;
        let h = self.attn.forward(&h)?;
        self.block2.forward(&h)
    }
}

#[derive(Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<Level>,
    mid: MidBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant_conv: Conv2d,
    cfg: CodecConfig,
}

impl Encoder {
    fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let conv_in = conv(cfg.input_channels, cfg.base_width, 3, 1, 1, vb.pp("conv_in"))?;
        let mut levels = Vec::new();
        let mut block_in = cfg.base_width;
        for level in 0..=cfg.num_downsample_levels {
            let vbl = vb.pp(format!("down.{level}"));
            let block_out = cfg.width(level);
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for j in 0..cfg.num_res_blocks {
                blocks.push(ResBlock::new(block_in, block_out, cfg, vbl.pp(format!("block.{j}")))?);
                block_in = block_out;
                if cfg.attention_levels.contains(&level) {
                    attn.push(AttnBlock::new(block_in, cfg, vbl.pp(format!("attn.{j}")))?);
                }
            }
            let resample = if level < cfg.num_downsample_levels {
                Some(conv(block_in, block_in, 3, 2, 0, vbl.pp("downsample.conv"))?)
            } else {
                None
            };
            levels.push(Level {
                blocks,
                attn,
                resample,
            });
        }
        Ok(Self {
            conv_in,
            levels,
            mid: MidBlock::new(block_in, cfg, vb.pp("mid"))?,
            norm_out: norm(block_in, cfg, vb.pp("norm_out"))?,
            conv_out: conv(block_in, cfg.latent_dim, 3, 1, 1, vb.pp("conv_out"))?,
            quant_conv: conv(cfg.latent_dim, cfg.latent_dim, 1, 1, 0, vb.pp("quant_conv"))?,
            cfg: cfg.clone(),
        })
    }

    /// Maps (batch, C, H, W) images to a (batch, n_z, H/f, W/f) latent grid.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::Shape(format!("expected a rank-4 image batch, got {:?}", images.dims())))?;
        let f = self.cfg.downsampling_factor();
        if c != self.cfg.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} is not divisible by the downsampling factor {f}"
            )));
        }
        let mut x = images.apply(&self.conv_in)?;
        for level in &self.levels {
            for (j, block) in level.blocks.iter().enumerate() {
                x = block.forward(&x)?;
                if let Some(a) = level.attn.get(j) {
                    x = a.forward(&x)?;
                }
            }
            if let Some(down) = &level.resample {
                // asymmetric (0, 1) padding followed by a stride-2 conv halves the size exactly
                x = x.pad_with_zeros(2, 0, 1)?.pad_with_zeros(3, 0, 1)?.apply(down)?;
            }
        }
        let x = self.mid.forward(&x)?;
        let x = norm_act(&self.norm_out, &x, &self.cfg)?.apply(&self.conv_out)?;
        Ok(x.apply(&self.quant_conv)?)
    }
}

#[derive(Debug)]
pub struct Decoder {
    post_quant_conv: Conv2d,
    conv_in: Conv2d,
    mid: MidBlock,
    /// Ordered from the lowest resolution up.
    levels: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    cfg: CodecConfig,
}

impl Decoder {
    fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let top = cfg.num_downsample_levels;
        let mut block_in = cfg.width(top);
        let post_quant_conv = conv(cfg.latent_dim, cfg.latent_dim, 1, 1, 0, vb.pp("post_quant_conv"))?;
        let conv_in = conv(cfg.latent_dim, block_in, 3, 1, 1, vb.pp("conv_in"))?;
        let mid = MidBlock::new(block_in, cfg, vb.pp("mid"))?;
        let mut levels = Vec::new();
        for level in (0..=top).rev() {
            let vbl = vb.pp(format!("up.{level}"));
            let block_out = cfg.width(level);
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for j in 0..=cfg.num_res_blocks {
                blocks.push(ResBlock::new(block_in, block_out, cfg, vbl.pp(format!("block.{j}")))?);
                block_in = block_out;
                if cfg.attention_levels.contains(&level) {
                    attn.push(AttnBlock::new(block_in, cfg, vbl.pp(format!("attn.{j}")))?);
                }
            }
            let resample = if level > 0 {
                Some(conv(block_in, block_in, 3, 1, 1, vbl.pp("upsample.conv"))?)
            } else {
                None
            };
            levels.push(Level {
                blocks,
                attn,
                resample,
            });
        }
        Ok(Self {
            post_quant_conv,
            conv_in,
            mid,
            levels,
            norm_out: norm(block_in, cfg, vb.pp("norm_out"))?,
            conv_out: conv(block_in, cfg.input_channels, 3, 1, 1, vb.pp("conv_out"))?,
            cfg: cfg.clone(),
        })
    }

    /// Maps a (batch, n_z, h, w) grid to (batch, C, h*f, w*f) images in (-1, 1).
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        self.head(&self.features(latents)?)
    }

    /// Activations entering the output conv.
    pub fn features(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents
            .dims4()
            .map_err(|_| Error::Shape(format!("expected a rank-4 latent grid, got {:?}", latents.dims())))?;
        if c != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latent grid has {c} channels, decoder expects n_z = {}",
                self.cfg.latent_dim
            )));
        }
        let x = latents.apply(&self.post_quant_conv)?.apply(&self.conv_in)?;
        let mut x = self.mid.forward(&x)?;
        for level in &self.levels {
            for (j, block) in level.blocks.iter().enumerate() {
                x = block.forward(&x)?;
                if let Some(a) = level.attn.get(j) {
                    x = a.forward(&x)?;
                }
            }
            if let Some(up) = &level.resample {
                let (_, _, h, w) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * w)?.apply(up)?;
            }
        }
        Ok(norm_act(&self.norm_out, &x, &self.cfg)?)
    }

    /// Output conv and tanh applied to [`Decoder::features`].
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        Ok(features.apply(&self.conv_out)?.tanh()?)
    }

    /// Weight of the final conv layer; the adaptive adversarial weight is
    /// measured on gradients with respect to this tensor.
    pub fn last_layer_weight(&self) -> &Tensor {
        self.conv_out.weight()
    }
}

/// Encoder/decoder pair together with its configuration.
#[derive(Debug)]
pub struct Codec {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub config: CodecConfig,
}

impl Codec {
    pub fn downsampling_factor(&self) -> usize {
        self.config.downsampling_factor()
    }
}

/// Builds encoder and decoder under the `encoder.` / `decoder.` prefixes of `vb`.
pub fn build_codec(config: &CodecConfig, vb: VarBuilder) -> Result<Codec> {
    config.validate()?;
    Ok(Codec {
        encoder: Encoder::new(config, vb.pp("encoder"))?,
        decoder: Decoder::new(config, vb.pp("decoder"))?,
        config: config.clone(),
    })
}

/// Parameter count of a codec with this configuration, computed by building
/// it into a scratch store.
pub fn count_codec_parameters(config: &CodecConfig) -> Result<usize> {
    let store = ParamStore::new(0);
    build_codec(config, store.var_builder(DType::F32, &Device::Cpu))?;
    Ok(store.num_parameters())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            base_width: 8,
            channel_multipliers: vec![1, 2],
            num_downsample_levels: 1,
            num_res_blocks: 1,
            latent_dim: 4,
            norm_groups: 4,
            ..CodecConfig::default()
        }
    }

    fn build(cfg: &CodecConfig) -> Codec {
        let store = ParamStore::new(5);
        build_codec(cfg, store.var_builder(DType::F32, &Device::Cpu)).unwrap()
    }

    #[test]
    fn factor_follows_levels() {
        assert_eq!(CodecConfig::default().downsampling_factor(), 16);
        assert_eq!(tiny().downsampling_factor(), 2);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = tiny();
        c.num_downsample_levels = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.base_width = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.channel_multipliers = vec![1, 2, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.norm_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_round_trip() {
        let cfg = tiny();
        let codec = build(&cfg);
        for (h, w) in [(2, 2), (4, 6), (16, 16)] {
            let x = Tensor::zeros((2, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            let z = codec.encoder.encode(&x).unwrap();
            assert_eq!(z.dims(), &[2, 4, h / 2, w / 2]);
            let y = codec.decoder.decode(&z).unwrap();
            assert_eq!(y.dims(), x.dims());
        }
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let codec = build(&tiny());
        let x = Tensor::zeros((1, 3, 5, 4), DType::F32, &Device::Cpu).unwrap();
        let err = codec.encoder.encode(&x).unwrap_err();
        assert!(err.to_string().contains("divisible by the downsampling factor 2"), "{err}");
    }

    #[test]
    fn decoder_rejects_channel_mismatch() {
        let codec = build(&tiny());
        let z = Tensor::zeros((1, 5, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(codec.decoder.decode(&z), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_output_is_bounded_and_deterministic() {
        let codec = build(&tiny());
        let z = (Tensor::randn(0f32, 50., (1, 4, 3, 3), &Device::Cpu).unwrap()).contiguous().unwrap();
        let a = codec.decoder.decode(&z).unwrap();
        let b = codec.decoder.decode(&z).unwrap();
        let max = a.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(max <= 1.0);
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let store = ParamStore::new(1);
        let codec = build_codec(&tiny(), store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let x = Tensor::randn(0f64, 0.5, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = codec.decoder.decode(&codec.encoder.encode(&x).unwrap()).unwrap();
        let loss = (y - &x).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.trainable_vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no grad for {name}"));
            let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(s.is_finite(), "{name}");
        }
    }

    #[test]
    fn attention_levels_add_parameters() {
        let mut cfg = tiny();
        let base = count_codec_parameters(&cfg).unwrap();
        cfg.attention_levels = vec![1];
        assert!(count_codec_parameters(&cfg).unwrap() > base);
    }
}
