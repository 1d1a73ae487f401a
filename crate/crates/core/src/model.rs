//! The tokenizer proper: codec plus codebook, owning its parameters.

use candle_core::{DType, Device, Tensor};

use crate::codec::{build_codec, Codec, CodecConfig};
use crate::params::ParamStore;
use crate::quantizer::{Codebook, Quantized, TokenGrid};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Forward {
    pub latents: Tensor,
    pub quantized: Quantized,
    /// Decoder activations entering its output head.
    pub features: Tensor,
    pub reconstruction: Tensor,
}

#[derive(Debug)]
pub struct Tokenizer {
    pub store: ParamStore,
    pub codec: Codec,
    pub codebook: Codebook,
}

impl Tokenizer {
    /// Parameters live under `encoder.`, `decoder.` and `quantize.` in `store`.
    pub fn new(config: &CodecConfig, codebook_size: usize, beta: f64, store: ParamStore, dtype: DType) -> Result<Self> {
        let vb = store.var_builder(dtype, &Device::Cpu);
        let codec = build_codec(config, vb.clone())?;
        let codebook = Codebook::new(codebook_size, config.latent_dim, beta, vb.pp("quantize"))?;
        Ok(Self { store, codec, codebook })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Forward> {
        let latents = self.codec.encoder.encode(images)?;
        let quantized = self.codebook.quantize(&latents)?;
        let features = self.codec.decoder.features(&quantized.quantized)?;
        let reconstruction = self.codec.decoder.head(&features)?;
        Ok(Forward {
            latents,
            quantized,
            features,
            reconstruction,
        })
    }

    pub fn encode(&self, images: &Tensor) -> Result<TokenGrid> {
        self.codebook.nearest_indices(&self.codec.encoder.encode(images)?)
    }

    pub fn decode(&self, tokens: &TokenGrid) -> Result<Tensor> {
        self.codec.decoder.decode(&self.codebook.lookup(tokens)?)
    }

    /// decode(encode(x)).
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(images)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar_f64;

    #[test]
    fn forward_matches_token_path() {
        let cfg = CodecConfig {
            base_width: 8,
            channel_multipliers: vec![1, 2],
            num_downsample_levels: 1,
            num_res_blocks: 1,
            latent_dim: 4,
            norm_groups: 4,
            ..CodecConfig::default()
        };
        let t = Tokenizer::new(&cfg, 16, 0.25, ParamStore::new(5), DType::F32).unwrap();
        let x = Tensor::randn(0f32, 0.5, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let f = t.forward(&x).unwrap();
        let r = t.reconstruct(&x).unwrap();
        let diff = (f.reconstruction - r).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(scalar_f64(&diff).unwrap(), 0.0);
        assert_eq!(f.quantized.tokens, t.encode(&x).unwrap());
    }
}
