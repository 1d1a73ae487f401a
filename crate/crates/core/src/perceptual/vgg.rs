use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;

use super::{weights_error, BackboneKind, FeatureExtractor, FeatureStack, FrozenWeights};
use crate::conv::Conv2d;
use crate::layers::conv;
use crate::params::ParamStore;
use crate::{Error, Result};

/// Output widths of the five VGG16 conv blocks.
pub const VGG16_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const CONVS_PER_BLOCK: [usize; 5] = [2, 2, 3, 3, 3];

// LPIPS input scaling for [-1, 1] images.
const SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// VGG16 conv tower tapped after the last ReLU of every block
/// (relu1_2, relu2_2, relu3_3, relu4_3, relu5_3).
#[derive(Debug)]
pub struct Vgg16Backbone {
    blocks: Vec<Vec<Conv2d>>,
    widths: Vec<usize>,
    checksum: String,
    num_params: usize,
}

impl Vgg16Backbone {
    fn build(vb: VarBuilder, width_divisor: usize, checksum: String) -> Result<Self> {
        let widths: Vec<usize> = VGG16_WIDTHS.iter().map(|w| (w / width_divisor).max(1)).collect();
        let mut blocks = Vec::new();
        let mut in_c = 3;
        // torchvision `features.{idx}` numbering: conv/relu pairs plus one pool per block
        let mut idx = 0;
        let mut num_params = 0;
        for (b, &n) in CONVS_PER_BLOCK.iter().enumerate() {
            if b > 0 {
                idx += 1; // max pool
            }
            let mut convs = Vec::new();
            for _ in 0..n {
                let c = conv(in_c, widths[b], 3, 1, 1, vb.pp(format!("features.{idx}")))?;
                num_params += in_c * widths[b] * 9 + widths[b];
                convs.push(c);
                in_c = widths[b];
                idx += 2;
            }
            blocks.push(convs);
        }
        Ok(Self {
            blocks,
            widths,
            checksum,
            num_params,
        })
    }

    pub fn random(seed: u64, width_divisor: usize, dtype: DType) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        let store = ParamStore::new(seed);
        Self::build(store.var_builder(dtype, &Device::Cpu), width_divisor, String::new())?;
        let vb = VarBuilder::from_tensors(store.frozen_tensors()?, dtype, &Device::Cpu);
        let checksum = format!("random:vgg16:seed={seed}:width_divisor={width_divisor}");
        Self::build(vb, width_divisor, checksum)
    }

    pub fn from_weights(weights: &FrozenWeights, path: &Path, dtype: DType) -> Result<Self> {
        let vb = VarBuilder::from_tensors(weights.tensors.clone(), dtype, &Device::Cpu);
        Self::build(vb, 1, weights.checksum.clone()).map_err(|e| weights_error(path, &weights.checksum, e))
    }

    fn scale_input(&self, images: &Tensor) -> Result<Tensor> {
        let dev = images.device();
        let dt = images.dtype();
        let shift = Tensor::new(&SHIFT, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let scale = Tensor::new(&SCALE, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        Ok(images.broadcast_sub(&shift)?.broadcast_div(&scale)?)
    }

    /// Globally average-pooled output of the last block, (batch, C_5).
    pub fn pooled_features(&self, images: &Tensor) -> Result<Tensor> {
        let last = self.extract(images)?.pop().expect("five blocks");
        Ok(last.mean(3)?.mean(2)?)
    }
}

impl FeatureExtractor for Vgg16Backbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::VggClassifier
    }

    fn extract(&self, images: &Tensor) -> Result<FeatureStack> {
        let mut x = self.scale_input(images)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (b, convs) in self.blocks.iter().enumerate() {
            if b > 0 {
                x = x.max_pool2d(2)?;
            }
            for c in convs {
                x = c.forward(&x)?.relu()?;
            }
            taps.push(x.clone());
        }
        Ok(taps)
    }

    fn layer_channels(&self) -> Vec<usize> {
        self.widths.clone()
    }

    fn num_parameters(&self) -> usize {
        self.num_params
    }

    fn checksum(&self) -> &str {
        &self.checksum
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|c| std::iter::once(c.weight().clone()).chain(c.bias().cloned()))
            .collect()
    }
}
