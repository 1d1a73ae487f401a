//! Character-region text detector: VGG16-BN encoder with a U-shaped decoder.
//! Features are tapped after each of the four upsampling blocks.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;

use super::{weights_error, BackboneKind, FeatureExtractor, FeatureStack, FrozenWeights};
use crate::conv::{conv2d_layer, Conv2d, Conv2dConfig};
use crate::layers::{conv, max_pool_3x3_same, resize_bilinear, BatchNorm2d};
use crate::params::ParamStore;
use crate::{Error, Result};

// ImageNet statistics on [0, 1] images.
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Channel widths; the published detector is `CraftConfig::default()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CraftConfig {
    /// conv1_1 .. conv5_2 of the VGG16-BN encoder.
    pub encoder: [usize; 12],
    /// Dilated conv6 / 1x1 conv7 width.
    pub fc: usize,
    /// (mid, out) widths of the four upsampling blocks.
    pub up: [(usize, usize); 4],
}

impl Default for CraftConfig {
    fn default() -> Self {
        Self {
            encoder: [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512],
            fc: 1024,
            up: [(512, 256), (256, 128), (128, 64), (64, 32)],
        }
    }
}

impl CraftConfig {
    pub fn scaled(divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        let d = |w: usize| (w / divisor).max(1);
        let base = Self::default();
        Ok(Self {
            encoder: base.encoder.map(d),
            fc: d(base.fc),
            up: base.up.map(|(m, o)| (d(m), d(o))),
        })
    }
}

#[derive(Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(&x.apply(&self.conv)?)?)
    }
}

#[derive(Debug)]
struct UpBlock {
    reduce: ConvBn,
    expand: ConvBn,
}

impl UpBlock {
    fn new(in_c: usize, mid: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("conv");
        Ok(Self {
            reduce: ConvBn {
                conv: conv(in_c, mid, 1, 1, 0, vb.pp("0"))?,
                bn: BatchNorm2d::new(mid, false, vb.pp("1"))?,
            },
            expand: ConvBn {
                conv: conv(mid, out, 3, 1, 1, vb.pp("3"))?,
                bn: BatchNorm2d::new(out, false, vb.pp("4"))?,
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.forward(x)?.relu()?;
        Ok(self.expand.forward(&h)?.relu()?)
    }
}

// (slice, module index) of the 12 encoder convs in the reference state dict.
const ENCODER_NAMES: [(usize, usize); 12] = [
    (1, 0),
    (1, 3),
    (1, 7),
    (1, 10),
    (2, 14),
    (2, 17),
    (3, 20),
    (3, 24),
    (3, 27),
    (4, 30),
    (4, 34),
    (4, 37),
];

#[derive(Debug)]
pub struct CraftBackbone {
    encoder: Vec<ConvBn>,
    conv6: Conv2d,
    conv7: Conv2d,
    up: Vec<UpBlock>,
    config: CraftConfig,
    checksum: String,
    params: Vec<Tensor>,
}

impl CraftBackbone {
    fn build(vb: VarBuilder, config: CraftConfig, checksum: String) -> Result<Self> {
        let base = vb.pp("basenet");
        let mut encoder = Vec::new();
        let mut in_c = 3;
        for (&(slice, idx), &out) in ENCODER_NAMES.iter().zip(&config.encoder) {
            let s = base.pp(format!("slice{slice}"));
            encoder.push(ConvBn {
                conv: conv(in_c, out, 3, 1, 1, s.pp(idx.to_string()))?,
                bn: BatchNorm2d::new(out, false, s.pp((idx + 1).to_string()))?,
            });
            in_c = out;
        }
        let dilated = Conv2dConfig {
            padding: 6,
            dilation: 6,
            ..Default::default()
        };
        let conv6 = conv2d_layer(in_c, config.fc, 3, dilated, base.pp("slice5.1"))?;
        let conv7 = conv(config.fc, config.fc, 1, 1, 0, base.pp("slice5.2"))?;

        let e = &config.encoder;
        // skip widths: relu5 (e[11]), relu4 (e[8]), relu3 (e[5]), relu2 (e[3])
        let skips = [e[11], e[8], e[5], e[3]];
        let mut up = Vec::new();
        let mut prev = config.fc;
        for (i, &(mid, out)) in config.up.iter().enumerate() {
            up.push(UpBlock::new(prev + skips[i], mid, out, vb.pp(format!("upconv{}", i + 1)))?);
            prev = out;
        }

        let mut params = Vec::new();
        let mut push_conv = |c: &Conv2d| {
            params.push(c.weight().clone());
            params.extend(c.bias().cloned());
        };
        for cb in &encoder {
            push_conv(&cb.conv);
        }
        push_conv(&conv6);
        push_conv(&conv7);
        for u in &up {
            push_conv(&u.reduce.conv);
            push_conv(&u.expand.conv);
        }
        Ok(Self {
            encoder,
            conv6,
            conv7,
            up,
            config,
            checksum,
            params,
        })
    }

    pub fn random(seed: u64, config: CraftConfig, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(seed);
        Self::build(store.var_builder(dtype, &Device::Cpu), config.clone(), String::new())?;
        let vb = VarBuilder::from_tensors(store.frozen_tensors()?, dtype, &Device::Cpu);
        let divisor = CraftConfig::default().fc / config.fc.max(1);
        Self::build(vb, config, format!("random:craft:seed={seed}:width_divisor={divisor}"))
    }

    pub fn from_weights(weights: &FrozenWeights, path: &Path, dtype: DType) -> Result<Self> {
        let vb = VarBuilder::from_tensors(weights.tensors.clone(), dtype, &Device::Cpu);
        Self::build(vb, CraftConfig::default(), weights.checksum.clone())
            .map_err(|e| weights_error(path, &weights.checksum, e))
    }

    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let dev = images.device();
        let dt = images.dtype();
        let mean = Tensor::new(&MEAN, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&STD, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let unit = ((images + 1.0)? * 0.5)?;
        Ok(unit.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    pub fn config(&self) -> &CraftConfig {
        &self.config
    }
}

impl FeatureExtractor for CraftBackbone {
    fn kind(&self) -> BackboneKind {
        BackboneKind::OcrDetector
    }

    fn extract(&self, images: &Tensor) -> Result<FeatureStack> {
        let x = self.normalize(images)?;
        let e = &self.encoder;
        // Each source is a pre-activation batch-norm output, as in the reference slices.
        let mut h = e[0].forward(&x)?.relu()?;
        h = e[1].forward(&h)?.relu()?.max_pool2d(2)?;
        h = e[2].forward(&h)?.relu()?;
        let s2 = e[3].forward(&h)?;
        h = s2.relu()?.max_pool2d(2)?;
        h = e[4].forward(&h)?.relu()?;
        let s3 = e[5].forward(&h)?;
        h = e[6].forward(&s3.relu()?)?.relu()?.max_pool2d(2)?;
        h = e[7].forward(&h)?.relu()?;
        let s4 = e[8].forward(&h)?;
        h = e[9].forward(&s4.relu()?)?.relu()?.max_pool2d(2)?;
        h = e[10].forward(&h)?.relu()?;
        let s5 = e[11].forward(&h)?;
        let fc7 = max_pool_3x3_same(&s5)?.apply(&self.conv6)?.apply(&self.conv7)?;

        let skips = [s5, s4, s3, s2];
        let mut taps = Vec::with_capacity(4);
        let mut y = fc7;
        for (i, (block, skip)) in self.up.iter().zip(&skips).enumerate() {
            if i > 0 {
                let (_, _, sh, sw) = skip.dims4()?;
                y = resize_bilinear(&y, sh, sw)?;
            }
            y = block.forward(&Tensor::cat(&[&y, skip], 1)?)?;
            taps.push(y.clone());
        }
        Ok(taps)
    }

    fn layer_channels(&self) -> Vec<usize> {
        self.config.up.iter().map(|&(_, o)| o).collect()
    }

    fn num_parameters(&self) -> usize {
        // conv weights/biases plus batch-norm affine parameters
        let convs: usize = self.params.iter().map(|t| t.elem_count()).sum();
        let bn: usize = self.config.encoder.iter().sum::<usize>() * 2
            + self.config.up.iter().map(|&(m, o)| 2 * (m + o)).sum::<usize>();
        convs + bn
    }

    fn checksum(&self) -> &str {
        &self.checksum
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.params.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_taps_with_increasing_resolution() {
        let c = CraftBackbone::random(3, CraftConfig::scaled(16).unwrap(), DType::F32).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let f = c.extract(&x).unwrap();
        assert_eq!(f.len(), 4);
        let sides: Vec<usize> = f.iter().map(|t| t.dims()[2]).collect();
        assert_eq!(sides, vec![4, 8, 16, 32]);
        for (t, ch) in f.iter().zip(c.layer_channels()) {
            assert_eq!(t.dims()[0], 2);
            assert_eq!(t.dims()[1], ch);
            let s = t.sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(s.is_finite());
        }
    }

    #[test]
    fn published_widths_have_about_twenty_million_parameters() {
        // count from the configuration alone; no need to allocate the full model
        let cfg = CraftConfig::default();
        let mut n = 0;
        let mut in_c = 3;
        for &w in &cfg.encoder {
            n += in_c * w * 9 + w + 2 * w;
            in_c = w;
        }
        n += in_c * cfg.fc * 9 + cfg.fc + cfg.fc * cfg.fc + cfg.fc;
        let skips = [512, 512, 256, 128];
        let mut prev = cfg.fc;
        for (i, &(m, o)) in cfg.up.iter().enumerate() {
            n += (prev + skips[i]) * m + m + 2 * m + m * o * 9 + o + 2 * o;
            prev = o;
        }
        assert!((19_000_000..21_500_000).contains(&n), "{n}");
    }
}
