//! Patch discriminator, hinge losses and the adaptive adversarial weight.

use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::conv::{Conv2d, Conv2dConfig};
use crate::layers::{leaky_relu, BatchNorm2d};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Number of stride-2 convolutions.
    pub num_layers: usize,
    pub base_width: usize,
    pub input_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            base_width: 64,
            input_channels: 3,
        }
    }
}

const CONV_INIT: Init = Init::Randn {
    mean: 0.0,
    stdev: 0.02,
};

fn disc_conv(in_c: usize, out_c: usize, stride: usize, bias: bool, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    let w = vb.get_with_hints((out_c, in_c, 4, 4), "weight", CONV_INIT)?;
    let b = if bias {
        Some(vb.get_with_hints(out_c, "bias", Init::Const(0.0))?)
    } else {
        None
    };
    Ok(Conv2d::new(w, b, cfg))
}

#[derive(Debug)]
struct Layer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
    activate: bool,
}

/// Convolutional classifier emitting a (batch, 1, h_d, w_d) map of real/fake logits.
///
/// Batch normalization always uses the statistics of the batch being scored.
#[derive(Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Layer>,
    config: DiscriminatorConfig,
}

impl PatchDiscriminator {
    pub fn new(config: &DiscriminatorConfig, vb: VarBuilder) -> Result<Self> {
        if config.num_layers == 0 || config.base_width == 0 {
            return Err(Error::Config("discriminator needs at least one layer and a positive width".into()));
        }
        let vb = vb.pp("main");
        let ndf = config.base_width;
        let bn_init = Init::Randn {
            mean: 1.0,
            stdev: 0.02,
        };
        let mut layers = Vec::new();
        let mut idx = 0;
        layers.push(Layer {
            conv: disc_conv(config.input_channels, ndf, 2, true, vb.pp(idx.to_string()))?,
            norm: None,
            activate: true,
        });
        idx += 2;
        let mut mult = 1;
        for n in 1..=config.num_layers {
            let prev = mult;
            mult = (1 << n).min(8);
            let stride = if n < config.num_layers { 2 } else { 1 };
            layers.push(Layer {
                conv: disc_conv(ndf * prev, ndf * mult, stride, false, vb.pp(idx.to_string()))?,
                norm: Some(BatchNorm2d::with_weight_init(ndf * mult, true, bn_init, vb.pp((idx + 1).to_string()))?),
                activate: true,
            });
            idx += 3;
        }
        layers.push(Layer {
            conv: disc_conv(ndf * mult, 1, 1, true, vb.pp(idx.to_string()))?,
            norm: None,
            activate: false,
        });
        Ok(Self {
            layers,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for layer in &self.layers {
            x = x.apply(&layer.conv)?;
            if let Some(n) = &layer.norm {
                x = n.forward(&x)?;
            }
            if layer.activate {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }
}

/// Logit map size for a square input of side `input`, from the conv arithmetic.
pub fn logits_side(input: usize, num_layers: usize) -> usize {
    let conv = |s: usize, stride: usize| (s + 2 - 4) / stride + 1;
    let mut s = conv(input, 2);
    for n in 1..=num_layers {
        s = conv(s, if n < num_layers { 2 } else { 1 });
    }
    conv(s, 1)
}

/// 0.5 · (mean(relu(1 − real)) + mean(relu(1 + fake))).
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    if real_logits.dims() != fake_logits.dims() {
        return Err(Error::Shape(format!(
            "real and fake logits differ in shape: {:?} vs {:?}",
            real_logits.dims(),
            fake_logits.dims()
        )));
    }
    let real = real_logits.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_logits.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// −mean(fake_logits).
pub fn hinge_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveWeightConfig {
    /// Stabilizer δ added to the adversarial gradient norm.
    pub delta: f64,
    pub clamp_max: f64,
}

impl Default for AdaptiveWeightConfig {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            clamp_max: 1e4,
        }
    }
}

/// λ = clamp(‖∇L_rec‖ / (‖∇L_gan‖ + δ), 0, clamp_max), both gradients taken at
/// the decoder's last layer. Non-finite inputs yield λ = 0.
pub fn adaptive_weight(grad_norm_rec: f64, grad_norm_gan: f64, cfg: &AdaptiveWeightConfig) -> f64 {
    if !grad_norm_rec.is_finite() || !grad_norm_gan.is_finite() {
        log::warn!("non-finite gradient norm (rec {grad_norm_rec}, gan {grad_norm_gan}); adversarial weight set to 0");
        return 0.0;
    }
    let lambda = grad_norm_rec / (grad_norm_gan + cfg.delta);
    if lambda.is_finite() {
        lambda.clamp(0.0, cfg.clamp_max)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar_f64;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn constant(v: f32, shape: (usize, usize, usize, usize)) -> Tensor {
        (Tensor::ones(shape, DType::F32, &Device::Cpu).unwrap() * v as f64).unwrap()
    }

    #[test]
    fn hinge_d_examples() {
        let s = (2, 1, 3, 3);
        assert_eq!(scalar_f64(&hinge_d_loss(&constant(2.0, s), &constant(-2.0, s)).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar_f64(&hinge_d_loss(&constant(0.0, s), &constant(0.0, s)).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar_f64(&hinge_d_loss(&constant(1.0, s), &constant(-1.0, s)).unwrap()).unwrap(), 0.0);
        assert!(hinge_d_loss(&constant(0.0, s), &constant(0.0, (1, 1, 3, 3))).is_err());
    }

    #[test]
    fn hinge_g_examples() {
        let s = (1, 1, 4, 4);
        assert_eq!(scalar_f64(&hinge_g_loss(&constant(0.5, s)).unwrap()).unwrap(), -0.5);
        assert_eq!(scalar_f64(&hinge_g_loss(&constant(0.0, s)).unwrap()).unwrap(), 0.0);
        let r = Tensor::randn(0f64, 1., (2, 1, 5, 5), &Device::Cpu).unwrap();
        let v = r.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut sum = 0.0;
        for x in &v {
            sum += x;
        }
        let oracle = -sum / v.len() as f64;
        assert!((scalar_f64(&hinge_g_loss(&r).unwrap()).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn adaptive_weight_examples() {
        let cfg = AdaptiveWeightConfig { delta: 0.0, clamp_max: 1e4 };
        assert_eq!(adaptive_weight(1.0, 0.5, &cfg), 2.0);
        assert_eq!(adaptive_weight(0.0, 0.5, &AdaptiveWeightConfig::default()), 0.0);
        assert_eq!(adaptive_weight(1.0, 0.0, &AdaptiveWeightConfig::default()), 1e4);
        assert_eq!(adaptive_weight(f64::NAN, 1.0, &AdaptiveWeightConfig::default()), 0.0);
        assert_eq!(adaptive_weight(1.0, f64::INFINITY, &AdaptiveWeightConfig::default()), 0.0);
    }

    #[test]
    fn adaptive_weight_is_scale_covariant() {
        let cfg = AdaptiveWeightConfig::default();
        let a = adaptive_weight(0.3, 0.7, &cfg);
        let b = adaptive_weight(0.6, 0.7, &cfg);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn logit_map_arithmetic() {
        assert_eq!(logits_side(384, 3), 46);
        assert_eq!(logits_side(64, 3), 6);
        let store = ParamStore::new(0);
        let d = PatchDiscriminator::new(
            &DiscriminatorConfig { num_layers: 3, base_width: 8, input_channels: 3 },
            store.var_builder(DType::F32, &Device::Cpu),
        )
        .unwrap();
        let x = Tensor::randn(0f32, 1., (2, 3, 64, 64), &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 1, 6, 6]);
        let y2 = d.forward(&x).unwrap();
        assert_eq!(scalar_f64(&(y - y2).unwrap().abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn default_width_parameter_count() {
        let store = ParamStore::new(0);
        PatchDiscriminator::new(&DiscriminatorConfig::default(), store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        // 4x4 convs 3-64-128-256-512-1, biases on first and last, BN affine in between
        let convs = 16 * (3 * 64 + 64 * 128 + 128 * 256 + 256 * 512 + 512) + 64 + 1;
        let bn = 2 * (128 + 256 + 512);
        assert_eq!(store.num_parameters(), convs + bn);
    }
}
