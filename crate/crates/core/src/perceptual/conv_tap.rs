use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;

use super::{BackboneKind, FeatureExtractor, FeatureStack};
use crate::conv::Conv2d;
use crate::layers::{conv, swish};
use crate::params::ParamStore;
use crate::Result;

/// Fixed random two-layer conv network tapped after each layer. Stands in for
/// the real backbones in gradient checks and quick experiments.
#[derive(Debug)]
pub struct ConvTapBackbone {
    conv1: Conv2d,
    conv2: Conv2d,
    widths: [usize; 2],
    kind: BackboneKind,
    checksum: String,
}

impl ConvTapBackbone {
    pub fn random(seed: u64, widths: [usize; 2], kind: BackboneKind, dtype: DType) -> Result<Self> {
        let build = |vb: VarBuilder| -> Result<(Conv2d, Conv2d)> {
            Ok((
                conv(3, widths[0], 3, 1, 1, vb.pp("conv1"))?,
                conv(widths[0], widths[1], 3, 2, 1, vb.pp("conv2"))?,
            ))
        };
        let store = ParamStore::new(seed);
        build(store.var_builder(dtype, &Device::Cpu))?;
        let (conv1, conv2) = build(VarBuilder::from_tensors(store.frozen_tensors()?, dtype, &Device::Cpu))?;
        Ok(Self {
            conv1,
            conv2,
            widths,
            kind,
            checksum: format!("random:conv_tap:seed={seed}:widths={}x{}", widths[0], widths[1]),
        })
    }
}

impl FeatureExtractor for ConvTapBackbone {
    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn extract(&self, images: &Tensor) -> Result<FeatureStack> {
        let a = swish(&images.apply(&self.conv1)?)?;
        let b = swish(&a.apply(&self.conv2)?)?;
        Ok(vec![a, b])
    }

    fn layer_channels(&self) -> Vec<usize> {
        self.widths.to_vec()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.elem_count()).sum()
    }

    fn checksum(&self) -> &str {
        &self.checksum
    }

    fn parameters(&self) -> Vec<Tensor> {
        [&self.conv1, &self.conv2]
            .iter()
            .flat_map(|c| std::iter::once(c.weight().clone()).chain(c.bias().cloned()))
            .collect()
    }
}
