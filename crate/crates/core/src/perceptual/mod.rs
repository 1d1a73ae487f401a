//! Frozen feature backbones and the two perceptual losses built on them:
//! the VGG-based learned perceptual distance (LPIPS) and the OCR perceptual
//! loss over the upsampling stages of a character-region text detector.

mod conv_tap;
mod craft;
mod vgg;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use conv_tap::ConvTapBackbone;
pub use craft::{CraftBackbone, CraftConfig};
pub use vgg::{Vgg16Backbone, VGG16_WIDTHS};

use crate::{Error, Result};

/// Per-layer feature maps, layer `l` shaped (batch, C_l, H_l, W_l).
pub type FeatureStack = Vec<Tensor>;

/// Channel-normalization guard from the reference implementation.
pub const DEFAULT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    VggClassifier,
    OcrDetector,
}

/// Where a frozen backbone's weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    /// A safetensors file. Relative paths resolve against the weights directory.
    Pretrained { file: PathBuf },
    /// Seeded random weights at `1/width_divisor` of the published channel widths.
    Random { seed: u64, width_divisor: usize },
}

/// A frozen network that maps canonical [-1, 1] images to a feature stack.
/// Implementations renormalize inputs to their own convention internally.
pub trait FeatureExtractor: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> BackboneKind;
    fn extract(&self, images: &Tensor) -> Result<FeatureStack>;
    fn layer_channels(&self) -> Vec<usize>;
    fn num_parameters(&self) -> usize;
    /// SHA-256 of the weights file, or a description of the random source.
    fn checksum(&self) -> &str;
    /// Every weight tensor, for freezing checks.
    fn parameters(&self) -> Vec<Tensor>;
}

/// Frozen weights as a flat name -> tensor map plus their provenance checksum.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub tensors: HashMap<String, Tensor>,
    pub checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a safetensors weights file. DataParallel `module.` prefixes are stripped.
pub fn load_weights_file(path: &Path, device: &Device) -> Result<FrozenWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
        sha256: "unavailable".into(),
    })?;
    let checksum = sha256_hex(&bytes);
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: format!("not a valid safetensors file: {e}"),
        sha256: checksum.clone(),
    })?;
    let tensors = tensors
        .into_iter()
        .map(|(k, v)| {
            let k = k.strip_prefix("module.").map(str::to_string).unwrap_or(k);
            Ok((k, v.to_dtype(DType::F32)?))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    Ok(FrozenWeights { tensors, checksum })
}

pub(crate) fn weights_error(path: &Path, checksum: &str, e: impl std::fmt::Display) -> Error {
    Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
        sha256: checksum.to_string(),
    }
}

/// Divides each spatial feature vector by its channel L2 norm plus `eps`.
pub fn channel_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    // the tiny offset inside the sqrt keeps its derivative finite for all-zero vectors
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-30)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + eps)?)?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "perceptual loss inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-item OCR perceptual distance from two feature stacks:
/// Σ_l mean_{h,w} Σ_c (ŷ − ŷ₀)², with ŷ channel-normalized.
pub fn ocr_distance_from_features(a: &[Tensor], b: &[Tensor], eps: f64) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "feature stacks have {} and {} layers",
            a.len(),
            b.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (fa, fb) in a.iter().zip(b) {
        check_pair(fa, fb)?;
        let diff = (channel_normalize(fa, eps)? - channel_normalize(fb, eps)?)?;
        let per_pos = diff.sqr()?.sum(1)?; // (b, h, w)
        let layer = per_pos.mean(D::Minus1)?.mean(D::Minus1)?;
        total = Some(match total {
            None => layer,
            Some(t) => (t + layer)?,
        });
    }
    Ok(total.expect("non-empty stack"))
}

/// The OCR perceptual loss with fixed per-layer weights w_l = 1.
#[derive(Debug, Clone)]
pub struct OcrPerceptualLoss {
    backbone: Arc<dyn FeatureExtractor>,
    eps: f64,
}

impl OcrPerceptualLoss {
    pub fn new(backbone: Arc<dyn FeatureExtractor>) -> Self {
        Self::with_eps(backbone, DEFAULT_EPS)
    }

    pub fn with_eps(backbone: Arc<dyn FeatureExtractor>, eps: f64) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        Self { backbone, eps }
    }

    pub fn backbone(&self) -> &Arc<dyn FeatureExtractor> {
        &self.backbone
    }

    /// Loss per batch item, shape (batch,).
    pub fn per_item(&self, x: &Tensor, x0: &Tensor) -> Result<Tensor> {
        check_pair(x, x0)?;
        let fa = self.backbone.extract(x)?;
        let fb = self.backbone.extract(x0)?;
        ocr_distance_from_features(&fa, &fb, self.eps)
    }

    /// Batch mean of [`Self::per_item`].
    pub fn forward(&self, x: &Tensor, x0: &Tensor) -> Result<Tensor> {
        Ok(self.per_item(x, x0)?.mean_all()?)
    }
}

/// Learned perceptual image patch similarity over a feature backbone.
#[derive(Debug, Clone)]
pub struct Lpips {
    backbone: Arc<dyn FeatureExtractor>,
    /// Non-negative per-channel weights for each tapped layer.
    lin: Vec<Tensor>,
    eps: f64,
}

impl Lpips {
    pub fn new(backbone: Arc<dyn FeatureExtractor>, lin: Vec<Tensor>) -> Result<Self> {
        let channels = backbone.layer_channels();
        if lin.len() != channels.len() {
            return Err(Error::Shape(format!(
                "{} linear layers for {} tapped layers",
                lin.len(),
                channels.len()
            )));
        }
        let lin = lin
            .into_iter()
            .zip(channels)
            .map(|(w, c)| {
                if w.elem_count() != c {
                    return Err(Error::Shape(format!("linear layer has {} weights for {c} channels", w.elem_count())));
                }
                Ok(w.reshape((1, c, 1, 1))?.to_dtype(DType::F32)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone,
            lin,
            eps: DEFAULT_EPS,
        })
    }

    /// Unit linear weights: plain channel sum of squared normalized differences.
    pub fn with_unit_weights(backbone: Arc<dyn FeatureExtractor>) -> Result<Self> {
        let dev = Device::Cpu;
        let lin = backbone
            .layer_channels()
            .into_iter()
            .map(|c| Ok(Tensor::ones(c, DType::F32, &dev)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(backbone, lin)
    }

    /// Backbone plus published linear weights (`lin{l}.model.1.weight`) read
    /// from the same weights map.
    pub fn from_weights(backbone: Arc<dyn FeatureExtractor>, weights: &FrozenWeights, path: &Path) -> Result<Self> {
        let lin = (0..backbone.layer_channels().len())
            .map(|l| {
                let name = format!("lin{l}.model.1.weight");
                weights
                    .tensors
                    .get(&name)
                    .cloned()
                    .ok_or_else(|| weights_error(path, &weights.checksum, format!("missing tensor `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(backbone, lin)
    }

    pub fn backbone(&self) -> &Arc<dyn FeatureExtractor> {
        &self.backbone
    }

    pub fn per_item(&self, x: &Tensor, x0: &Tensor) -> Result<Tensor> {
        check_pair(x, x0)?;
        let fa = self.backbone.extract(x)?;
        let fb = self.backbone.extract(x0)?;
        let mut total: Option<Tensor> = None;
        for ((a, b), w) in fa.iter().zip(&fb).zip(&self.lin) {
            let diff = (channel_normalize(a, self.eps)? - channel_normalize(b, self.eps)?)?.sqr()?;
            let w = w.to_dtype(diff.dtype())?;
            let weighted = diff.broadcast_mul(&w)?.sum(1)?;
            let layer = weighted.mean(D::Minus1)?.mean(D::Minus1)?;
            total = Some(match total {
                None => layer,
                Some(t) => (t + layer)?,
            });
        }
        Ok(total.expect("at least one tapped layer"))
    }

    pub fn forward(&self, x: &Tensor, x0: &Tensor) -> Result<Tensor> {
        Ok(self.per_item(x, x0)?.mean_all()?)
    }

    pub fn num_parameters(&self) -> usize {
        self.backbone.num_parameters() + self.lin.iter().map(|w| w.elem_count()).sum::<usize>()
    }
}

/// Builds the VGG backbone plus LPIPS linear weights from a source.
pub fn build_lpips(source: &BackboneSource, weights_dir: Option<&Path>, dtype: DType) -> Result<Lpips> {
    match source {
        BackboneSource::Pretrained { file } => {
            let path = resolve_weights_path(file, weights_dir);
            let weights = load_weights_file(&path, &Device::Cpu)?;
            let backbone = Arc::new(Vgg16Backbone::from_weights(&weights, &path, dtype)?);
            Lpips::from_weights(backbone, &weights, &path)
        }
        BackboneSource::Random { seed, width_divisor } => {
            let backbone = Arc::new(Vgg16Backbone::random(*seed, *width_divisor, dtype)?);
            Lpips::with_unit_weights(backbone)
        }
    }
}

pub fn build_ocr_backbone(
    source: &BackboneSource,
    weights_dir: Option<&Path>,
    dtype: DType,
) -> Result<Arc<dyn FeatureExtractor>> {
    Ok(match source {
        BackboneSource::Pretrained { file } => {
            let path = resolve_weights_path(file, weights_dir);
            let weights = load_weights_file(&path, &Device::Cpu)?;
            Arc::new(CraftBackbone::from_weights(&weights, &path, dtype)?)
        }
        BackboneSource::Random { seed, width_divisor } => {
            Arc::new(CraftBackbone::random(*seed, CraftConfig::scaled(*width_divisor)?, dtype)?)
        }
    })
}

pub fn resolve_weights_path(file: &Path, weights_dir: Option<&Path>) -> PathBuf {
    match weights_dir {
        Some(dir) if file.is_relative() => dir.join(file),
        _ => file.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar_f64;
    use candle_core::Var;

    #[test]
    fn normalize_three_four() {
        let x = Tensor::from_vec(vec![3.0f64, 4.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let y = channel_normalize(&x, DEFAULT_EPS).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((y[0] - 0.6).abs() < 1e-9 && (y[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn normalize_zero_vector_stays_zero_with_finite_grad() {
        let x = Var::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = channel_normalize(&x, DEFAULT_EPS).unwrap();
        assert_eq!(scalar_f64(&y.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let s = scalar_f64(&g.get(&x).unwrap().sum_all().unwrap()).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn normalized_vectors_have_norm_at_most_one() {
        let x = Tensor::randn(0f32, 3., (2, 5, 3, 3), &Device::Cpu).unwrap();
        let y = channel_normalize(&x, DEFAULT_EPS).unwrap();
        let n = y.sqr().unwrap().sum(1).unwrap().sqrt().unwrap();
        let max = n.max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(max <= 1.0 + 1e-6);
    }

    #[test]
    fn stack_layer_count_mismatch_is_error() {
        let a = vec![Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap()];
        assert!(ocr_distance_from_features(&a, &[], DEFAULT_EPS).is_err());
    }

    #[test]
    fn missing_weights_file_reports_path() {
        let err = load_weights_file(Path::new("/nonexistent/craft.safetensors"), &Device::Cpu).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/craft.safetensors") && msg.contains("sha256"), "{msg}");
    }

    #[test]
    fn corrupt_weights_file_reports_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        std::fs::write(&p, b"definitely not safetensors").unwrap();
        let err = load_weights_file(&p, &Device::Cpu).unwrap_err();
        let expected = sha256_hex(b"definitely not safetensors");
        assert!(err.to_string().contains(&expected));
    }
}
