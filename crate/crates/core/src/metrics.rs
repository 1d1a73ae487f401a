//! Reconstruction metrics: OCR-SIM, LPIPS and FID, plus the evaluation pass
//! that writes a report.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{save_image, tensor_to_images, Loader};
use crate::layers::resize_bilinear;
use crate::model::Tokenizer;
use crate::perceptual::{sha256_hex, FeatureExtractor, Lpips, OcrPerceptualLoss};
use crate::{Error, Result};

fn check_pairs(originals: &Tensor, reconstructions: &Tensor) -> Result<()> {
    let (a, b) = (originals.dims(), reconstructions.dims());
    if a.first() != b.first() {
        return Err(Error::Pairing {
            originals: a.first().copied().unwrap_or(0),
            reconstructions: b.first().copied().unwrap_or(0),
        });
    }
    if a != b {
        return Err(Error::Shape(format!("paired images differ in shape: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// OCR perceptual loss of every pair.
pub fn ocr_sim_per_pair(ocr: &OcrPerceptualLoss, originals: &Tensor, reconstructions: &Tensor) -> Result<Vec<f64>> {
    check_pairs(originals, reconstructions)?;
    let v = ocr.per_item(reconstructions, originals)?;
    Ok(v.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Mean OCR perceptual loss over pairs; lower is better.
pub fn ocr_sim(ocr: &OcrPerceptualLoss, originals: &Tensor, reconstructions: &Tensor) -> Result<f64> {
    Ok(mean(&ocr_sim_per_pair(ocr, originals, reconstructions)?))
}

pub fn lpips_per_pair(lpips: &Lpips, originals: &Tensor, reconstructions: &Tensor) -> Result<Vec<f64>> {
    check_pairs(originals, reconstructions)?;
    let v = lpips.per_item(reconstructions, originals)?;
    Ok(v.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

pub fn lpips_metric(lpips: &Lpips, originals: &Tensor, reconstructions: &Tensor) -> Result<f64> {
    Ok(mean(&lpips_per_pair(lpips, originals, reconstructions)?))
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!("covariance is {:?}, mean has {d} entries", cov.shape())));
        }
        if n < 2 {
            return Err(Error::Data(format!("feature moments need at least 2 samples, got {n}")));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-9 * cov.abs().max().max(1.0) {
            return Err(Error::Numeric(format!("covariance is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(Self { mean, cov, n })
    }

    /// Mean and unbiased covariance of the rows of `features` (n, d).
    pub fn from_features(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::Data(format!("feature moments need at least 2 samples, got {n}")));
        }
        let mean = features.row_mean().transpose();
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        // exact symmetry regardless of summation order
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const EIG_TOLERANCE: f64 = 1e-6;

// Symmetric PSD square root; eigenvalues down to −tol·max(1, λmax) clip to zero.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max.is_finite() && min.is_finite()) {
        return Err(Error::Numeric(format!("{what} has non-finite eigenvalues")));
    }
    if min < -EIG_TOLERANCE * max.abs().max(1.0) {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalues in [{min:e}, {max:e}], condition {:e}",
            max.abs() / min.abs().max(f64::MIN_POSITIVE)
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½).
///
/// tr((Σ₁Σ₂)^½) is computed as tr((Σ₁^½ Σ₂ Σ₁^½)^½), whose argument is symmetric.
pub fn fid(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.n < 2 || b.n < 2 {
        return Err(Error::Data("feature moments need at least 2 samples".into()));
    }
    let diff = &a.mean - &b.mean;
    let s1 = psd_sqrt(&a.cov, "first covariance")?;
    let inner = &s1 * &b.cov * &s1;
    let cross = psd_sqrt(&inner, "covariance product")?;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if !d.is_finite() {
        return Err(Error::Numeric(format!("FID evaluated to {d}")));
    }
    Ok(d)
}

/// Globally average-pooled last feature map after resizing to `input_size`.
pub fn fid_features(backbone: &dyn FeatureExtractor, images: &Tensor, input_size: usize) -> Result<DMatrix<f64>> {
    let (_, _, h, w) = images.dims4()?;
    let x = if (h, w) == (input_size, input_size) {
        images.clone()
    } else {
        resize_bilinear(images, input_size, input_size)?
    };
    let last = backbone
        .extract(&x)?
        .pop()
        .ok_or_else(|| Error::Shape("backbone produced no features".into()))?;
    let pooled = last.mean(3)?.mean(2)?.to_dtype(candle_core::DType::F64)?;
    let (n, d) = pooled.dims2()?;
    Ok(DMatrix::from_row_slice(n, d, &pooled.flatten_all()?.to_vec1::<f64>()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Side length fed to the FID backbone.
    pub fid_input_size: usize,
    /// Number of original/reconstruction pairs drawn into `grid.png`; 0 disables.
    pub grid_pairs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fid_input_size: 224,
            grid_pairs: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub dataset_id: String,
    pub n_samples: usize,
    pub lpips: f64,
    pub ocr_sim: f64,
    pub fid: f64,
    pub lpips_per_pair: Vec<f64>,
    pub ocr_sim_per_pair: Vec<f64>,
}

impl MetricReport {
    pub fn to_markdown(&self) -> String {
        format!(
            "| model | dataset | n | LPIPS | OCR-SIM | FID |\n|---|---|---:|---:|---:|---:|\n| {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
            short(&self.model_id),
            short(&self.dataset_id),
            self.n_samples,
            self.lpips,
            self.ocr_sim,
            self.fid
        )
    }

    /// Writes `metrics.json` and `metrics.md` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        let p = dir.join("metrics.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("metrics.md");
        std::fs::write(&p, self.to_markdown()).map_err(|e| Error::io(&p, e))
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

/// Dataset identity: SHA-256 over the manifest's entry list.
pub fn dataset_id(loader: &Loader) -> String {
    let m = loader.manifest();
    let listing: Vec<String> = m.entries.iter().map(|p| p.to_string_lossy().into_owned()).collect();
    sha256_hex(format!("{}\n{}", m.split, listing.join("\n")).as_bytes())
}

/// Reconstructs every image of an eval loader and scores the pairs. FID compares
/// reconstructions against the originals of the same split.
pub fn evaluate(
    tokenizer: &Tokenizer,
    loader: &Loader,
    lpips: &Lpips,
    ocr: &OcrPerceptualLoss,
    model_id: &str,
    options: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<MetricReport> {
    let mut lp = Vec::new();
    let mut oc = Vec::new();
    let mut real = Vec::new();
    let mut fake = Vec::new();
    let mut grid: Vec<(RgbImage, RgbImage)> = Vec::new();
    for batch in loader.batches(0) {
        let x = batch?;
        let xr = tokenizer.reconstruct(&x)?;
        lp.extend(lpips_per_pair(lpips, &x, &xr)?);
        oc.extend(ocr_sim_per_pair(ocr, &x, &xr)?);
        real.push(fid_features(lpips.backbone().as_ref(), &x, options.fid_input_size)?);
        fake.push(fid_features(lpips.backbone().as_ref(), &xr, options.fid_input_size)?);
        if grid.len() < options.grid_pairs {
            let take = options.grid_pairs - grid.len();
            grid.extend(tensor_to_images(&x)?.into_iter().zip(tensor_to_images(&xr)?).take(take));
        }
    }
    let n = lp.len();
    if n == 0 {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let stack = |parts: &[DMatrix<f64>]| {
        let d = parts[0].ncols();
        let rows: usize = parts.iter().map(|m| m.nrows()).sum();
        let mut all = DMatrix::zeros(rows, d);
        let mut r = 0;
        for m in parts {
            all.rows_mut(r, m.nrows()).copy_from(m);
            r += m.nrows();
        }
        all
    };
    let fid_value = fid(
        &FeatureMoments::from_features(&stack(&real))?,
        &FeatureMoments::from_features(&stack(&fake))?,
    )?;
    let report = MetricReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id(loader),
        n_samples: n,
        lpips: mean(&lp),
        ocr_sim: mean(&oc),
        fid: fid_value,
        lpips_per_pair: lp,
        ocr_sim_per_pair: oc,
    };
    if let Some(dir) = out_dir {
        report.save(dir)?;
        if !grid.is_empty() {
            save_image(&side_by_side(&grid), &dir.join("grid.png"))?;
        }
    }
    Ok(report)
}

/// One row per pair: original on the left, reconstruction on the right.
pub fn side_by_side(pairs: &[(RgbImage, RgbImage)]) -> RgbImage {
    let (w, h) = pairs[0].0.dimensions();
    let gap = 2;
    let mut out = RgbImage::from_pixel(2 * w + gap, pairs.len() as u32 * (h + gap), image::Rgb([128, 128, 128]));
    for (i, (a, b)) in pairs.iter().enumerate() {
        let y = i as u32 * (h + gap);
        image::imageops::replace(&mut out, a, 0, y as i64);
        image::imageops::replace(&mut out, b, (w + gap) as i64, y as i64);
    }
    out
}

pub fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("eval")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::{BackboneKind, ConvTapBackbone};
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    #[test]
    fn scalar_gaussians() {
        let a = FeatureMoments::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0), 10).unwrap();
        let b = FeatureMoments::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 4.0), 10).unwrap();
        assert!((fid(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(fid(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        // diag covariances: Σ (√a − √b)² over the diagonal
        let a = FeatureMoments::new(DVector::zeros(3), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0])), 5).unwrap();
        let b = FeatureMoments::new(DVector::zeros(3), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0, 1.0])), 5).unwrap();
        assert!((fid(&a, &b).unwrap() - (1.0 + 0.0 + 4.0)).abs() < 1e-10);
    }

    #[test]
    fn moment_errors() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(FeatureMoments::from_features(&one), Err(Error::Data(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(FeatureMoments::new(DVector::zeros(2), asym, 4).is_err());
        let neg = FeatureMoments::new(DVector::zeros(1), DMatrix::from_element(1, 1, -1.0), 4).unwrap();
        let pos = FeatureMoments::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0), 4).unwrap();
        assert!(matches!(fid(&neg, &pos), Err(Error::Numeric(_))));
        let other = FeatureMoments::new(DVector::zeros(2), DMatrix::identity(2, 2), 4).unwrap();
        assert!(matches!(fid(&pos, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn unbiased_covariance() {
        let f = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 6.0]);
        let m = FeatureMoments::from_features(&f).unwrap();
        assert!((m.mean[0] - 3.0).abs() < 1e-12);
        // ((−2)² + (−1)² + 3²) / 2
        assert!((m.cov[(0, 0)] - 7.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fid_self_zero_and_symmetric(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut sample = |shift: f64| {
                DMatrix::from_fn(64, d, |_, _| rng.gen_range(-1.0..1.0) + shift)
            };
            let a = FeatureMoments::from_features(&sample(0.0)).unwrap();
            let b = FeatureMoments::from_features(&sample(0.3)).unwrap();
            prop_assert!(fid(&a, &a).unwrap().abs() < 1e-3);
            let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!(ab > -1e-9);
        }
    }

    fn losses() -> (Lpips, OcrPerceptualLoss) {
        let v = Arc::new(ConvTapBackbone::random(3, [4, 5], BackboneKind::VggClassifier, DType::F32).unwrap());
        let o = Arc::new(ConvTapBackbone::random(4, [4, 5], BackboneKind::OcrDetector, DType::F32).unwrap());
        (Lpips::with_unit_weights(v).unwrap(), OcrPerceptualLoss::new(o))
    }

    #[test]
    fn pair_metrics() {
        let (lp, oc) = losses();
        let x = Tensor::randn(0f32, 0.5, (5, 3, 8, 8), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f32, 0.5, (5, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(ocr_sim(&oc, &x, &x).unwrap(), 0.0);
        assert_eq!(lpips_metric(&lp, &x, &x).unwrap(), 0.0);
        let per = lpips_per_pair(&lp, &x, &y).unwrap();
        let mut sum = 0.0;
        for v in &per {
            sum += v;
        }
        assert!((lpips_metric(&lp, &x, &y).unwrap() - sum / 5.0).abs() < 1e-12);
        let short = x.narrow(0, 0, 3).unwrap();
        assert!(matches!(ocr_sim(&oc, &short, &y), Err(Error::Pairing { originals: 3, reconstructions: 5 })));
        assert!(matches!(lpips_metric(&lp, &x, &short), Err(Error::Pairing { .. })));
    }

    #[test]
    fn markdown_table() {
        let r = MetricReport {
            model_id: "abcdef0123456789".into(),
            dataset_id: "ds".into(),
            n_samples: 3,
            lpips: 0.07,
            ocr_sim: 0.42,
            fid: 1.69,
            lpips_per_pair: vec![],
            ocr_sim_per_pair: vec![],
        };
        let md = r.to_markdown();
        assert!(md.contains("| abcdef012345 | ds | 3 | 0.0700 | 0.4200 | 1.6900 |"));
    }
}
