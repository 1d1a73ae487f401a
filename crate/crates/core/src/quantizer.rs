//! Learnable codebook, nearest-neighbour quantization with a straight-through
//! gradient, and the vector-quantization loss terms.

use candle_core::{DType, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Commitment weight used unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Codebook {
    embeddings: Tensor,
    beta: f64,
}

/// Integer indices of shape (batch, h, w) addressing codebook rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major (batch, h, w).
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(batch: usize, height: usize, width: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "{} indices do not fill a {batch}x{height}x{width} grid",
                indices.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Tokens of one batch item.
    pub fn item(&self, b: usize) -> TokenGrid {
        let n = self.height * self.width;
        TokenGrid {
            batch: 1,
            height: self.height,
            width: self.width,
            indices: self.indices[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn histogram(&self, codebook_size: usize) -> Vec<usize> {
        let mut h = vec![0; codebook_size];
        for &i in &self.indices {
            if let Some(c) = h.get_mut(i as usize) {
                *c += 1;
            }
        }
        h
    }
}

/// Summary of how a batch of tokens spreads over the codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub used_entries: usize,
    pub perplexity: f64,
}

impl CodebookUsage {
    pub fn from_histogram(hist: &[usize]) -> Self {
        let total: usize = hist.iter().sum();
        let entropy: f64 = hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        Self {
            used_entries: hist.iter().filter(|&&c| c > 0).count(),
            perplexity: entropy.exp(),
        }
    }
}

/// Codebook and commitment terms. Both are scalar tensors that carry gradients.
#[derive(Debug, Clone)]
pub struct VqLossTerms {
    /// ‖sg(z) − z_q‖² (mean); moves codebook entries.
    pub codebook_term: Tensor,
    /// β·‖z − sg(z_q)‖² (mean); pulls encoder outputs towards their codes.
    pub commitment_term: Tensor,
    pub beta: f64,
}

impl VqLossTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.codebook_term + &self.commitment_term)?)
    }
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub tokens: TokenGrid,
    /// Straight-through output: forward values equal the selected embeddings,
    /// gradients pass to `z` unchanged.
    pub quantized: Tensor,
    pub loss: VqLossTerms,
}

impl Codebook {
    /// Creates `size` embeddings of dimension `dim`, initialized uniformly in [−1/K, 1/K].
    pub fn new(size: usize, dim: usize, beta: f64, vb: VarBuilder) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook size and dimension must be positive".into()));
        }
        let bound = 1.0 / size as f64;
        let embeddings = vb.get_with_hints(
            (size, dim),
            "embeddings",
            Init::Uniform {
                lo: -bound,
                up: bound,
            },
        )?;
        Ok(Self { embeddings, beta })
    }

    pub fn from_embeddings(embeddings: Tensor, beta: f64) -> Result<Self> {
        let (k, d) = embeddings.dims2()?;
        if k == 0 || d == 0 {
            return Err(Error::Config("codebook size and dimension must be positive".into()));
        }
        Ok(Self { embeddings, beta })
    }

    pub fn size(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    fn check_latents(&self, z: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = z
            .dims4()
            .map_err(|_| Error::Shape(format!("expected a rank-4 latent grid, got {:?}", z.dims())))?;
        if c != self.dim() {
            return Err(Error::Shape(format!(
                "latent channel dim {c} does not match codebook dim {}",
                self.dim()
            )));
        }
        Ok((b, h, w))
    }

    /// Nearest codebook index for each spatial vector of `z`, row-major (b, h, w).
    ///
    /// Distances come from the expanded form ‖z‖² − 2 z·e + ‖e‖². Entries within
    /// rounding distance of the minimum are re-scored exactly in f64 as
    /// Σ(z − e)², and exact ties go to the lowest index.
    pub fn nearest_indices(&self, z: &Tensor) -> Result<TokenGrid> {
        let (b, h, w) = self.check_latents(z)?;
        let n_z = self.dim();
        let k = self.size();
        let flat = z.detach().permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, n_z))?;
        let emb = self.embeddings.detach();

        let z_sq = flat.sqr()?.sum_keepdim(1)?;
        let e_sq = emb.sqr()?.sum_keepdim(1)?.t()?;
        let dist = z_sq
            .broadcast_add(&e_sq)?
            .sub(&(flat.matmul(&emb.t()?)? * 2.0)?)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;

        let zs = flat.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let es = emb.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let e_norm_max = es.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let unit = match z.dtype() {
            DType::F64 => f64::EPSILON,
            _ => f32::EPSILON as f64,
        };

        let mut indices = Vec::with_capacity(dist.len());
        for (row, zv) in dist.iter().zip(&zs) {
            let z_norm: f64 = zv.iter().map(|v| v * v).sum();
            let tol = 64.0 * unit * (z_norm + e_norm_max + 1.0) * (n_z as f64).sqrt();
            let approx_min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            if !approx_min.is_finite() {
                return Err(Error::Numeric("non-finite distance in quantization".into()));
            }
            let mut best = (f64::INFINITY, 0usize);
            for (j, &d) in row.iter().enumerate().take(k) {
                if d <= approx_min + tol {
                    let exact: f64 = zv.iter().zip(&es[j]).map(|(a, e)| (a - e) * (a - e)).sum();
                    if exact < best.0 {
                        best = (exact, j);
                    }
                }
            }
            indices.push(best.1 as u32);
        }
        TokenGrid::new(b, h, w, indices)
    }

    /// Gathers embedding rows into a (batch, n_z, h, w) grid. Keeps the
    /// codebook in the graph, so gradients reach the selected rows.
    pub fn lookup(&self, tokens: &TokenGrid) -> Result<Tensor> {
        let k = self.size();
        if let Some(&bad) = tokens.indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::Index { index: bad, size: k });
        }
        let ids = Tensor::from_slice(&tokens.indices, tokens.len(), self.embeddings.device())?;
        let rows = self.embeddings.index_select(&ids, 0)?;
        Ok(rows
            .reshape((tokens.batch, tokens.height, tokens.width, self.dim()))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let tokens = self.nearest_indices(z)?;
        let zq = self.lookup(&tokens)?;
        let loss = vq_loss(z, &zq, self.beta)?;
        // zq + (z − sg(z)): forward value is exactly zq, gradient w.r.t. z is the identity
        let quantized = (zq.detach() + (z - z.detach())?)?;
        Ok(Quantized {
            tokens,
            quantized,
            loss,
        })
    }
}

/// codebook_term = mse(sg(z), z_q), commitment_term = β · mse(z, sg(z_q)).
pub fn vq_loss(z: &Tensor, quantized: &Tensor, beta: f64) -> Result<VqLossTerms> {
    if z.dims() != quantized.dims() {
        return Err(Error::Shape(format!(
            "vq loss operands differ in shape: {:?} vs {:?}",
            z.dims(),
            quantized.dims()
        )));
    }
    let codebook_term = (z.detach() - quantized)?.sqr()?.mean_all()?;
    let commitment_term = ((z - quantized.detach())?.sqr()?.mean_all()? * beta)?;
    Ok(VqLossTerms {
        codebook_term,
        commitment_term,
        beta,
    })
}
