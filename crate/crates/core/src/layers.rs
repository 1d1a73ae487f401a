//! Small building blocks shared by the codec, discriminator and backbones.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Module, Shape, Tensor, D};
use candle_nn::{Init, VarBuilder};

use crate::conv::{conv2d_layer, Conv2d, Conv2dConfig};
use crate::Result;

pub fn conv(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    conv2d_layer(in_c, out_c, kernel, cfg, vb)
}

/// 2d batch normalization.
///
/// With `use_batch_stats` the layer normalizes with the statistics of the
/// current batch (training behaviour); otherwise the stored running
/// statistics are used.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
    use_batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize, use_batch_stats: bool, vb: VarBuilder) -> Result<Self> {
        Self::with_weight_init(channels, use_batch_stats, Init::Const(1.0), vb)
    }

    pub fn with_weight_init(
        channels: usize,
        use_batch_stats: bool,
        weight_init: Init,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", weight_init)?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            running_mean: vb.get_with_hints(channels, "running_mean", Init::Const(0.0))?,
            running_var: vb.get_with_hints(channels, "running_var", Init::Const(1.0))?,
            eps: 1e-5,
            use_batch_stats,
        })
    }
}

impl Module for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if self.use_batch_stats {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            (mean, var)
        } else {
            (
                self.running_mean.reshape(shape)?,
                self.running_var.reshape(shape)?,
            )
        };
        x.broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)
    }
}

/// Group normalization with a per-channel affine, parameter names as
/// `candle_nn::GroupNorm` (`weight` ones, `bias` zeros).
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::Config(format!("{groups} groups do not divide {channels} channels")));
        }
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            groups,
            eps,
        })
    }
}

impl GroupNorm {
    /// `silu(self.forward(x))` as one fused op.
    pub fn forward_swish(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let op = GroupNormSwish {
            groups: self.groups,
            eps: self.eps,
        };
        x.contiguous()?
            .reshape((b, c, h * w))?
            .apply_op3(&self.weight.contiguous()?, &self.bias.contiguous()?, op)?
            .reshape((b, c, h, w))
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let op = GroupNormalize { eps: self.eps };
        let shape = (1, c, 1, 1);
        x.contiguous()?
            .reshape((b, self.groups, (c / self.groups) * h * w))?
            .apply_op1(op)?
            .reshape((b, c, h, w))?
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)
    }
}

/// (x - mean) / sqrt(var + eps) over the last axis of a contiguous tensor.
#[derive(Debug, Clone, Copy)]
struct GroupNormalize {
    eps: f64,
}

trait Float: Copy + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}
impl Float for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
impl Float for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn moments<T: Float>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn normalize<T: Float>(x: &[T], group: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for g in x.chunks(group) {
        let (mean, inv) = moments(g, eps);
        out.extend(g.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    out
}

// dx = inv * (dy - mean(dy) - xhat * mean(dy * xhat)), per group.
fn normalize_grad<T: Float>(x: &[T], dy: &[T], group: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (g, d) in x.chunks(group).zip(dy.chunks(group)) {
        let (mean, inv) = moments(g, eps);
        let n = group as f64;
        let (mut sd, mut sdx) = (0.0, 0.0);
        for (v, dv) in g.iter().zip(d) {
            let xh = (v.to_f64() - mean) * inv;
            sd += dv.to_f64();
            sdx += dv.to_f64() * xh;
        }
        let (md, mdx) = (sd / n, sdx / n);
        out.extend(g.iter().zip(d).map(|(v, dv)| {
            let xh = (v.to_f64() - mean) * inv;
            T::from_f64(inv * (dv.to_f64() - md - xh * mdx))
        }));
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group norm operands must be contiguous"),
    }
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let group = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize(contiguous_slice(v, l)?, group, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize(contiguous_slice(v, l)?, group, self.eps)),
            _ => candle_core::bail!("group norm supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GroupNormalizeGrad(*self))?))
    }
}

struct GroupNormalizeGrad(GroupNormalize);

impl CustomOp2 for GroupNormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let group = *l1.dims().last().unwrap_or(&1);
        let eps = self.0.eps;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => {
                CpuStorage::F32(normalize_grad(contiguous_slice(x, l1)?, contiguous_slice(d, l2)?, group, eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(d)) => {
                CpuStorage::F64(normalize_grad(contiguous_slice(x, l1)?, contiguous_slice(d, l2)?, group, eps))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// silu(gamma * normalize(x) + beta) on (B, C, N) with C split into groups.
#[derive(Debug, Clone, Copy)]
struct GroupNormSwish {
    groups: usize,
    eps: f64,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

impl GroupNormSwish {
    fn dims(&self, l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
        let &[b, c, n] = l.dims() else {
            candle_core::bail!("group norm expects (B, C, N), got {:?}", l.dims())
        };
        if c % self.groups != 0 {
            candle_core::bail!("{} groups do not divide {c} channels", self.groups);
        }
        Ok((b, c, n))
    }

    fn forward<T: Float>(&self, x: &[T], gamma: &[T], beta: &[T], c: usize, n: usize) -> Vec<T> {
        let cg = c / self.groups;
        let mut out = Vec::with_capacity(x.len());
        for (gi, g) in x.chunks(cg * n).enumerate() {
            let (mean, inv) = moments(g, self.eps);
            for (ci, row) in g.chunks(n).enumerate() {
                let ch = (gi % self.groups) * cg + ci;
                let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                out.extend(row.iter().map(|v| {
                    let a = ga * (v.to_f64() - mean) * inv + be;
                    T::from_f64(a * sigmoid(a))
                }));
            }
        }
        out
    }

    /// Gradients packed as [dx (B*C*N), dgamma (C), dbeta (C)].
    fn backward<T: Float>(&self, x: &[T], dy: &[T], gamma: &[f64], beta: &[f64], c: usize, n: usize) -> Vec<T> {
        let cg = c / self.groups;
        let group = cg * n;
        let mut dx = Vec::with_capacity(x.len() + 2 * c);
        let (mut dgamma, mut dbeta) = (vec![0.0; c], vec![0.0; c]);
        let mut dxh = vec![0.0; group];
        for (gi, (g, d)) in x.chunks(group).zip(dy.chunks(group)).enumerate() {
            let (mean, inv) = moments(g, self.eps);
            let (mut s1, mut s2) = (0.0, 0.0);
            for ci in 0..cg {
                let ch = (gi % self.groups) * cg + ci;
                for j in ci * n..(ci + 1) * n {
                    let xh = (g[j].to_f64() - mean) * inv;
                    let a = gamma[ch] * xh + beta[ch];
                    let sg = sigmoid(a);
                    let da = d[j].to_f64() * sg * (1.0 + a * (1.0 - sg));
                    dgamma[ch] += da * xh;
                    dbeta[ch] += da;
                    dxh[j] = da * gamma[ch];
                    s1 += dxh[j];
                    s2 += dxh[j] * xh;
                }
            }
            let (m1, m2) = (s1 / group as f64, s2 / group as f64);
            dx.extend(g.iter().zip(&dxh).map(|(v, &e)| {
                let xh = (v.to_f64() - mean) * inv;
                T::from_f64(inv * (e - m1 - xh * m2))
            }));
        }
        dx.extend(dgamma.into_iter().chain(dbeta).map(T::from_f64));
        dx
    }
}

impl CustomOp3 for GroupNormSwish {
    fn name(&self) -> &'static str {
        "group-norm-swish"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, n) = self.dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                c,
                n,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
                c,
                n,
            )),
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, n) = x.dims3()?;
        let f64s = |t: &Tensor| t.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>();
        let op = GroupNormSwishGrad {
            op: *self,
            gamma: f64s(gamma)?,
            beta: f64s(beta)?,
        };
        let packed = x.apply_op2_no_bwd(&grad.contiguous()?, &op)?;
        let len = b * c * n;
        Ok((
            Some(packed.narrow(0, 0, len)?.reshape((b, c, n))?),
            Some(packed.narrow(0, len, c)?),
            Some(packed.narrow(0, len + c, c)?),
        ))
    }
}

struct GroupNormSwishGrad {
    op: GroupNormSwish,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl CustomOp2 for GroupNormSwishGrad {
    fn name(&self) -> &'static str {
        "group-norm-swish-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, n) = self.op.dims(l1)?;
        let (g, be) = (&self.gamma, &self.beta);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(d)) => {
                CpuStorage::F32(self.op.backward(contiguous_slice(x, l1)?, contiguous_slice(d, l2)?, g, be, c, n))
            }
            (CpuStorage::F64(x), CpuStorage::F64(d)) => {
                CpuStorage::F64(self.op.backward(contiguous_slice(x, l1)?, contiguous_slice(d, l2)?, g, be, c, n))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(b * c * n + 2 * c)))
    }
}

pub fn swish(x: &Tensor) -> candle_core::Result<Tensor> {
    x.silu()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(x, slope)
}

/// Row-stochastic matrix (out x in) for 1-d linear interpolation with
/// half-pixel centers (`align_corners = false`).
pub fn linear_interp_matrix(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let frac = src - i0 as f64;
        m[o * in_size + i0] += 1.0 - frac;
        m[o * in_size + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a (b, c, h, w) tensor, expressed as two
/// matrix products so gradients flow through it.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let aw = Tensor::from_vec(linear_interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dtype)?;
    let ah = Tensor::from_vec(linear_interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let y = x
        .contiguous()?
        .reshape((b * c * h, w))?
        .matmul(&aw.t()?)?
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ah.t()?)?
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?;
    Ok(y)
}

/// 3x3 max pooling with stride 1 and padding 1. Borders are padded by edge
/// replication, which leaves every window maximum unchanged.
pub fn max_pool_3x3_same(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let view = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
            out = Some(match out {
                None => view,
                Some(acc) => acc.maximum(&view)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Mean over every dimension except the leading batch dimension.
pub fn mean_per_item(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn run_fn(
        f: &dyn Fn(&Tensor) -> candle_core::Result<Tensor>,
        x: &Var,
        w: &Var,
        b: &Var,
        probe: &Tensor,
    ) -> (Tensor, Vec<Tensor>) {
        let y = f(x).unwrap();
        let g = (&y * probe).unwrap().sum_all().unwrap().backward().unwrap();
        (y, [x, w, b].iter().map(|v| g.get(v).unwrap().clone()).collect())
    }

    #[test]
    fn group_norm_matches_composite_reference() {
        let dev = Device::Cpu;
        let x = Var::randn(0.5f64, 2., (2, 6, 3, 4), &dev).unwrap();
        let w = Var::randn(1f64, 0.3, 6, &dev).unwrap();
        let b = Var::randn(0f64, 0.3, 6, &dev).unwrap();
        let ours = GroupNorm {
            weight: w.as_tensor().clone(),
            bias: b.as_tensor().clone(),
            groups: 3,
            eps: 1e-6,
        };
        let reference = candle_nn::GroupNorm::new(w.as_tensor().clone(), b.as_tensor().clone(), 6, 3, 1e-6).unwrap();
        let probe = Tensor::randn(0f64, 1., (2, 6, 3, 4), &dev).unwrap();
        let (y1, g1) = run_fn(&|x| ours.forward(x), &x, &w, &b, &probe);
        let (y2, g2) = run_fn(&|x| reference.forward(x), &x, &w, &b, &probe);
        let diff = |a: &Tensor, b: &Tensor| scalar_f64(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff(&y1, &y2) < 1e-10);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(diff(a, b) < 1e-9);
        }
        let fused = |x: &Tensor| ours.forward_swish(x);
        let composite = |x: &Tensor| reference.forward(x)?.silu();
        let (y1, g1) = run_fn(&fused, &x, &w, &b, &probe);
        let (y2, g2) = run_fn(&composite, &x, &w, &b, &probe);
        assert!(diff(&y1, &y2) < 1e-10);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(diff(a, b) < 1e-9);
        }
        assert!(GroupNorm::new(4, 6, 1e-6, candle_nn::VarBuilder::zeros(DType::F64, &dev)).is_err());
    }

    #[test]
    fn interp_matrix_rows_sum_to_one() {
        for (i, o) in [(4, 8), (8, 4), (5, 7), (64, 224), (1, 3)] {
            let m = linear_interp_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_reference() {
        // 1-d [0, 1] upsampled 2x with half-pixel centers -> [0, .25, .75, 1]
        let m = linear_interp_matrix(2, 4);
        let v: Vec<f64> = (0..4).map(|o| m[o * 2 + 1]).collect();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_is_differentiable() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1., (2, 3, 4, 6), &dev).unwrap();
        let y = resize_bilinear(&x, 8, 12).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 12]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap();
        // interpolation rows sum to one, so the gradient mass equals the output count
        let total = gx.sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((total - 2.0 * 3.0 * 8.0 * 12.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_same_matches_brute_force() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1., (1, 2, 5, 4), &dev).unwrap();
        let y = max_pool_3x3_same(&x).unwrap();
        let xv = x.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for c in 0..2 {
            for i in 0..5i64 {
                for j in 0..4i64 {
                    let mut m = f32::NEG_INFINITY;
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            let (a, b) = (i + di, j + dj);
                            if (0..5).contains(&a) && (0..4).contains(&b) {
                                m = m.max(xv[c * 20 + a as usize * 4 + b as usize]);
                            }
                        }
                    }
                    assert_eq!(yv[c * 20 + i as usize * 4 + j as usize], m);
                }
            }
        }
    }
}
