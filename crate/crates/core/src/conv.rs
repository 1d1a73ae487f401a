//! 2d convolution as im2col + GEMM, with a backward pass built the same way.
//! The stock CPU backward goes through a direct transposed convolution, which is
//! several times slower than the forward pass on the channel counts used here.

use candle_core::{CpuStorage, CustomOp2, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

pub use candle_nn::Conv2dConfig;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }
    fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn n(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    fn one() -> Self;
}
impl Elem for f32 {
    fn one() -> Self {
        1.0
    }
}
impl Elem for f64 {
    fn one() -> Self {
        1.0
    }
}

// Source pixel index for output position `o` and kernel tap `t`, if inside the image.
#[inline]
fn src(o: usize, t: usize, g: &Geometry, size: usize) -> Option<usize> {
    let i = (o * g.stride + t * g.dilation) as isize - g.padding as isize;
    (i >= 0 && (i as usize) < size).then_some(i as usize)
}

/// cols (K, N) of one image (C_in, H, W).
fn im2col<T: Elem>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * n..][..n];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    match src(oy, ki, g, g.h) {
                        None => dst.fill(T::default()),
                        Some(iy) => {
                            let line = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match src(ox, kj, g, g.w) {
                                    Some(ix) => line[ix],
                                    None => T::default(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates cols (K, N) into an image (C_in, H, W).
fn col2im<T: Elem>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * n..][..n];
                for oy in 0..oh {
                    let Some(iy) = src(oy, ki, g, g.h) else { continue };
                    let line = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        if let Some(ix) = src(ox, kj, g, g.w) {
                            line[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// dst (m, n) = lhs (m, k) · rhs (k, n), optionally accumulating. Strides are
/// given as (row, col) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    lhs: &[T],
    lhs_strides: (usize, usize),
    rhs: &[T],
    rhs_strides: (usize, usize),
    accumulate: bool,
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given shapes and strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1 as isize,
            lhs_strides.0 as isize,
            rhs.as_ptr(),
            rhs_strides.1 as isize,
            rhs_strides.0 as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv operands must be contiguous"),
    }
}

fn forward<T: Elem>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut out = vec![T::default(); g.batch * g.c_out * n];
    let mut cols = vec![T::default(); k * n];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], g, &mut cols);
        gemm(g.c_out, n, k, &mut out[b * g.c_out * n..][..g.c_out * n], w, (k, 1), &cols, (n, 1), false);
    }
    out
}

fn grad_input<T: Elem>(dy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut dx = vec![T::default(); g.batch * g.c_in * g.h * g.w];
    let mut cols = vec![T::default(); k * n];
    for b in 0..g.batch {
        // Wᵀ (K, C_out) · dY (C_out, N)
        gemm(k, n, g.c_out, &mut cols, w, (1, k), &dy[b * g.c_out * n..][..g.c_out * n], (n, 1), false);
        col2im(&cols, g, &mut dx[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w]);
    }
    dx
}

fn grad_weight<T: Elem>(x: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut dw = vec![T::default(); g.c_out * k];
    let mut cols = vec![T::default(); k * n];
    for b in 0..g.batch {
        im2col(&x[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], g, &mut cols);
        // dY (C_out, N) · colsᵀ (N, K)
        gemm(g.c_out, k, n, &mut dw, &dy[b * g.c_out * n..][..g.c_out * n], (n, 1), &cols, (1, n), b > 0);
    }
    dw
}

#[derive(Debug, Clone, Copy)]
struct Params {
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Params {
    fn geometry(&self, x: &[usize], w: &[usize]) -> candle_core::Result<Geometry> {
        let (&[batch, c_in, h, wd], &[c_out, wc_in, kh, kw]) = (x, w) else {
            candle_core::bail!("conv expects rank-4 input and kernel, got {x:?} and {w:?}")
        };
        if c_in != wc_in {
            candle_core::bail!("conv input has {c_in} channels, kernel expects {wc_in}");
        }
        if h + 2 * self.padding < self.dilation * (kh - 1) + 1 || wd + 2 * self.padding < self.dilation * (kw - 1) + 1 {
            candle_core::bail!("conv kernel {kh}x{kw} does not fit the padded {h}x{wd} input");
        }
        Ok(Geometry {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        })
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr, $name:literal) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?)),
            _ => candle_core::bail!(concat!($name, " supports matching f32 or f64 operands")),
        }
    };
}

struct ConvOp(Params);

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0.geometry(l1.dims(), l2.dims())?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(x, w, &g), "conv2d");
        Ok((out, Shape::from((g.batch, g.c_out, g.out_h(), g.out_w()))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, dy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dy = dy.contiguous()?;
        let dx = dy.apply_op2_no_bwd(w, &GradInputOp(self.0, x.dims4()?))?;
        let dw = x.apply_op2_no_bwd(&dy, &GradWeightOp(self.0, w.dims4()?))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct GradInputOp(Params, (usize, usize, usize, usize));

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.1;
        let g = self.0.geometry(&[b, c, h, w], l2.dims())?;
        if l1.dims() != [b, g.c_out, g.out_h(), g.out_w()] {
            candle_core::bail!("conv output gradient has shape {:?}", l1.dims());
        }
        let out = dispatch!(s1, l1, s2, l2, |dy, wt| grad_input(dy, wt, &g), "conv2d backward");
        Ok((out, Shape::from(self.1)))
    }
}

struct GradWeightOp(Params, (usize, usize, usize, usize));

impl CustomOp2 for GradWeightOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o, i, kh, kw) = self.1;
        let g = self.0.geometry(l1.dims(), &[o, i, kh, kw])?;
        if l2.dims() != [g.batch, o, g.out_h(), g.out_w()] {
            candle_core::bail!("conv output gradient has shape {:?}", l2.dims());
        }
        let out = dispatch!(s1, l1, s2, l2, |x, dy| grad_weight(x, dy, &g), "conv2d backward");
        Ok((out, Shape::from(self.1)))
    }
}

/// Convolution of (B, C_in, H, W) with a (C_out, C_in, kh, kw) kernel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize, dilation: usize) -> Result<Tensor> {
    if stride == 0 || dilation == 0 {
        return Err(Error::Config("conv stride and dilation must be positive".into()));
    }
    let p = Params {
        stride,
        padding,
        dilation,
    };
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, ConvOp(p))?)
}

/// Convolution layer with optional bias; same parameter names and shapes as
/// `candle_nn::Conv2d`. Grouped convolution is not supported.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    config: Conv2dConfig,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, config: Conv2dConfig) -> Self {
        assert_eq!(config.groups, 1, "grouped convolution is not supported");
        Self { weight, bias, config }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = &self.config;
        let y = conv2d(x, &self.weight, c.stride, c.padding, c.dilation).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => candle_core::Error::Msg(other.to_string()),
        })?;
        match &self.bias {
            None => Ok(y),
            Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?),
        }
    }
}

/// Kaiming-normal weights and uniform ±1/√fan_in biases, as `candle_nn::conv2d`.
pub fn conv2d_layer(in_c: usize, out_c: usize, kernel: usize, config: Conv2dConfig, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((out_c, in_c, kernel, kernel), "weight", candle_nn::init::DEFAULT_KAIMING_NORMAL)?;
    let bound = 1.0 / (in_c as f64).sqrt();
    let b = vb.get_with_hints(out_c, "bias", Init::Uniform { lo: -bound, up: bound })?;
    Ok(Conv2d::new(w, Some(b), config))
}
