//! Differentiable tensor kernels missing from (or slow in) the stock CPU
//! backend: im2col convolution, depthwise convolution, stride-1 average
//! pooling, bilinear resizing and deformable convolution.
//!
//! All kernels accept `f32` and `f64` tensors; the latter is used for
//! finite-difference gradient checks.

use candle_core::{
    bail, CpuStorage, CustomOp1, DType, Layout, Result, Shape, Tensor, WithDType, D,
};

use super::flops::{self, LayerKind};

macro_rules! float_map {
    ($storage:expr, $layout:expr, $f:ident ( $($arg:expr),* )) => {{
        let (o1, o2) = match $layout.contiguous_offsets() {
            Some(o) => o,
            None => bail!("{}: input must be contiguous", stringify!($f)),
        };
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(&v[o1..o2], $($arg),*)),
            CpuStorage::F64(v) => CpuStorage::F64($f(&v[o1..o2], $($arg),*)),
            _ => bail!("{}: only f32 and f64 tensors are supported", stringify!($f)),
        }
    }};
}

/// Geometry of a square-kernel sliding window over an `h × w` plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    /// Column layout `(C·k·k, N, L)` instead of `(N, C·k·k, L)`.
    batch_inner: bool,
}

impl Window {
    fn row(&self, n: usize, c: usize, j: usize) -> usize {
        let (l, kk) = (self.out_h() * self.out_w(), self.k * self.k);
        if self.batch_inner {
            ((c * kk + j) * self.n + n) * l
        } else {
            ((n * self.c + c) * kk + j) * l
        }
    }

    fn cols_shape(&self) -> Shape {
        let (l, ck) = (self.out_h() * self.out_w(), self.c * self.k * self.k);
        if self.batch_inner {
            Shape::from((ck, self.n * l))
        } else {
            Shape::from((self.n, ck, l))
        }
    }

    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn check(&self) -> Result<()> {
        if self.k == 0 || self.stride == 0 {
            bail!("window kernel and stride must be positive")
        }
        if self.h + 2 * self.pad < self.k || self.w + 2 * self.pad < self.k {
            bail!(
                "kernel {} larger than padded input {}x{}",
                self.k,
                self.h + 2 * self.pad,
                self.w + 2 * self.pad
            )
        }
        Ok(())
    }
}

fn im2col_kernel<T: WithDType>(src: &[T], g: Window) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dst = vec![T::zero(); g.n * g.c * g.k * g.k * oh * ow];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &src[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = g.row(n, c, ky * g.k + kx);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[row + oy * ow..][..ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_kernel<T: WithDType>(src: &[T], g: Window) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dst = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &mut dst[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = g.row(n, c, ky * g.k + kx);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[row + oy * ow..][..ow];
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

struct Im2Col(Window);
struct Col2Im(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.dims() != [g.n, g.c, g.h, g.w] {
            bail!("im2col: expected {:?}, got {:?}", [g.n, g.c, g.h, g.w], l.dims())
        }
        let out = float_map!(s, l, im2col_kernel(g));
        Ok((out, g.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let expect = g.cols_shape();
        if l.dims() != expect.dims() {
            bail!("col2im: expected {expect:?}, got {:?}", l.dims())
        }
        let out = float_map!(s, l, col2im_kernel(g));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Unfolds `(N, C, H, W)` into `(N, C·k·k, Ho·Wo)` patch columns.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    unfold(x, k, stride, pad, false)
}

/// Like [`im2col`] but laid out as one `(C·k·k, N·Ho·Wo)` matrix.
pub fn im2col_flat(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    unfold(x, k, stride, pad, true)
}

fn unfold(x: &Tensor, k: usize, stride: usize, pad: usize, batch_inner: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let g = Window {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        batch_inner,
    };
    g.check()?;
    x.contiguous()?.apply_op1(Im2Col(g))
}

/// `weight (Cout, K) × cols (K, N·L)` plus bias, returned as `(N, Cout, oh, ow)`.
fn project_cols(
    weight: &Tensor,
    cols: &Tensor,
    bias: Option<&Tensor>,
    n: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor> {
    let c_out = weight.dim(0)?;
    let wm = weight.reshape((c_out, cols.dim(0)?))?;
    let mut y = wm.matmul(cols)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((c_out, 1))?)?;
    }
    y.reshape((c_out, n, oh * ow))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((n, c_out, oh, ow))
}

/// `(N, C, L)` to `(C, N·L)`.
fn batch_to_columns(x: &Tensor) -> Result<Tensor> {
    let (n, c, l) = x.dims3()?;
    if n == 1 {
        return x.reshape((c, l));
    }
    x.transpose(0, 1)?.contiguous()?.reshape((c, n * l))
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if h + 2 * pad < k {
        bail!("kernel {k} larger than padded extent {}", h + 2 * pad)
    }
    Ok((h + 2 * pad - k) / stride + 1)
}

/// Dense 2-D convolution. `weight` is `(Cout, Cin, k, k)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        bail!(
            "conv2d: input has {c} channels, weight is {:?}",
            weight.dims()
        )
    }
    let (oh, ow) = (conv_out(h, k, stride, pad)?, conv_out(w, k, stride, pad)?);
    let cols = if k == 1 && stride == 1 && pad == 0 {
        batch_to_columns(&x.reshape((n, c, h * w))?)?
    } else {
        im2col_flat(x, k, stride, pad)?
    };
    let y = project_cols(weight, &cols, bias, n, oh, ow)?;
    flops::record(
        LayerKind::Conv,
        x.dims(),
        &[n, c_out, oh, ow],
        (n * c_out * oh * ow * c * k * k) as u64,
        bias.map_or(0, |_| (n * c_out * oh * ow) as u64),
    );
    Ok(y)
}

/// Depthwise convolution with channel multiplier `m`: `weight` is
/// `(C·m, 1, k, k)` and output channel `c·m + j` reads input channel `c`.
pub fn depthwise_conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cm, one, k, k2) = weight.dims4()?;
    if one != 1 || k != k2 || cm % c != 0 {
        bail!(
            "depthwise_conv2d: input has {c} channels, weight is {:?}",
            weight.dims()
        )
    }
    let m = cm / c;
    let (oh, ow) = (conv_out(h, k, stride, pad)?, conv_out(w, k, stride, pad)?);
    let kk = k * k;
    let cols = im2col(x, k, stride, pad)?.reshape((n, c, 1, kk, oh * ow))?;
    let wk = weight.reshape((1, c, m, kk, 1))?;
    let mut y = cols.broadcast_mul(&wk)?.sum(3)?.reshape((n, cm, oh, ow))?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((1, cm, 1, 1))?)?;
    }
    flops::record(
        LayerKind::DepthwiseConv,
        x.dims(),
        &[n, cm, oh, ow],
        (n * cm * oh * ow * kk) as u64,
        bias.map_or(0, |_| (n * cm * oh * ow) as u64),
    );
    Ok(y)
}

/// Grouped 1×1 convolution where each output channel mixes `group` adjacent
/// input channels. `weight` is `(C / group, group, 1, 1)`.
pub fn grouped_pointwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, group, _, _) = weight.dims4()?;
    if c_out * group != c {
        bail!(
            "grouped_pointwise: input has {c} channels, weight is {:?}",
            weight.dims()
        )
    }
    let xg = x.reshape((n, c_out, group, h * w))?;
    let wg = weight.reshape((1, c_out, group, 1))?;
    let mut y = xg.broadcast_mul(&wg)?.sum(2)?.reshape((n, c_out, h, w))?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?;
    }
    flops::record(
        LayerKind::GroupedConv,
        x.dims(),
        &[n, c_out, h, w],
        (n * c_out * h * w * group) as u64,
        bias.map_or(0, |_| (n * c_out * h * w) as u64),
    );
    Ok(y)
}

fn avg_pool_counts(h: usize, w: usize, k: usize) -> Vec<usize> {
    let r = (k / 2) as isize;
    let mut counts = vec![0; h * w];
    for y in 0..h as isize {
        let ny = ((y + r).min(h as isize - 1) - (y - r).max(0) + 1) as usize;
        for x in 0..w as isize {
            let nx = ((x + r).min(w as isize - 1) - (x - r).max(0) + 1) as usize;
            counts[y as usize * w + x as usize] = ny * nx;
        }
    }
    counts
}

/// `transpose = false` computes the pooled mean; `true` applies the adjoint map
/// (scatter of `grad / count` back onto the window).
fn avg_pool_kernel<T: WithDType>(src: &[T], g: Window, transpose: bool) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let r = (g.k / 2) as isize;
    let counts = avg_pool_counts(h, w, g.k);
    let mut dst = vec![T::zero(); src.len()];
    for p in 0..g.n * g.c {
        let s = &src[p * h * w..][..h * w];
        let d = &mut dst[p * h * w..][..h * w];
        for y in 0..h as isize {
            let (y0, y1) = ((y - r).max(0) as usize, (y + r).min(h as isize - 1) as usize);
            for x in 0..w as isize {
                let (x0, x1) = ((x - r).max(0) as usize, (x + r).min(w as isize - 1) as usize);
                let centre = y as usize * w + x as usize;
                let inv = T::one() / T::from_f64(counts[centre] as f64);
                if transpose {
                    let gv = s[centre] * inv;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            d[yy * w + xx] += gv;
                        }
                    }
                } else {
                    // accumulate deviations from the centre so that constant
                    // windows reproduce the centre value exactly
                    let c = s[centre];
                    let mut acc = T::zero();
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            acc += s[yy * w + xx] - c;
                        }
                    }
                    d[centre] = c + acc * inv;
                }
            }
        }
    }
    dst
}

struct AvgPool {
    g: Window,
    transpose: bool,
}

impl CustomOp1 for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool_same"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.g;
        let transpose = self.transpose;
        let out = float_map!(s, l, avg_pool_kernel(g, transpose));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let op = AvgPool {
            g: self.g,
            transpose: !self.transpose,
        };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

/// Stride-1 average pooling with an odd `k × k` window and `k / 2` padding,
/// averaging only over in-bounds pixels (so constant maps are preserved,
/// borders included).
pub fn avg_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        bail!("avg_pool_same needs an odd window, got {k}")
    }
    let (n, c, h, w) = x.dims4()?;
    let g = Window {
        n,
        c,
        h,
        w,
        k,
        stride: 1,
        pad: k / 2,
        batch_inner: false,
    };
    flops::record(LayerKind::AvgPool, x.dims(), x.dims(), 0, (n * c * h * w * k * k) as u64);
    x.contiguous()?.apply_op1(AvgPool {
        g,
        transpose: false,
    })
}

/// Row-stochastic `(out, in)` interpolation matrix matching half-pixel
/// (align-corners = false) bilinear resampling.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of `(N, C, H, W)` to `(N, C, oh, ow)`, expressed as two
/// matrix products so that gradients come for free.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_matrix(oh, h), (oh, h), dev)?.to_dtype(x.dtype())?;
    let awt = Tensor::from_vec(bilinear_matrix(ow, w), (ow, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let aht = ah.t()?.contiguous()?;
    // Rows first, then columns, each as a single 2-D product.
    let y = x.contiguous()?.reshape((n * c * h, w))?.matmul(&awt)?;
    let y = y.reshape((n * c, h, ow))?.transpose(1, 2)?.contiguous()?;
    let y = y.reshape((n * c * ow, h))?.matmul(&aht)?;
    let y = y.reshape((n, c, ow, oh))?.transpose(2, 3)?.contiguous()?;
    flops::record(LayerKind::Resize, x.dims(), &[n, c, oh, ow], (n * c * oh * ow * 4) as u64, 0);
    Ok(y)
}

/// Deformable convolution (stride 1) with per-location kernel offsets.
///
/// `offset` is `(N, 2·k·k, Ho, Wo)`; channel `2j` holds the vertical and
/// `2j + 1` the horizontal displacement of kernel tap `j = ky·k + kx`.
/// Samples are read with bilinear interpolation; corners outside the input
/// contribute zero.
pub fn deform_conv2d(
    x: &Tensor,
    offset: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != c || k != k2 {
        bail!(
            "deform_conv2d: input has {c} channels, weight is {:?}",
            weight.dims()
        )
    }
    let (oh, ow) = (conv_out(h, k, 1, pad)?, conv_out(w, k, 1, pad)?);
    let kk = k * k;
    let l = oh * ow;
    if offset.dims() != [n, 2 * kk, oh, ow] {
        bail!(
            "deform_conv2d: offsets must be {:?}, got {:?}",
            [n, 2 * kk, oh, ow],
            offset.dims()
        )
    }
    let dev = x.device();
    let dtype = x.dtype();

    let mut base_y = Vec::with_capacity(kk * l);
    let mut base_x = Vec::with_capacity(kk * l);
    for j in 0..kk {
        let (ky, kx) = (j / k, j % k);
        for oy in 0..oh {
            for ox in 0..ow {
                base_y.push(oy as f64 + ky as f64 - pad as f64);
                base_x.push(ox as f64 + kx as f64 - pad as f64);
            }
        }
    }
    let base_y = Tensor::from_vec(base_y, (1, kk, oh, ow), dev)?.to_dtype(dtype)?;
    let base_x = Tensor::from_vec(base_x, (1, kk, oh, ow), dev)?.to_dtype(dtype)?;

    let off = offset.reshape((n, kk, 2, oh, ow))?;
    let py = off.narrow(2, 0, 1)?.squeeze(2)?.broadcast_add(&base_y)?;
    let px = off.narrow(2, 1, 1)?.squeeze(2)?.broadcast_add(&base_x)?;
    let y0 = py.floor()?.detach();
    let x0 = px.floor()?.detach();
    let ly = (&py - &y0)?;
    let lx = (&px - &x0)?;
    let hy = ly.affine(-1.0, 1.0)?;
    let hx = lx.affine(-1.0, 1.0)?;

    let y0v: Vec<f64> = y0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let x0v: Vec<f64> = x0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let xf = x.contiguous()?.reshape((n, c, h * w))?;
    let mut acc: Option<Tensor> = None;
    for (dy, dx) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        let mut idx = Vec::with_capacity(y0v.len());
        let mut valid = Vec::with_capacity(y0v.len());
        for (&yy, &xx) in y0v.iter().zip(&x0v) {
            let (yy, xx) = (yy + dy as f64, xx + dx as f64);
            let inside = yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64;
            idx.push(if inside { (yy as usize * w + xx as usize) as u32 } else { 0 });
            valid.push(if inside { 1.0f64 } else { 0.0 });
        }
        let idx = Tensor::from_vec(idx, (n, 1, kk * l), dev)?
            .broadcast_as((n, c, kk * l))?
            .contiguous()?;
        let valid = Tensor::from_vec(valid, (n, kk, oh, ow), dev)?.to_dtype(dtype)?;
        let wy = if dy == 0 { &hy } else { &ly };
        let wx = if dx == 0 { &hx } else { &lx };
        let wgt = (wy * wx)?.mul(&valid)?.reshape((n, 1, kk * l))?;
        let sampled = xf.gather(&idx, 2)?.broadcast_mul(&wgt)?;
        acc = Some(match acc {
            None => sampled,
            Some(a) => (a + sampled)?,
        });
    }
    let cols = batch_to_columns(&acc.expect("four corners").reshape((n, c * kk, l))?)?;
    let y = project_cols(weight, &cols, bias, n, oh, ow)?;
    flops::record(
        LayerKind::DeformConv,
        x.dims(),
        &[n, c_out, oh, ow],
        (n * c_out * l * c * kk + 4 * n * c * kk * l) as u64,
        bias.map_or(0, |_| (n * c_out * l) as u64),
    );
    Ok(y)
}

struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe_sqrt"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(v: &[T]) -> Vec<T> {
            v.iter()
                .map(|x| T::from_f64(x.to_f64().max(0.0).sqrt()))
                .collect()
        }
        Ok((float_map!(s, l, f()), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        // d sqrt(x) = 1 / (2 sqrt(x)), taken as 0 where sqrt(x) = 0
        let twice = res.affine(2.0, 0.0)?;
        let positive = twice.gt(0.0)?;
        let denom = positive.where_cond(&twice, &twice.ones_like()?)?;
        let g = grad.div(&denom)?;
        Ok(Some(positive.where_cond(&g, &g.zeros_like()?)?))
    }
}

/// Square root whose gradient is defined as 0 at the origin rather than ∞.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SafeSqrt)
}

/// Global average pooling `(N, C, H, W) → (N, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    flops::record(LayerKind::AvgPool, x.dims(), &[n, c, 1, 1], 0, (n * c * h * w) as u64);
    x.flatten_from(2)?.mean_keepdim(D::Minus1)?.unsqueeze(3)
}
