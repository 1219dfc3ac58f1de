//! Tensor kernels the stock candle ops do not cover (or cover slowly):
//! 3x3 im2col with its adjoint, row-wise softmax and layer norm, a bias add
//! whose gradient is a plain row sum, and a logit-stable weighted binary
//! cross-entropy with an exact gradient.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

/// `(B, H, W, C)` -> `(B, Ho*Wo, 9*C)`, 3x3 window, zero padding 1.
/// Columns are ordered `(ky, kx, c)`.
pub(crate) struct Im2Col {
    pub stride: usize,
}

struct Col2Im {
    stride: usize,
    height: usize,
    width: usize,
}

fn im2col<T: Copy + Default>(x: &[T], b: usize, h: usize, w: usize, c: usize, stride: usize) -> Vec<T> {
    let (oh, ow) = (out_dim(h, stride), out_dim(w, stride));
    let mut out = vec![T::default(); b * oh * ow * 9 * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * oh + oy) * ow + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(
    g: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    stride: usize,
) -> Vec<T> {
    let (oh, ow) = (out_dim(h, stride), out_dim(w, stride));
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * oh + oy) * ow + ox) * 9 * c;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = base + (ky * 3 + kx) * c;
                        for i in 0..c {
                            out[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, h, w, c) = l.shape().dims4()?;
        let shape = Shape::from((b, out_dim(h, self.stride) * out_dim(w, self.stride), 9 * c));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l)?, b, h, w, c, self.stride)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l)?, b, h, w, c, self.stride)),
            _ => candle_core::bail!("im2col: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, height, width, _) = arg.dims4()?;
        let op = Col2Im {
            stride: self.stride,
            height,
            width,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, _, k) = l.shape().dims3()?;
        let c = k / 9;
        let (h, w) = (self.height, self.width);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l)?, b, h, w, c, self.stride)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l)?, b, h, w, c, self.stride)),
            _ => candle_core::bail!("col2im: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }
}

/// `x + bias` where `bias` has the size of `x`'s last dimension.
pub(crate) struct BiasAdd;

/// Sums a contiguous tensor over every dimension but the last.
struct RowSum;

fn bias_add<T: Copy + std::ops::Add<Output = T>>(x: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(b.len()) {
        out.extend(row.iter().zip(b).map(|(&v, &c)| v + c));
    }
    out
}

fn row_sum<T: Copy + Default + std::ops::AddAssign>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for row in g.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = l2.shape().elem_count();
        if l1.shape().dims().last() != Some(&c) || l2.shape().rank() != 1 {
            candle_core::bail!("bias add: {:?} + {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(bias_add(contiguous(x, l1)?, contiguous(b, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(bias_add(contiguous(x, l1)?, contiguous(b, l2)?)),
            _ => candle_core::bail!("bias add: mixed or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op1_no_bwd(&RowSum)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

impl CustomOp1 for RowSum {
    fn name(&self) -> &'static str {
        "row-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = *l.shape().dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(g) => CpuStorage::F32(row_sum(contiguous(g, l)?, c)),
            CpuStorage::F64(g) => CpuStorage::F64(row_sum(contiguous(g, l)?, c)),
            _ => candle_core::bail!("row sum: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, Shape::from(c)))
    }
}

/// Element-wise `w*y*softplus(-z) + (1-y)*softplus(z)`, i.e. the negative
/// log-likelihood of target `y` under `sigmoid(z)` with positive-class weight
/// `w`. Arguments: logits, targets, positive weights (all the same shape).
pub(crate) struct WeightedBce;

/// Derivative of [`WeightedBce`] with respect to the logits.
struct WeightedBceGrad;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map3<T: Copy>(
    a: &[T],
    b: &[T],
    c: &[T],
    to: impl Fn(T) -> f64,
    from: impl Fn(f64) -> T,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Vec<T> {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&z, &y), &w)| from(f(to(z), to(y), to(w))))
        .collect()
}

fn apply3(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
    f: impl Fn(f64, f64, f64) -> f64,
) -> CResult<(CpuStorage, Shape)> {
    if l1.shape() != l2.shape() || l1.shape() != l3.shape() {
        candle_core::bail!("weighted bce: shape mismatch {:?} {:?} {:?}", l1.shape(), l2.shape(), l3.shape());
    }
    let out = match (s1, s2, s3) {
        (CpuStorage::F32(z), CpuStorage::F32(y), CpuStorage::F32(w)) => CpuStorage::F32(map3(
            contiguous(z, l1)?,
            contiguous(y, l2)?,
            contiguous(w, l3)?,
            f64::from,
            |v| v as f32,
            f,
        )),
        (CpuStorage::F64(z), CpuStorage::F64(y), CpuStorage::F64(w)) => CpuStorage::F64(map3(
            contiguous(z, l1)?,
            contiguous(y, l2)?,
            contiguous(w, l3)?,
            |v| v,
            |v| v,
            f,
        )),
        _ => candle_core::bail!("weighted bce: mixed or unsupported dtypes"),
    };
    Ok((out, l1.shape().clone()))
}

impl CustomOp3 for WeightedBce {
    fn name(&self) -> &'static str {
        "weighted-bce-with-logits"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        apply3(s1, l1, s2, l2, s3, l3, |z, y, w| w * y * softplus(-z) + (1.0 - y) * softplus(z))
    }

    fn bwd(
        &self,
        z: &Tensor,
        y: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dz = z
            .contiguous()?
            .apply_op3_no_bwd(&y.contiguous()?, &w.contiguous()?, &WeightedBceGrad)?;
        Ok((Some(dz.mul(grad)?), None, None))
    }
}

impl CustomOp3 for WeightedBceGrad {
    fn name(&self) -> &'static str {
        "weighted-bce-with-logits-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        apply3(s1, l1, s2, l2, s3, l3, |z, y, w| {
            let s = sigmoid64(z);
            (1.0 - y) * s - w * y * (1.0 - s)
        })
    }
}

/// Element-wise weighted BCE; see [`WeightedBce`].
pub(crate) fn weighted_bce_elementwise(logits: &Tensor, targets: &Tensor, pos_weight: &Tensor) -> CResult<Tensor> {
    logits
        .contiguous()?
        .apply_op3(&targets.contiguous()?, &pos_weight.contiguous()?, WeightedBce)
}

/// Numerically stable softmax over the last dimension (differentiable).
pub(crate) fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

struct Softmax;

/// `(y, g) -> y * (g - sum(g * y))` row-wise: the softmax adjoint.
struct SoftmaxGrad;

trait Float: Copy + Default + std::ops::AddAssign {
    fn to64(self) -> f64;
    fn from64(v: f64) -> Self;
}

impl Float for f32 {
    fn to64(self) -> f64 {
        self as f64
    }
    fn from64(v: f64) -> Self {
        v as f32
    }
}

impl Float for f64 {
    fn to64(self) -> f64 {
        self
    }
    fn from64(v: f64) -> Self {
        v
    }
}

fn softmax_rows<T: Float>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let max = row.iter().map(|v| v.to64()).fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v.to64() - max).exp();
            sum += e;
            out.push(T::from64(e));
        }
        for v in &mut out[start..] {
            *v = T::from64(v.to64() / sum);
        }
    }
    out
}

fn softmax_grad_rows<T: Float>(y: &[T], g: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to64() * b.to64()).sum();
        out.extend(yr.iter().zip(gr).map(|(a, b)| T::from64(a.to64() * (b.to64() - dot))));
    }
    out
}

fn last_dim(l: &Layout) -> usize {
    *l.shape().dims().last().unwrap_or(&1)
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = last_dim(l);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, l)?, c)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, l)?, c)),
            _ => candle_core::bail!("softmax: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, c))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, c))
            }
            _ => candle_core::bail!("softmax grad: mixed or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Layer normalization over the last dimension with affine `gamma`, `beta`.
pub(crate) struct LayerNorm {
    pub eps: f64,
}

/// Input gradient of [`LayerNorm`]: arguments `x`, `gamma`, upstream grad.
struct LayerNormGradInput {
    eps: f64,
}

/// `gamma` gradient of [`LayerNorm`]: arguments `x`, upstream grad.
struct LayerNormGradScale {
    eps: f64,
}

fn row_stats<T: Float>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_rows<T: Float>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let c = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let (mean, inv) = row_stats(row, eps);
        out.extend(
            row.iter()
                .zip(gamma.iter().zip(beta))
                .map(|(v, (g, b))| T::from64((v.to64() - mean) * inv * g.to64() + b.to64())),
        );
    }
    out
}

fn layer_norm_grad_input<T: Float>(x: &[T], gamma: &[T], grad: &[T], eps: f64) -> Vec<T> {
    let c = gamma.len();
    let n = c as f64;
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (row, g) in x.chunks_exact(c).zip(grad.chunks_exact(c)) {
        let (mean, inv) = row_stats(row, eps);
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..c {
            xhat[i] = (row[i].to64() - mean) * inv;
            dxhat[i] = g[i].to64() * gamma[i].to64();
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        let (m1, m2) = (m1 / n, m2 / n);
        out.extend((0..c).map(|i| T::from64(inv * (dxhat[i] - m1 - xhat[i] * m2))));
    }
    out
}

fn layer_norm_grad_scale<T: Float>(x: &[T], grad: &[T], c: usize, eps: f64) -> Vec<T> {
    let mut acc = vec![0.0; c];
    for (row, g) in x.chunks_exact(c).zip(grad.chunks_exact(c)) {
        let (mean, inv) = row_stats(row, eps);
        for i in 0..c {
            acc[i] += (row[i].to64() - mean) * inv * g[i].to64();
        }
    }
    acc.into_iter().map(T::from64).collect()
}

impl CustomOp3 for LayerNorm {
    fn name(&self) -> &'static str {
        "layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        if l2.shape().elem_count() != c || l3.shape().elem_count() != c {
            candle_core::bail!("layer norm: {:?} with affine {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(layer_norm_rows(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(layer_norm_rows(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                self.eps,
            )),
            _ => candle_core::bail!("layer norm: mixed or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let eps = self.eps;
        let dx = x.apply_op3_no_bwd(gamma, &grad, &LayerNormGradInput { eps })?;
        let dgamma = x.apply_op2_no_bwd(&grad, &LayerNormGradScale { eps })?;
        let dbeta = grad.apply_op1_no_bwd(&RowSum)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

impl CustomOp3 for LayerNormGradInput {
    fn name(&self) -> &'static str {
        "layer-norm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => CpuStorage::F32(
                layer_norm_grad_input(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, self.eps),
            ),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => CpuStorage::F64(
                layer_norm_grad_input(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(d, l3)?, self.eps),
            ),
            _ => candle_core::bail!("layer norm grad: mixed or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for LayerNormGradScale {
    fn name(&self) -> &'static str {
        "layer-norm-grad-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(layer_norm_grad_scale(contiguous(x, l1)?, contiguous(g, l2)?, c, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(layer_norm_grad_scale(contiguous(x, l1)?, contiguous(g, l2)?, c, self.eps))
            }
            _ => candle_core::bail!("layer norm grad: mixed or unsupported dtypes"),
        };
        Ok((out, Shape::from(c)))
    }
}

/// Row-stochastic `out x in` matrix for 1-D linear interpolation with
/// half-pixel centres (the `align_corners = false` convention).
pub(crate) fn interp_matrix(out: usize, input: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * input];
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Bilinear resize of `(B, h, w)` maps to `(B, H, W)` as `A_h X A_w^T`.
pub(crate) fn bilinear_resize(x: &Tensor, height: usize, width: usize) -> CResult<Tensor> {
    let (_, h, w) = x.dims3()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let ah = Tensor::from_vec(interp_matrix(height, h), (height, h), dev)?.to_dtype(dtype)?;
    let awt = Tensor::from_vec(interp_matrix(width, w), (width, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let rows = ah.broadcast_matmul(x)?;
    rows.broadcast_matmul(&awt)
}

/// Sinusoidal encoding of a normalized coordinate pair `(u, v)` in [0, 1].
///
/// `dim` must be a multiple of 4: `dim / 4` frequencies, geometrically spaced
/// from 1 to 32 half-cycles across the image, each contributing sin and cos
/// for both axes.
pub(crate) fn sinusoidal_encoding(u: f32, v: f32, dim: usize) -> Vec<f32> {
    let nf = dim / 4;
    let mut out = Vec::with_capacity(dim);
    let (cu, cv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    for axis in [cu, cv] {
        for k in 0..nf {
            let f = if nf > 1 {
                32f32.powf(k as f32 / (nf - 1) as f32)
            } else {
                1.0
            };
            let a = std::f32::consts::PI * f * axis;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}
