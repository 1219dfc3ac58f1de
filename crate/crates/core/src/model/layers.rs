//! Channels-last building blocks. Feature maps are `(B, H, W, C)`.

use candle_core::{Module, Tensor};

use super::ops::{softmax_last, BiasAdd, Im2Col, LayerNorm};
use super::params::ParamBuilder;
use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

/// Dense layer over the last dimension.
#[derive(Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_bound(pb, name, input, output, (3.0 / input as f64).sqrt())
    }

    /// Init scaled for a following ReLU.
    pub(crate) fn relu(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_bound(pb, name, input, output, (6.0 / input as f64).sqrt())
    }

    fn with_bound(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, bound: f64) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            weight: pb.uniform("weight", &[input, output], bound)?,
            bias: pb.constant("bias", &[output], 0.0)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let dims = x.dims().to_vec();
        let (last, lead) = dims.split_last().expect("linear input has rank >= 1");
        let rows: usize = lead.iter().product();
        let y = x
            .reshape((rows, *last))?
            .matmul(&self.weight)?
            .apply_op2(&self.bias, BiasAdd)?;
        let mut out = lead.to_vec();
        out.push(self.weight.dim(1)?);
        y.reshape(out)
    }
}

/// 3x3 convolution, padding 1.
#[derive(Clone)]
pub(crate) struct Conv3x3 {
    stride: usize,
    weight: Tensor,
    bias: Tensor,
}

impl Conv3x3 {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, stride: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        let fan_in = 9 * input;
        Ok(Self {
            stride,
            weight: pb.uniform("weight", &[fan_in, output], (6.0 / fan_in as f64).sqrt())?,
            bias: pb.constant("bias", &[output], 0.0)?,
        })
    }
}

impl Module for Conv3x3 {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (oh, ow) = ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1);
        let cols = x.contiguous()?.apply_op1(Im2Col { stride: self.stride })?;
        let k = cols.dim(2)?;
        cols.reshape((b * oh * ow, k))?
            .matmul(&self.weight)?
            .apply_op2(&self.bias, BiasAdd)?
            .reshape((b, oh, ow, self.weight.dim(1)?))
    }
}

/// Non-overlapping 2x2 patch projection (kernel 2, stride 2).
#[derive(Clone)]
pub(crate) struct PatchDown2 {
    proj: Linear,
}

impl PatchDown2 {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::relu(pb, name, 4 * input, output)?,
        })
    }
}

impl Module for PatchDown2 {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let patches = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.proj.forward(&patches)
    }
}

/// Transposed 2x2 stride-2 convolution: each cell expands into a 2x2 block.
#[derive(Clone)]
pub(crate) struct PatchUp2 {
    proj: Linear,
    output: usize,
}

impl PatchUp2 {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::relu(pb, name, input, 4 * output)?,
            output,
        })
    }
}

impl Module for PatchUp2 {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        self.proj
            .forward(x)?
            .reshape((b, h, w, 2, 2, self.output))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, 2 * h, 2 * w, self.output))
    }
}

/// Layer normalization over the channel (last) dimension.
#[derive(Clone)]
pub(crate) struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelNorm {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0)?,
            beta: pb.constant("beta", &[channels], 0.0)?,
        })
    }
}

impl Module for ChannelNorm {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        x.contiguous()?
            .apply_op3(&self.gamma, &self.beta, LayerNorm { eps: 1e-6 })
    }
}

/// Multi-head attention with an optionally narrower internal width.
#[derive(Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, dim: usize, internal: usize, heads: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            q: Linear::new(&mut pb, "q", dim, internal)?,
            k: Linear::new(&mut pb, "k", dim, internal)?,
            v: Linear::new(&mut pb, "v", dim, internal)?,
            out: Linear::new(&mut pb, "out", internal, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `q: (B, Nq, C)`, `k, v: (B, Nk, C)`.
    pub(crate) fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> CResult<Tensor> {
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let (b, h, n, dh) = q.dims4()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let mixed = softmax_last(&scores)?.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.reshape((b, n, h * dh))?;
        self.out.forward(&merged)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, widths: &[usize]) -> Result<Self> {
        let mut pb = pb.pp(name);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let layer = format!("l{i}");
                if i < last {
                    Linear::relu(&mut pb, &layer, w[0], w[1])
                } else {
                    Linear::new(&mut pb, &layer, w[0], w[1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}
