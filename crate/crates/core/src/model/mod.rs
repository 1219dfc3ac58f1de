//! The learnable network: image encoder, sparse and dense prompt encoders,
//! a two-way attention mask decoder, and the error decoder.
//!
//! Tensors are channels-last. Image embeddings are `(B, h, w, d)` with
//! `h = H / stride`; logits come back at full input resolution as `(B, H, W)`.

pub(crate) mod layers;
pub(crate) mod ops;
pub mod params;

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point, PromptSet};
use crate::mask::{Dims, Image, LogitMap, ProbMask};
use crate::rng::Streams;
use layers::{Attention, ChannelNorm, Conv3x3, Linear, Mlp, PatchDown2, PatchUp2};
pub use params::{Checkpoint, CheckpointHeader, Component, Param, ParamStore, TensorMeta, CHECKPOINT_FORMAT};
pub(crate) use params::sha256_hex;
use params::{tensor_data, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Channel width of image, prompt and token embeddings.
    pub embed_dim: usize,
    /// One stride-2 encoder convolution per entry; the total stride is `2^len`.
    pub encoder_widths: Vec<usize>,
    pub decoder_depth: usize,
    pub heads: usize,
    /// Internal width divisor of the token/image cross-attentions.
    pub attn_downsample: usize,
    pub mlp_dim: usize,
    /// Channels of each error-decoder upsampling stage.
    pub error_widths: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_widths: vec![16, 32, 64],
            decoder_depth: 2,
            heads: 4,
            attn_downsample: 2,
            mlp_dim: 128,
            error_widths: vec![32, 16, 8],
        }
    }
}

impl ArchConfig {
    pub fn stride(&self) -> usize {
        1 << self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        let fail = |m: String| Err(Error::config(format!("arch: {m}")));
        if d == 0 || d % 16 != 0 {
            return fail(format!("embed_dim {d} must be a positive multiple of 16"));
        }
        if self.encoder_widths.len() < 2 || self.encoder_widths.len() > 6 {
            return fail("encoder_widths needs 2 to 6 entries".into());
        }
        if self.encoder_widths.contains(&0) || self.error_widths.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.heads == 0 || self.attn_downsample == 0 || d % (self.heads * self.attn_downsample) != 0 {
            return fail(format!(
                "embed_dim {d} must be divisible by heads x attn_downsample"
            ));
        }
        if self.decoder_depth == 0 || self.mlp_dim == 0 {
            return fail("decoder_depth and mlp_dim must be positive".into());
        }
        if self.error_widths.is_empty() || (1 << self.error_widths.len()) > self.stride() {
            return fail(format!(
                "error decoder upsamples by 2^{} but the encoder stride is {}",
                self.error_widths.len(),
                self.stride()
            ));
        }
        Ok(())
    }

    /// Hex digest identifying the parameter layout this config produces.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("arch config serializes");
        sha256_hex(format!("{CHECKPOINT_FORMAT}\n{json}").as_bytes())
    }
}

/// Which components train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Everything trains.
    #[default]
    Scratch,
    /// Image encoder and both prompt encoders stay fixed.
    FrozenBackbone,
}

impl TrainingMode {
    pub fn trains(self, c: Component) -> bool {
        match self {
            TrainingMode::Scratch => true,
            TrainingMode::FrozenBackbone => matches!(c, Component::MaskDecoder | Component::ErrorDecoder),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Scratch => "scratch",
            TrainingMode::FrozenBackbone => "frozen-backbone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(TrainingMode::Scratch),
            "frozen-backbone" => Ok(TrainingMode::FrozenBackbone),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected scratch or frozen-backbone)"
            ))),
        }
    }
}

/// Encoder output for a batch of images of one size.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    /// `(B, h, w, d)`.
    pub tensor: Tensor,
    pub source: Dims,
}

impl ImageEmbedding {
    pub fn batch(&self) -> usize {
        self.tensor.dim(0).unwrap_or(0)
    }

    pub fn grid(&self) -> Result<Dims> {
        let (_, h, w, _) = self.tensor.dims4()?;
        Ok(Dims::new(h, w))
    }

    /// The `i`-th image of the batch.
    pub fn select(&self, i: usize) -> Result<ImageEmbedding> {
        Ok(Self {
            tensor: self.tensor.narrow(0, i, 1)?,
            source: self.source,
        })
    }

    pub fn detach(&self) -> ImageEmbedding {
        Self {
            tensor: self.tensor.detach(),
            source: self.source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    NegativePoint,
    PositivePoint,
    BoxTopLeft,
    BoxBottomRight,
}

impl TokenKind {
    fn row(self) -> u32 {
        match self {
            TokenKind::NegativePoint => 0,
            TokenKind::PositivePoint => 1,
            TokenKind::BoxTopLeft => 2,
            TokenKind::BoxBottomRight => 3,
        }
    }
}

const NO_POINT_ROW: usize = 4;

/// Point and box tokens. A learned padding token rides along when points are
/// present without a box; it is not counted in `len`.
#[derive(Clone, Debug)]
pub struct SparseEmbedding {
    /// `(n, d)`, absent when there are no tokens.
    pub tokens: Option<Tensor>,
    pub kinds: Vec<TokenKind>,
    padding: Option<Tensor>,
}

impl SparseEmbedding {
    pub fn empty() -> Self {
        Self {
            tokens: None,
            kinds: Vec::new(),
            padding: None,
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    fn with_padding(&self) -> Result<Option<Tensor>> {
        Ok(match (&self.tokens, &self.padding) {
            (Some(t), Some(p)) => Some(Tensor::cat(&[t, p], 0)?),
            (t, _) => t.clone(),
        })
    }
}

/// Mask-prompt features on the embedding grid.
#[derive(Clone, Debug)]
pub struct DenseEmbedding {
    /// `(B, h, w, d)`.
    pub tensor: Tensor,
    pub is_null: bool,
}

/// Full-resolution mask logits `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct MaskLogits {
    pub tensor: Tensor,
}

/// Full-resolution error logits `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct ErrorLogits {
    pub tensor: Tensor,
}

macro_rules! logit_maps {
    ($ty:ident) => {
        impl $ty {
            /// One host-side map per batch entry.
            pub fn to_maps(&self) -> Result<Vec<LogitMap>> {
                let (b, h, w) = self.tensor.dims3()?;
                let data = tensor_data(&self.tensor)?;
                data.chunks_exact(h * w)
                    .take(b)
                    .map(|c| LogitMap::new(Dims::new(h, w), c.to_vec()))
                    .collect()
            }

            pub fn to_map(&self) -> Result<LogitMap> {
                self.to_maps()?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::input("empty logit batch"))
            }

            pub fn probs(&self) -> Result<Vec<ProbMask>> {
                Ok(self.to_maps()?.iter().map(LogitMap::probs).collect())
            }
        }
    };
}

logit_maps!(MaskLogits);
logit_maps!(ErrorLogits);

struct ImageEncoder {
    convs: Vec<Conv3x3>,
    norm: ChannelNorm,
}

impl ImageEncoder {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut prev = 1;
        for (i, &w) in arch.encoder_widths.iter().enumerate() {
            convs.push(Conv3x3::new(pb, &format!("down{i}"), prev, w, 2)?);
            prev = w;
        }
        convs.push(Conv3x3::new(pb, "mix", prev, arch.embed_dim, 1)?);
        Ok(Self {
            convs,
            norm: ChannelNorm::new(pb, "norm", arch.embed_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = (x - 0.5)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.relu()?;
            }
        }
        Ok(self.norm.forward(&x)?)
    }
}

struct SparseEncoder {
    /// Rows: negative, positive, box top-left, box bottom-right, no-point.
    kinds: Tensor,
}

impl SparseEncoder {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        Ok(Self {
            kinds: pb.normal("kinds", &[5, arch.embed_dim], 1.0)?,
        })
    }
}

struct DenseEncoder {
    downs: Vec<(PatchDown2, ChannelNorm)>,
    proj: Linear,
    null: Tensor,
}

impl DenseEncoder {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        let d = arch.embed_dim;
        let n = arch.encoder_widths.len();
        let mut downs = Vec::new();
        let mut prev = 1;
        for i in 0..n {
            let w = (d >> (2 * (n - 1 - i))).max(1);
            downs.push((
                PatchDown2::new(pb, &format!("down{i}"), prev, w)?,
                ChannelNorm::new(pb, &format!("norm{i}"), w)?,
            ));
            prev = w;
        }
        Ok(Self {
            downs,
            proj: Linear::new(pb, "proj", prev, d)?,
            null: pb.normal("null", &[d], 1.0)?,
        })
    }

    fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let mut x = mask.clone();
        for (down, norm) in &self.downs {
            x = norm.forward(&down.forward(&x)?)?.relu()?;
        }
        Ok(self.proj.forward(&x)?)
    }
}

struct TwoWayLayer {
    self_attn: Attention,
    norm1: ChannelNorm,
    token_to_image: Attention,
    norm2: ChannelNorm,
    mlp: Mlp,
    norm3: ChannelNorm,
    image_to_token: Attention,
    norm4: ChannelNorm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig, skip_first_pe: bool) -> Result<Self> {
        let d = arch.embed_dim;
        let inner = d / arch.attn_downsample;
        Ok(Self {
            self_attn: Attention::new(pb, "self_attn", d, d, arch.heads)?,
            norm1: ChannelNorm::new(pb, "norm1", d)?,
            token_to_image: Attention::new(pb, "t2i", d, inner, arch.heads)?,
            norm2: ChannelNorm::new(pb, "norm2", d)?,
            mlp: Mlp::new(pb, "mlp", &[d, arch.mlp_dim, d])?,
            norm3: ChannelNorm::new(pb, "norm3", d)?,
            image_to_token: Attention::new(pb, "i2t", d, inner, arch.heads)?,
            norm4: ChannelNorm::new(pb, "norm4", d)?,
            skip_first_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        queries = self.norm2.forward(&(&queries + self.token_to_image.forward(&q, &k, keys)?)?)?;
        queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let keys = self.norm4.forward(&(keys + self.image_to_token.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

struct MaskDecoder {
    output_token: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: ChannelNorm,
    up1: PatchUp2,
    up_norm: ChannelNorm,
    up2: PatchUp2,
    hyper: Mlp,
}

impl MaskDecoder {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        let d = arch.embed_dim;
        let layers = (0..arch.decoder_depth)
            .map(|i| TwoWayLayer::new(&mut pb.pp(&format!("layer{i}")), arch, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            output_token: pb.normal("output_token", &[1, d], 1.0)?,
            layers,
            final_attn: Attention::new(pb, "final_attn", d, d / arch.attn_downsample, arch.heads)?,
            final_norm: ChannelNorm::new(pb, "final_norm", d)?,
            up1: PatchUp2::new(pb, "up1", d, d / 2)?,
            up_norm: ChannelNorm::new(pb, "up_norm", d / 2)?,
            up2: PatchUp2::new(pb, "up2", d / 2, d / 4)?,
            hyper: Mlp::new(pb, "hyper", &[d, d, d / 4])?,
        })
    }

    /// `image`, `dense`: `(B | 1, h, w, d)`; `sparse`: `(B | 1, n, d)`.
    fn forward(&self, image: &Tensor, dense: &Tensor, sparse: Option<&Tensor>, out: Dims) -> Result<Tensor> {
        let (b, h, w, d) = image.dims4()?;
        let tokens = match sparse {
            Some(s) => {
                let out_token = self.output_token.unsqueeze(0)?.broadcast_as((s.dim(0)?, 1, d))?;
                Tensor::cat(&[&out_token, s], 1)?
            }
            None => self.output_token.unsqueeze(0)?,
        };
        let n = tokens.dim(1)?;
        let query_pe = tokens.broadcast_as((b, n, d))?.contiguous()?;
        let keys0 = image.broadcast_add(dense)?.reshape((b, h * w, d))?;
        let key_pe = grid_encoding(h, w, d, image.device())?
            .to_dtype(image.dtype())?
            .unsqueeze(0)?
            .broadcast_as((b, h * w, d))?
            .contiguous()?;

        let mut queries = query_pe.clone();
        let mut keys = keys0;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, &query_pe, &key_pe)?;
        }
        let q = (&queries + &query_pe)?;
        let k = (&keys + &key_pe)?;
        queries = self
            .final_norm
            .forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let grid = keys.reshape((b, h, w, d))?;
        let up = self.up_norm.forward(&self.up1.forward(&grid)?)?.relu()?;
        let up = self.up2.forward(&up)?.relu()?;
        let (_, uh, uw, uc) = up.dims4()?;
        let hyper = self.hyper.forward(&queries.narrow(1, 0, 1)?)?; // (B, 1, uc)
        let low = up
            .reshape((b, uh * uw, uc))?
            .matmul(&hyper.transpose(1, 2)?.contiguous()?)?
            .reshape((b, uh, uw))?;
        Ok(ops::bilinear_resize(&low, out.height, out.width)?)
    }
}

struct ErrorDecoder {
    fuse: Linear,
    stages: Vec<(Conv3x3, PatchUp2)>,
    head: Linear,
}

impl ErrorDecoder {
    fn new(pb: &mut ParamBuilder, arch: &ArchConfig) -> Result<Self> {
        let d = arch.embed_dim;
        let mut stages = Vec::new();
        let mut prev = d;
        for (i, &w) in arch.error_widths.iter().enumerate() {
            stages.push((
                Conv3x3::new(pb, &format!("conv{i}"), prev, prev, 1)?,
                PatchUp2::new(pb, &format!("up{i}"), prev, w)?,
            ));
            prev = w;
        }
        Ok(Self {
            fuse: Linear::relu(pb, "fuse", 2 * d, d)?,
            stages,
            head: Linear::new(pb, "head", prev, 1)?,
        })
    }

    /// Each stage refines at its own resolution, then doubles it.
    fn forward(&self, x: &Tensor, out: Dims) -> Result<Tensor> {
        let mut x = self.fuse.forward(x)?.relu()?;
        for (conv, up) in &self.stages {
            x = up.forward(&conv.forward(&x)?.relu()?)?.relu()?;
        }
        let y = self.head.forward(&x)?.squeeze(3)?;
        Ok(ops::bilinear_resize(&y, out.height, out.width)?)
    }
}

/// Positional encoding of every embedding-grid cell centre, `(h * w, d)`.
fn grid_encoding(h: usize, w: usize, d: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            data.extend(ops::sinusoidal_encoding(
                (x as f32 + 0.5) / w as f32,
                (y as f32 + 0.5) / h as f32,
                d,
            ));
        }
    }
    Ok(Tensor::from_vec(data, (h * w, d), device)?)
}

/// Stacks same-sized grids into a `(B, H, W, 1)` tensor.
pub fn stack_grids<'a>(dims: Dims, grids: impl IntoIterator<Item = &'a [f32]>, device: &Device) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    for g in grids {
        if g.len() != dims.len() {
            return Err(Error::input(format!("grid of {} values does not match {dims}", g.len())));
        }
        data.extend_from_slice(g);
        b += 1;
    }
    Ok(Tensor::from_vec(data, (b, dims.height, dims.width, 1), device)?)
}

/// The full model. Parameters live in a [`ParamStore`]; cloning a `CoSam`
/// shares them (use [`CoSam::deep_clone`] for an independent copy).
pub struct CoSam {
    arch: ArchConfig,
    mode: TrainingMode,
    params: ParamStore,
    encoder: ImageEncoder,
    sparse: SparseEncoder,
    dense: DenseEncoder,
    decoder: MaskDecoder,
    error: ErrorDecoder,
}

impl CoSam {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let device = Device::Cpu;
        let streams = Streams::new(seed);
        let mut store = ParamStore::new(device);
        macro_rules! build {
            ($ty:ident, $comp:expr, $prefix:literal, $idx:literal) => {{
                let mut rng = streams.stream("init", &[$idx]);
                let mut pb = ParamBuilder::new(&mut store, &mut rng, $comp, $prefix);
                $ty::new(&mut pb, arch)?
            }};
        }
        let encoder = build!(ImageEncoder, Component::ImageEncoder, "encoder", 0);
        let sparse = build!(SparseEncoder, Component::SparsePromptEncoder, "sparse", 1);
        let dense = build!(DenseEncoder, Component::DensePromptEncoder, "dense", 2);
        let decoder = build!(MaskDecoder, Component::MaskDecoder, "decoder", 3);
        let error = build!(ErrorDecoder, Component::ErrorDecoder, "error", 4);
        Ok(Self {
            arch: arch.clone(),
            mode: TrainingMode::Scratch,
            params: store,
            encoder,
            sparse,
            dense,
            decoder,
            error,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn mode(&self) -> TrainingMode {
        self.mode
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn set_mode(&mut self, mode: TrainingMode) {
        self.mode = mode;
        self.params.set_trainable(|c| mode.trains(c));
    }

    fn check_image_dims(&self, dims: Dims) -> Result<()> {
        let s = self.arch.stride();
        for (name, v) in [("height", dims.height), ("width", dims.width)] {
            if v < s || v % s != 0 {
                return Err(Error::config(format!(
                    "image {name} {v} must be a positive multiple of the encoder stride {s}"
                )));
            }
        }
        Ok(())
    }

    /// `images`: `(B, H, W, 1)` with values in [0, 1].
    pub fn encode_images(&self, images: &Tensor) -> Result<ImageEmbedding> {
        let (_, h, w, c) = images.dims4()?;
        if c != 1 {
            return Err(Error::input(format!("expected one image channel, found {c}")));
        }
        let source = Dims::new(h, w);
        self.check_image_dims(source)?;
        let mut tensor = self.encoder.forward(images)?;
        if self.mode == TrainingMode::FrozenBackbone {
            tensor = tensor.detach();
        }
        Ok(ImageEmbedding { tensor, source })
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageEmbedding> {
        let t = stack_grids(image.dims(), [image.as_slice()], self.device())?;
        self.encode_images(&t)
    }

    /// One token per point and two per box corner, on an image of `dims`.
    pub fn encode_sparse(&self, points: &[Point], bbox: Option<&BoundingBox>, dims: Dims) -> Result<SparseEmbedding> {
        let d = self.arch.embed_dim;
        let mut coords = Vec::new();
        let mut kinds = Vec::new();
        for p in points {
            if !dims.contains(p.x, p.y) {
                return Err(Error::input(format!(
                    "point ({}, {}) outside {}x{} image",
                    p.x, p.y, dims.width, dims.height
                )));
            }
            if p.label > 1 {
                return Err(Error::input(format!("point label {} is not 0 or 1", p.label)));
            }
            coords.push((p.x, p.y));
            kinds.push(if p.is_positive() {
                TokenKind::PositivePoint
            } else {
                TokenKind::NegativePoint
            });
        }
        if let Some(b) = bbox {
            if !dims.contains(b.x1, b.y1) || b.x0 > b.x1 || b.y0 > b.y1 {
                return Err(Error::input(format!(
                    "box ({}, {}, {}, {}) invalid for {}x{} image",
                    b.x0, b.y0, b.x1, b.y1, dims.width, dims.height
                )));
            }
            coords.push((b.x0, b.y0));
            kinds.push(TokenKind::BoxTopLeft);
            coords.push((b.x1, b.y1));
            kinds.push(TokenKind::BoxBottomRight);
        }
        if kinds.is_empty() {
            return Ok(SparseEmbedding::empty());
        }
        let pe: Vec<f32> = coords
            .iter()
            .flat_map(|&(x, y)| {
                ops::sinusoidal_encoding(
                    (x as f32 + 0.5) / dims.width as f32,
                    (y as f32 + 0.5) / dims.height as f32,
                    d,
                )
            })
            .collect();
        let pe = Tensor::from_vec(pe, (kinds.len(), d), self.device())?;
        let ids: Vec<u32> = kinds.iter().map(|k| k.row()).collect();
        let ids = Tensor::from_vec(ids, kinds.len(), self.device())?;
        let tokens = (pe + self.sparse.kinds.index_select(&ids, 0)?)?;
        let padding = if bbox.is_none() {
            Some(self.sparse.kinds.narrow(0, NO_POINT_ROW, 1)?)
        } else {
            None
        };
        Ok(SparseEmbedding {
            tokens: Some(tokens),
            kinds,
            padding,
        })
    }

    /// The learned null-mask embedding broadcast over `image`'s grid.
    pub fn null_dense(&self, image: &ImageEmbedding) -> Result<DenseEmbedding> {
        let (b, h, w, d) = image.tensor.dims4()?;
        let tensor = self.dense.null.reshape((1, 1, 1, d))?.broadcast_as((b, h, w, d))?;
        Ok(DenseEmbedding { tensor, is_null: true })
    }

    /// `masks`: `(B, H, W, 1)` soft masks.
    pub fn encode_dense_masks(&self, masks: &Tensor) -> Result<DenseEmbedding> {
        let (_, h, w, _) = masks.dims4()?;
        self.check_image_dims(Dims::new(h, w))?;
        Ok(DenseEmbedding {
            tensor: self.dense.forward(masks)?,
            is_null: false,
        })
    }

    pub fn encode_dense(&self, mask: Option<&ProbMask>, image: &ImageEmbedding) -> Result<DenseEmbedding> {
        match mask {
            None => self.null_dense(image),
            Some(m) => {
                m.dims().ensure_same(image.source, "mask prompt")?;
                let t = stack_grids(m.dims(), [m.as_slice()], self.device())?;
                self.encode_dense_masks(&t)
            }
        }
    }

    pub fn decode_mask(&self, image: &ImageEmbedding, sparse: &SparseEmbedding, dense: &DenseEmbedding) -> Result<MaskLogits> {
        check_grid(image, dense)?;
        let tokens = sparse.with_padding()?.map(|t| t.unsqueeze(0)).transpose()?;
        let tensor = self
            .decoder
            .forward(&image.tensor, &dense.tensor, tokens.as_ref(), image.source)?;
        Ok(MaskLogits { tensor })
    }

    /// Prompt-free prediction for every image in the batch.
    pub fn decode_coarse(&self, image: &ImageEmbedding) -> Result<MaskLogits> {
        self.decode_mask(image, &SparseEmbedding::empty(), &self.null_dense(image)?)
    }

    /// Encodes a prompt set for a single-image embedding and decodes it.
    pub fn decode_prompted(&self, image: &ImageEmbedding, prompts: &PromptSet) -> Result<MaskLogits> {
        let points = prompts.points.as_deref().unwrap_or(&[]);
        let sparse = self.encode_sparse(points, prompts.bbox.as_ref(), image.source)?;
        let dense = self.encode_dense(prompts.mask.as_ref(), image)?;
        self.decode_mask(image, &sparse, &dense)
    }

    /// One prompt set per image of the batch. Images whose prompts encode to
    /// the same number of tokens are decoded together; the result matches
    /// calling [`CoSam::decode_prompted`] on each image.
    pub fn decode_prompted_batch(&self, image: &ImageEmbedding, prompts: &[PromptSet]) -> Result<MaskLogits> {
        let b = image.batch();
        if prompts.len() != b {
            return Err(Error::input(format!(
                "{} prompt sets for a batch of {b} images",
                prompts.len()
            )));
        }
        let dev = self.device();
        let mut tokens = Vec::with_capacity(b);
        let mut dense = Vec::with_capacity(b);
        for (i, p) in prompts.iter().enumerate() {
            let points = p.points.as_deref().unwrap_or(&[]);
            tokens.push(self.encode_sparse(points, p.bbox.as_ref(), image.source)?.with_padding()?);
            dense.push(self.encode_dense(p.mask.as_ref(), &image.select(i)?)?.tensor);
        }
        let mut groups: Vec<(Option<usize>, Vec<usize>)> = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            let n = t.as_ref().map(|t| t.dim(0)).transpose()?;
            match groups.iter_mut().find(|(m, _)| *m == n) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((n, vec![i])),
            }
        }
        let mut outs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(b);
        for (n, idx) in &groups {
            let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), dev)?;
            let img = image.tensor.index_select(&ids, 0)?;
            let den = Tensor::cat(&idx.iter().map(|&i| &dense[i]).collect::<Vec<_>>(), 0)?;
            let sparse = match n {
                Some(_) => Some(Tensor::stack(
                    &idx.iter()
                        .map(|&i| tokens[i].as_ref().expect("grouped by token count"))
                        .collect::<Vec<_>>(),
                    0,
                )?),
                None => None,
            };
            outs.push(self.decoder.forward(&img, &den, sparse.as_ref(), image.source)?);
            order.extend_from_slice(idx);
        }
        let stacked = Tensor::cat(&outs, 0)?;
        if order.iter().enumerate().all(|(k, &i)| k == i) {
            return Ok(MaskLogits { tensor: stacked });
        }
        let mut inverse = vec![0u32; b];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k as u32;
        }
        let inverse = Tensor::from_vec(inverse, b, dev)?;
        Ok(MaskLogits {
            tensor: stacked.index_select(&inverse, 0)?,
        })
    }

    /// Error logits from the image and mask embeddings. Both inputs are
    /// detached so that error-loss gradients reach only the error decoder.
    pub fn decode_error(&self, image: &ImageEmbedding, mask: &DenseEmbedding) -> Result<ErrorLogits> {
        check_grid(image, mask)?;
        let (b, h, w, d) = image.tensor.dims4()?;
        let mask = mask.tensor.detach().broadcast_as((b, h, w, d))?;
        let x = Tensor::cat(&[&image.tensor.detach(), &mask], 3)?;
        Ok(ErrorLogits {
            tensor: self.error.forward(&x, image.source)?,
        })
    }

    /// Packs parameters (plus any `extras`, e.g. optimizer moments) into a checkpoint.
    pub fn to_checkpoint(&self, state: serde_json::Value, extras: &[(String, Tensor)]) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for p in self.params.iter() {
            tensors.push(TensorMeta {
                name: p.name.clone(),
                shape: p.var.dims().to_vec(),
                component: Some(p.component),
                trainable: Some(p.trainable),
            });
            data.push(tensor_data(p.var.as_tensor())?);
        }
        for (name, t) in extras {
            tensors.push(TensorMeta {
                name: name.clone(),
                shape: t.dims().to_vec(),
                component: None,
                trainable: None,
            });
            data.push(tensor_data(t)?);
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                arch_hash: self.arch.hash(),
                arch: serde_json::to_value(&self.arch)?,
                state,
                tensors,
            },
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null, &[])?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: ArchConfig = serde_json::from_value(ck.header.arch.clone())
            .map_err(|e| Error::Checkpoint(format!("bad architecture record: {e}")))?;
        if arch.hash() != ck.header.arch_hash {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: file says {}, config hashes to {}",
                ck.header.arch_hash,
                arch.hash()
            )));
        }
        let mut model = Self::new(&arch, 0)?;
        let mut seen = 0;
        let mut frozen_encoder = false;
        for (meta, values) in ck.header.tensors.iter().zip(&ck.data) {
            let Some(component) = meta.component else { continue };
            let p = model
                .params
                .get(&meta.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", meta.name)))?;
            if p.var.dims() != meta.shape.as_slice() || p.component != component {
                return Err(Error::Checkpoint(format!("parameter {} has the wrong shape", meta.name)));
            }
            model.params.assign(&meta.name, values.clone())?;
            if component == Component::ImageEncoder && meta.trainable == Some(false) {
                frozen_encoder = true;
            }
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                model.params.len()
            )));
        }
        model.set_mode(if frozen_encoder {
            TrainingMode::FrozenBackbone
        } else {
            TrainingMode::Scratch
        });
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// An independent copy with identical values.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_checkpoint(&self.to_checkpoint(serde_json::Value::Null, &[])?)
    }

    /// Copies parameter values from another model with the same architecture.
    pub fn copy_params_from(&self, other: &CoSam) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::config("cannot copy parameters across architectures"));
        }
        for p in other.params.iter() {
            self.params.assign(&p.name, tensor_data(p.var.as_tensor())?)?;
        }
        Ok(())
    }
}

fn check_grid(image: &ImageEmbedding, dense: &DenseEmbedding) -> Result<()> {
    let (_, h, w, d) = image.tensor.dims4()?;
    let (db, dh, dw, dd) = dense.tensor.dims4()?;
    if (h, w, d) != (dh, dw, dd) || (db != 1 && db != image.batch()) {
        return Err(Error::input(format!(
            "dense embedding {:?} does not match image embedding {:?}",
            dense.tensor.dims(),
            image.tensor.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
