//! Time-conditioned UNet denoisers.
//!
//! Every variant works on channel-first `[C, D, H, W]` tensors; the 2D
//! variants use `D = 1`. The spatial convolution changes with the variant:
//!
//! | variant | spatial conv | pooling (D, H, W) | group norm |
//! |---|---|---|---|
//! | `Unet2D`, `Unet2DSeqPos` | 3×3 | (1, 2, 2) | per slice |
//! | `UnetPseudo3D` | 3×3 then depth `k` | (1, 2, 2) | per slice |
//! | `Unet3D`, `UnetLatent3D`, `UnetWavelet3D` | 3×3×3 | (2, 2, 2) | whole volume |
//!
//! With an identity depth kernel the pseudo-3D network computes exactly what
//! the 2D network computes on each slice.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Upper bound on group-norm groups. Every group holds at least two channels,
/// so a per-channel shift ahead of a norm is never erased outright.
pub const MAX_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Unet2D,
    Unet2DSeqPos,
    UnetPseudo3D,
    Unet3D,
    UnetLatent3D,
    UnetWavelet3D,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Unet2D,
        Variant::Unet2DSeqPos,
        Variant::UnetPseudo3D,
        Variant::Unet3D,
        Variant::UnetLatent3D,
        Variant::UnetWavelet3D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet2D => "Unet2D",
            Variant::Unet2DSeqPos => "Unet2DSeqPos",
            Variant::UnetPseudo3D => "UnetPseudo3D",
            Variant::Unet3D => "Unet3D",
            Variant::UnetLatent3D => "UnetLatent3D",
            Variant::UnetWavelet3D => "UnetWavelet3D",
        }
    }

    /// Operates on single slices rather than whole volumes.
    pub fn is_slice_wise(self) -> bool {
        matches!(self, Variant::Unet2D | Variant::Unet2DSeqPos)
    }

    fn mixes_depth_in_pooling(self) -> bool {
        matches!(self, Variant::Unet3D | Variant::UnetLatent3D | Variant::UnetWavelet3D)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub variant: Variant,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks_per_scale: usize,
    /// Depth kernel of the pseudo-3D pair; ignored by other variants.
    pub depth_kernel: usize,
    pub time_embed_dim: usize,
}

impl DenoiserConfig {
    /// Small default layout for a variant. `latent_dim` sets the channel count
    /// of the latent variant and is ignored otherwise.
    pub fn desk(variant: Variant, latent_dim: usize) -> Self {
        let (in_channels, out_channels) = Self::io_channels(variant, latent_dim);
        let (base, mults, rb) = match variant {
            Variant::Unet2D | Variant::Unet2DSeqPos | Variant::UnetPseudo3D => (32, vec![1, 2, 4], 1),
            _ => (16, vec![1, 2], 2),
        };
        DenoiserConfig {
            variant,
            in_channels,
            out_channels,
            base_channels: base,
            channel_mults: mults,
            res_blocks_per_scale: rb,
            depth_kernel: 3,
            time_embed_dim: 4 * base,
        }
    }

    /// Input and output channel counts implied by a variant's conditioning.
    pub fn io_channels(variant: Variant, latent_dim: usize) -> (usize, usize) {
        match variant {
            Variant::Unet2D | Variant::UnetPseudo3D | Variant::Unet3D => (3, 1),
            Variant::Unet2DSeqPos => (4, 1),
            Variant::UnetLatent3D => (3 * latent_dim, latent_dim),
            Variant::UnetWavelet3D => (24, 8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.variant)));
        let expected = match self.variant {
            Variant::UnetLatent3D => {
                if self.out_channels == 0 || self.in_channels != 3 * self.out_channels {
                    return bad(format!(
                        "latent in_channels {} must be 3 × out_channels {}",
                        self.in_channels, self.out_channels
                    ));
                }
                (self.in_channels, self.out_channels)
            }
            v => Self::io_channels(v, 0),
        };
        if (self.in_channels, self.out_channels) != expected {
            return bad(format!(
                "channels ({}, {}) do not match the conditioning layout {expected:?}",
                self.in_channels, self.out_channels
            ));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return bad(format!("base_channels {} must be even and positive", self.base_channels));
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be nonempty and positive".into());
        }
        if self.res_blocks_per_scale == 0 {
            return bad("res_blocks_per_scale must be at least 1".into());
        }
        if self.depth_kernel.is_multiple_of(2) {
            return bad(format!("depth_kernel {} must be odd", self.depth_kernel));
        }
        if self.time_embed_dim == 0 {
            return bad("time_embed_dim must be positive".into());
        }
        for c in self.layer_channels() {
            let g = groups_for(c);
            if c % g != 0 {
                return bad(format!("{c} channels cannot be split into {g} norm groups"));
            }
        }
        Ok(())
    }

    /// Spatial downsampling factor between the input and the bottleneck.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    /// Channel counts entering every group norm, in construction order.
    fn layer_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let plan = Plan::new(self);
        for b in plan.blocks() {
            out.push(b.0);
            out.push(b.1);
        }
        out.push(self.base_channels);
        out
    }
}

pub fn groups_for(channels: usize) -> usize {
    (channels / 2).clamp(1, MAX_GROUPS)
}

/// Channel bookkeeping shared by construction and validation.
struct Plan {
    encoder: Vec<Vec<(usize, usize)>>,
    middle: (usize, usize),
    decoder: Vec<Vec<(usize, usize)>>,
}

impl Plan {
    fn new(c: &DenoiserConfig) -> Self {
        let base = c.base_channels;
        let mut skips = vec![base];
        let mut ch = base;
        let mut encoder = Vec::new();
        for (level, m) in c.channel_mults.iter().enumerate() {
            let out = base * m;
            let mut blocks = Vec::new();
            for _ in 0..c.res_blocks_per_scale {
                blocks.push((ch, out));
                ch = out;
                skips.push(ch);
            }
            encoder.push(blocks);
            if level + 1 < c.channel_mults.len() {
                skips.push(ch);
            }
        }
        let middle = (ch, ch);
        let mut decoder = Vec::new();
        for m in c.channel_mults.iter().rev() {
            let out = base * m;
            let mut blocks = Vec::new();
            for _ in 0..=c.res_blocks_per_scale {
                let skip = skips.pop().expect("skip stack");
                blocks.push((ch + skip, out));
                ch = out;
            }
            decoder.push(blocks);
        }
        Plan { encoder, middle, decoder }
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.encoder.iter().flatten().copied().collect();
        v.push(self.middle);
        v.extend(self.decoder.iter().flatten().copied());
        v
    }
}

/// Sinusoidal features of a scalar position: `dim / 2` sines then cosines
/// with geometrically spaced frequencies.
pub fn sinusoidal(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    Tensor::new(&[dim], out).expect("embedding shape")
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), kaiming(&[n_out, n_in], n_in, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[n_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Sinusoidal features followed by a two-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct TimeEmbedding {
    dim: usize,
    lin1: Linear,
    lin2: Linear,
}

/// The slice-position embedding has the same construction as the time
/// embedding and is added to it.
pub type SlicePositionEmbedding = TimeEmbedding;

impl TimeEmbedding {
    fn new(store: &mut ParamStore, name: &str, dim: usize, out: usize, rng: &mut impl Rng) -> Self {
        TimeEmbedding {
            dim,
            lin1: Linear::new(store, &format!("{name}.lin1"), dim, out, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), out, out, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, position: usize) -> Result<Var> {
        let x = tape.constant(sinusoidal(position as f64, self.dim));
        let h = self.lin1.apply(tape, store, x)?;
        let h = tape.silu(h);
        self.lin2.apply(tape, store, h)
    }
}

/// A spatial convolution; `depth` holds the 1D depth conv of a pseudo-3D pair.
#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    depth: Option<(ParamId, ParamId)>,
    full3d: bool,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    /// Convolution after upsampling (decoder) or none (encoder, last level).
    resample: Option<Conv>,
}

/// A built network: configuration, parameters and layer handles.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    pub params: ParamStore,
    time: TimeEmbedding,
    position: Option<SlicePositionEmbedding>,
    conv_in: Conv,
    encoder: Vec<Level>,
    middle: ResBlock,
    decoder: Vec<Level>,
    norm_out: Norm,
    conv_out: Conv,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Identity depth kernel `[C, C, k]`: 1 at the centre tap of the diagonal.
pub fn identity_depth_kernel(channels: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, k]);
    for c in 0..channels {
        t.data_mut()[(c * channels + c) * k + k / 2] = 1.0;
    }
    t
}

struct Builder<'a, R: Rng> {
    config: &'a DenoiserConfig,
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let v = self.config.variant;
        let full3d = !matches!(v, Variant::Unet2D | Variant::Unet2DSeqPos | Variant::UnetPseudo3D) && k > 1;
        let shape: Vec<usize> = if full3d { vec![cout, cin, k, k, k] } else { vec![cout, cin, k, k] };
        let fan_in = shape[1..].iter().product();
        let w = if zero { Tensor::zeros(&shape) } else { kaiming(&shape, fan_in, self.rng) };
        let w = self.store.add(format!("{name}.w"), w);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        let depth = (v == Variant::UnetPseudo3D && k > 1).then(|| {
            let kd = self.config.depth_kernel;
            (
                self.store.add(format!("{name}.depth.w"), identity_depth_kernel(cout, kd)),
                self.store.add(format!("{name}.depth.b"), Tensor::zeros(&[cout])),
            )
        });
        Conv { w, b, depth, full3d }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            groups: groups_for(c),
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        let ted = self.config.time_embed_dim;
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            emb: Linear::new(&mut self.store, &format!("{name}.emb"), ted, cout, self.rng),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }
}

pub fn build_denoiser(config: &DenoiserConfig, rng: &mut impl Rng) -> Result<Denoiser> {
    config.validate()?;
    let plan = Plan::new(config);
    let mut b = Builder {
        config,
        store: ParamStore::new(),
        rng,
    };
    let ted = config.time_embed_dim;
    let base = config.base_channels;
    let time = TimeEmbedding::new(&mut b.store, "time", base, ted, b.rng);
    let position = (config.variant == Variant::Unet2DSeqPos)
        .then(|| SlicePositionEmbedding::new(&mut b.store, "position", base, ted, b.rng));
    let conv_in = b.conv("conv_in", config.in_channels, base, 3, false);
    let levels = config.channel_mults.len();
    let mut encoder = Vec::new();
    for (l, blocks) in plan.encoder.iter().enumerate() {
        let blocks = blocks
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| b.resblock(&format!("enc.{l}.{i}"), cin, cout))
            .collect();
        encoder.push(Level { blocks, resample: None });
    }
    let middle = b.resblock("mid", plan.middle.0, plan.middle.1);
    let mut decoder = Vec::new();
    for (j, blocks) in plan.decoder.iter().enumerate() {
        let l = levels - 1 - j;
        let blocks: Vec<ResBlock> = blocks
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| b.resblock(&format!("dec.{l}.{i}"), cin, cout))
            .collect();
        let ch = base * config.channel_mults[l];
        let resample = (l > 0).then(|| b.conv(&format!("dec.{l}.up"), ch, ch, 3, false));
        decoder.push(Level { blocks, resample });
    }
    let norm_out = b.norm("out.norm", base);
    let conv_out = b.conv("out.conv", base, config.out_channels, 3, true);
    Ok(Denoiser {
        config: config.clone(),
        params: b.store,
        time,
        position,
        conv_in,
        encoder,
        middle,
        decoder,
        norm_out,
        conv_out,
    })
}

/// The raw pseudo-3D convolution pair: a 2D convolution applied to every depth
/// slice followed by a 1D convolution along depth.
pub fn pseudo3d_block(
    tape: &mut Tape,
    input: Var,
    kernel2d: Var,
    bias2d: Option<Var>,
    kernel_depth: Var,
    bias_depth: Option<Var>,
) -> Result<Var> {
    if tape.value(input).rank() != 4 {
        return Err(Error::shape("pseudo3d_block", "input rank", 4, tape.value(input).rank()));
    }
    let h = tape.conv2d(input, kernel2d, bias2d)?;
    tape.conv_axis1d(h, kernel_depth, bias_depth, 1)
}

impl Denoiser {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn pool_factors(&self) -> [usize; 4] {
        if self.config.variant.mixes_depth_in_pooling() {
            [1, 2, 2, 2]
        } else {
            [1, 1, 2, 2]
        }
    }

    fn per_slice_norm(&self) -> bool {
        !self.config.variant.mixes_depth_in_pooling()
    }

    fn conv(&self, tape: &mut Tape, c: &Conv, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, c.w);
        let b = tape.param(&self.params, c.b);
        match (c.depth, c.full3d) {
            (Some((dw, db)), _) => {
                let dw = tape.param(&self.params, dw);
                let db = tape.param(&self.params, db);
                pseudo3d_block(tape, x, w, Some(b), dw, Some(db))
            }
            (None, true) => tape.conv3d(x, w, Some(b)),
            (None, false) => tape.conv2d(x, w, Some(b)),
        }
    }

    fn norm(&self, tape: &mut Tape, n: &Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.params, n.gamma);
        let b = tape.param(&self.params, n.beta);
        tape.group_norm(x, n.groups, g, b, self.per_slice_norm())
    }

    fn resblock(&self, tape: &mut Tape, r: &ResBlock, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(tape, &r.norm1, x)?;
        let h = tape.silu(h);
        let h = self.conv(tape, &r.conv1, h)?;
        let h = self.norm(tape, &r.norm2, h)?;
        let shift = r.emb.apply(tape, &self.params, emb)?;
        let h = tape.add_channel(h, shift)?;
        let h = tape.silu(h);
        let h = self.conv(tape, &r.conv2, h)?;
        let skip = match &r.skip {
            Some(c) => self.conv(tape, c, x)?,
            None => x,
        };
        tape.add(h, skip)
    }

    /// Records a forward pass. `x` is the assembled `[C_in, D, H, W]` input;
    /// `slice_pos` is required by, and only accepted for, the seq-pos variant.
    pub fn forward(&self, tape: &mut Tape, x: Var, t: usize, slice_pos: Option<usize>) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("denoiser", "input rank", 4, shape.len()));
        }
        if shape[0] != self.config.in_channels {
            return Err(Error::shape("denoiser", "input channels", self.config.in_channels, shape[0]));
        }
        let div = self.config.spatial_divisor();
        let pooled = if self.config.variant.mixes_depth_in_pooling() { 1..4 } else { 2..4 };
        for axis in pooled {
            if !shape[axis].is_multiple_of(div) {
                return Err(Error::invalid(
                    "denoiser",
                    format!("extent {} on axis {axis} not divisible by {div}", shape[axis]),
                ));
            }
        }
        let mut emb = self.time.apply(tape, &self.params, t)?;
        match (&self.position, slice_pos) {
            (Some(p), Some(pos)) => {
                let pe = p.apply(tape, &self.params, pos)?;
                emb = tape.add(emb, pe)?;
            }
            (Some(_), None) => return Err(Error::invalid("denoiser", "slice_pos is required for Unet2DSeqPos")),
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "denoiser",
                    format!("slice_pos is only accepted by Unet2DSeqPos, not {}", self.config.variant),
                ))
            }
            (None, None) => {}
        }
        let emb = tape.silu(emb);
        let factors = self.pool_factors();

        let mut h = self.conv(tape, &self.conv_in, x)?;
        let mut skips = vec![h];
        for (l, level) in self.encoder.iter().enumerate() {
            for block in &level.blocks {
                h = self.resblock(tape, block, h, emb)?;
                skips.push(h);
            }
            if l + 1 < self.encoder.len() {
                h = tape.avg_pool(h, &factors)?;
                skips.push(h);
            }
        }
        h = self.resblock(tape, &self.middle, h, emb)?;
        for level in &self.decoder {
            for block in &level.blocks {
                let skip = skips.pop().expect("skip stack");
                let cat = tape.concat_channels(&[h, skip])?;
                h = self.resblock(tape, block, cat, emb)?;
            }
            if let Some(up) = &level.resample {
                h = tape.upsample_nearest(h, &factors)?;
                h = self.conv(tape, up, h)?;
            }
        }
        let h = self.norm(tape, &self.norm_out, h)?;
        let h = tape.silu(h);
        self.conv(tape, &self.conv_out, h)
    }

    /// Forward pass on a fresh tape, returning only the output value.
    pub fn predict(&self, x: &Tensor, t: usize, slice_pos: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, input, t, slice_pos)?;
        let value = tape.value(out).clone();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced a non-finite output", self.config.variant)));
        }
        Ok(value)
    }
}
