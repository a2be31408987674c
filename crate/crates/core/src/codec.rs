//! Small vector-quantized convolutional autoencoder.
//!
//! The encoder halves the grid `log2(f)` times with average pooling and ends
//! in a `d`-channel latent; the decoder mirrors it with nearest upsampling.
//! Latents snap to the nearest of `K` codebook rows.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CODEBOOK_NAME: &str = "codec.codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Spatial downsampling factor, a power of two.
    pub downsample: usize,
    /// Channels at each resolution, finest first; one more entry than the
    /// number of pooling stages.
    pub channels: Vec<usize>,
    pub commitment: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_dim: 4,
            codebook_size: 8,
            downsample: 4,
            channels: vec![8, 16, 32],
            commitment: 0.25,
        }
    }
}

impl CodecConfig {
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!("codec downsample {} is not a power of two", self.downsample)));
        }
        if self.channels.len() != self.stages() + 1 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "codec needs {} positive channel counts, got {:?}",
                self.stages() + 1,
                self.channels
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("codec latent_dim must be positive".into()));
        }
        if self.codebook_size == 0 {
            return Err(Error::invalid("codec", "codebook is empty"));
        }
        Ok(())
    }

    pub fn latent_shape(&self, volume: [usize; 3]) -> Result<[usize; 3]> {
        if volume.iter().any(|e| e % self.downsample != 0) {
            return Err(Error::invalid(
                "encode",
                format!("extents {volume:?} not divisible by {}", self.downsample),
            ));
        }
        Ok(volume.map(|e| e / self.downsample))
    }
}

/// Quantized latents: the selected codebook rows laid out channel-first and
/// their indices in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub quantized: Tensor,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Codec {
    config: CodecConfig,
    pub params: ParamStore,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    codebook: ParamId,
}

/// Training outcome: per-iteration total loss.
#[derive(Debug, Clone)]
pub struct CodecHistory {
    pub loss: Vec<f64>,
}

fn add_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Conv {
    let fan_in = cin * k * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    Conv {
        w: store.add(
            format!("{name}.w"),
            Tensor::uniform(&[cout, cin, k, k, k], -bound, bound, rng),
        ),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
    }
}

/// Nearest codebook row per site (Euclidean; ties go to the lowest index).
/// `z` is `[d, ...sites]`, `codebook` is `[K, d]`.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<LatentCode> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::invalid("quantize", "codebook is empty"));
    }
    let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
    if z.shape()[0] != d {
        return Err(Error::shape("quantize", "latent channels", d, z.shape()[0]));
    }
    let sites = z.len() / d;
    let (zd, cb) = (z.data(), codebook.data());
    let mut indices = Vec::with_capacity(sites);
    let mut out = vec![0.0; z.len()];
    for p in 0..sites {
        let mut best = (f64::INFINITY, 0);
        for j in 0..k {
            let dist: f64 = (0..d).map(|c| (zd[c * sites + p] - cb[j * d + c]).powi(2)).sum();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        indices.push(best.1);
        for c in 0..d {
            out[c * sites + p] = cb[best.1 * d + c];
        }
    }
    Ok(LatentCode {
        quantized: Tensor::new(z.shape(), out)?,
        indices,
    })
}

impl Codec {
    pub fn new(config: &CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let s = config.stages();
        let mut encoder = vec![add_conv(&mut store, "codec.enc.in", 1, ch[0], 3, rng)];
        for i in 0..s {
            encoder.push(add_conv(&mut store, &format!("codec.enc.{i}"), ch[i], ch[i + 1], 3, rng));
        }
        encoder.push(add_conv(&mut store, "codec.enc.out", ch[s], config.latent_dim, 1, rng));

        let mut decoder = vec![add_conv(&mut store, "codec.dec.in", config.latent_dim, ch[s], 3, rng)];
        decoder.push(add_conv(&mut store, "codec.dec.mid", ch[s], ch[s], 3, rng));
        for i in (0..s).rev() {
            decoder.push(add_conv(&mut store, &format!("codec.dec.{i}"), ch[i + 1], ch[i], 3, rng));
        }
        decoder.push(add_conv(&mut store, "codec.dec.out", ch[0], 1, 3, rng));

        let codebook = store.add(
            CODEBOOK_NAME,
            Tensor::uniform(&[config.codebook_size, config.latent_dim], -0.5, 0.5, rng),
        );
        Ok(Codec {
            config: config.clone(),
            params: store,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.value(self.codebook)
    }

    fn conv(&self, tape: &mut Tape, c: Conv, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, c.w);
        let b = tape.param(&self.params, c.b);
        tape.conv3d(x, w, Some(b))
    }

    /// Records the encoder on `tape`; `x` is `[1, D, H, W]`.
    pub fn encode_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::invalid("encode", format!("expected [1, D, H, W], got {s:?}")));
        }
        self.config.latent_shape([s[1], s[2], s[3]])?;
        let last = self.encoder.len() - 1;
        let mut h = self.conv(tape, self.encoder[0], x)?;
        h = tape.silu(h);
        for c in &self.encoder[1..last] {
            h = tape.avg_pool(h, &[1, 2, 2, 2])?;
            h = self.conv(tape, *c, h)?;
            h = tape.silu(h);
        }
        self.conv(tape, self.encoder[last], h)
    }

    /// Records the decoder on `tape`; `z` is `[d, D', H', W']`.
    pub fn decode_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let d = tape.value(z).shape()[0];
        if d != self.config.latent_dim {
            return Err(Error::shape("decode", "latent channels", self.config.latent_dim, d));
        }
        let last = self.decoder.len() - 1;
        let mut h = self.conv(tape, self.decoder[0], z)?;
        h = tape.silu(h);
        h = self.conv(tape, self.decoder[1], h)?;
        h = tape.silu(h);
        for c in &self.decoder[2..last] {
            h = tape.upsample_nearest(h, &[1, 2, 2, 2])?;
            h = self.conv(tape, *c, h)?;
            h = tape.silu(h);
        }
        self.conv(tape, self.decoder[last], h)
    }

    /// Continuous (pre-quantization) latents of a `[1, D, H, W]` volume.
    pub fn encode(&self, volume: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(volume.clone());
        let z = self.encode_var(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn quantize(&self, z: &Tensor) -> Result<LatentCode> {
        quantize(z, self.codebook())
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Tensor> {
        self.decode_latent(&code.quantized)
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_var(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, volume: &Tensor) -> Result<Tensor> {
        self.decode(&self.quantize(&self.encode(volume)?)?)
    }

    /// Records one training loss: reconstruction MSE, codebook loss and the
    /// weighted commitment loss. Returns the loss and the code used.
    pub fn loss_var(&self, tape: &mut Tape, volume: &Tensor) -> Result<(Var, LatentCode)> {
        let x = tape.constant(volume.clone());
        let z = self.encode_var(tape, x)?;
        let code = self.quantize(tape.value(z))?;
        let zq = tape.straight_through(z, &code.quantized)?;
        let recon = self.decode_var(tape, zq)?;
        let rec = tape.mse_loss(recon, x)?;

        let table = tape.param(&self.params, self.codebook);
        let site_shape = tape.value(z).shape()[1..].to_vec();
        let rows = tape.gather_rows(table, &code.indices, &site_shape)?;
        let z_fixed = tape.detach(z);
        let cb = tape.mse_loss(rows, z_fixed)?;
        let q_fixed = tape.constant(code.quantized.clone());
        let commit = tape.mse_loss(z, q_fixed)?;
        let commit = tape.scale(commit, self.config.commitment);

        let loss = tape.add(rec, cb)?;
        Ok((tape.add(loss, commit)?, code))
    }

    /// Moves codebook rows unused over the last window onto random encoder
    /// outputs of `volume`.
    fn restart_dead_codes(&mut self, usage: &[usize], volume: &Tensor, rng: &mut impl Rng) -> Result<usize> {
        let z = self.encode(volume)?;
        let d = self.config.latent_dim;
        let sites = z.len() / d;
        let dead: Vec<usize> = (0..usage.len()).filter(|&j| usage[j] == 0).collect();
        let cb = &mut self.params.get_mut(self.codebook).value;
        for &j in &dead {
            let p = rng.gen_range(0..sites);
            for c in 0..d {
                cb.data_mut()[j * d + c] = z.data()[c * sites + p] + 1e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        Ok(dead.len())
    }

    /// Seeds the codebook with distinct encoder outputs of `volume`.
    fn init_codebook(&mut self, volume: &Tensor, rng: &mut impl Rng) -> Result<()> {
        let z = self.encode(volume)?;
        let d = self.config.latent_dim;
        let k = self.config.codebook_size;
        let sites = z.len() / d;
        let picks = sample(rng, sites, k.min(sites)).into_vec();
        let cb = &mut self.params.get_mut(self.codebook).value;
        for j in 0..k {
            let p = picks[j % picks.len()];
            for c in 0..d {
                cb.data_mut()[j * d + c] = z.data()[c * sites + p] + 1e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        Ok(())
    }
}

/// Restart window for unused codebook rows.
pub const RESTART_EVERY: usize = 100;

/// Optimisation settings for [`train_codec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTraining {
    pub iters: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for CodecTraining {
    fn default() -> Self {
        CodecTraining {
            iters: 1000,
            lr: 3e-3,
            cosine_decay: false,
        }
    }
}

impl CodecTraining {
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.cosine_decay {
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / self.iters as f64).cos())
        } else {
            self.lr
        }
    }
}

/// Trains a fresh codec, cycling through `dataset` one volume per iteration.
/// Codebook rows unused over the last [`RESTART_EVERY`] iterations are moved
/// onto random encoder outputs.
pub fn train_codec(
    config: &CodecConfig,
    dataset: &[Tensor],
    opts: &CodecTraining,
    rng: &mut impl Rng,
) -> Result<(Codec, CodecHistory)> {
    if dataset.is_empty() {
        return Err(Error::invalid("train_codec", "dataset is empty"));
    }
    let mut codec = Codec::new(config, rng)?;
    codec.init_codebook(&dataset[0], rng)?;
    let mut adam = Adam::new(opts.lr);
    let mut history = CodecHistory { loss: Vec::with_capacity(opts.iters) };
    let mut usage = vec![0usize; config.codebook_size];
    for it in 0..opts.iters {
        let volume = &dataset[it % dataset.len()];
        adam.lr = opts.lr_at(it);
        codec.params.zero_grad();
        let mut tape = Tape::new();
        let (loss, code) = codec.loss_var(&mut tape, volume)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("codec loss became {value} at iteration {it}")));
        }
        tape.backward(loss, &mut codec.params)?;
        adam.step(&mut codec.params)?;
        history.loss.push(value);
        for &i in &code.indices {
            usage[i] += 1;
        }
        if (it + 1) % RESTART_EVERY == 0 && it + 1 < opts.iters {
            codec.restart_dead_codes(&usage, volume, rng)?;
            usage.fill(0);
        }
    }
    Ok((codec, history))
}
