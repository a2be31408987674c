//! Binary checkpoints for a trained [`Model`].
//!
//! Layout: the magic `VPCK`, a format-version byte, a little-endian `u32`
//! header length, a JSON header, then tensor records. Each record is a
//! `u16` name length, the UTF-8 name, a `u8` rank, `u64` extents, and the
//! payload as `f64` little-endian values. Denoiser parameters are followed by
//! their two Adam moment buffers (`<name>#m`, `<name>#v`) so training can
//! resume exactly; codec parameters carry no moments. The schedule is stored
//! as its raw beta table.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{Codec, CodecConfig};
use crate::denoiser::{build_denoiser, DenoiserConfig, Variant};
use crate::error::{Error, Result};
use crate::inpaint::LatentSpace;
use crate::optim::ParamStore;
use crate::pipeline::Model;
use crate::schedule::{NoiseSchedule, PredictionTarget, SigmaMode};
use crate::tensor::Tensor;
use crate::volume::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const BETAS: &str = "schedule.betas";

/// A model plus the training progress needed to resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Training iterations completed.
    pub iterations: usize,
    /// Caller-defined metadata (run configuration, hashes).
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tool_version: String,
    denoiser: DenoiserConfig,
    sigma_mode: SigmaMode,
    prediction_target: PredictionTarget,
    codec: Option<CodecConfig>,
    latent_scale: Option<f64>,
    adam_step: u64,
    iterations: usize,
    meta: Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap())).map_err(|_| bad("extent overflows"))
    }

    fn tensor(&mut self, expected: &str) -> Result<Tensor> {
        let n = self.u16()?;
        let name = std::str::from_utf8(self.take(n)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        if name != expected {
            return Err(bad(format!("expected tensor {expected:?}, found {name:?}")));
        }
        let rank = self.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("shape overflows"))?;
        let data = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
    }
}

fn check_shape(name: &str, got: &Tensor, want: &Tensor) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(bad(format!(
            "{name}: stored shape {:?} does not match the configured {:?}",
            got.shape(),
            want.shape()
        )));
    }
    Ok(())
}

fn read_store(r: &mut Reader, store: &mut ParamStore, with_moments: bool) -> Result<()> {
    for p in store.iter_mut() {
        let value = r.tensor(&p.name)?;
        check_shape(&p.name, &value, &p.value)?;
        p.value = value;
        if with_moments {
            let m = r.tensor(&format!("{}#m", p.name))?;
            let v = r.tensor(&format!("{}#v", p.name))?;
            check_shape(&p.name, &m, &p.value)?;
            check_shape(&p.name, &v, &p.value)?;
            p.first_moment = m;
            p.second_moment = v;
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let header = Header {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            denoiser: model.denoiser.config().clone(),
            sigma_mode: model.schedule.sigma_mode(),
            prediction_target: model.schedule.prediction_target(),
            codec: model.latent.as_ref().map(|l| l.codec.config().clone()),
            latent_scale: model.latent.as_ref().map(|l| l.scale),
            adam_step: model.denoiser.params.step,
            iterations: self.iterations,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let betas = model.schedule.betas();
        put_tensor(&mut out, BETAS, &Tensor::new(&[betas.len()], betas.to_vec())?);
        for p in model.denoiser.params.iter() {
            put_tensor(&mut out, &p.name, &p.value);
            put_tensor(&mut out, &format!("{}#m", p.name), &p.first_moment);
            put_tensor(&mut out, &format!("{}#v", p.name), &p.second_moment);
        }
        if let Some(latent) = &model.latent {
            for p in latent.codec.params.iter() {
                put_tensor(&mut out, &p.name, &p.value);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("header: {e}")))?;

        let betas = r.tensor(BETAS)?;
        let schedule = NoiseSchedule::from_betas(betas.data().to_vec())?
            .with_sigma_mode(header.sigma_mode)
            .with_prediction_target(header.prediction_target);

        // Parameter values are overwritten below, so the init draw is irrelevant.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut denoiser = build_denoiser(&header.denoiser, &mut rng)?;
        read_store(&mut r, &mut denoiser.params, true)?;
        denoiser.params.step = header.adam_step;

        let latent = match (header.codec, header.latent_scale) {
            (Some(cfg), Some(scale)) => {
                let mut codec = Codec::new(&cfg, &mut rng)?;
                read_store(&mut r, &mut codec.params, false)?;
                Some(LatentSpace { codec, scale })
            }
            (None, None) => None,
            _ => return Err(bad("codec config and latent scale must appear together")),
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if (header.denoiser.variant == Variant::UnetLatent3D) != latent.is_some() {
            return Err(bad(format!("codec presence does not fit variant {}", header.denoiser.variant)));
        }
        Ok(Checkpoint {
            model: Model {
                denoiser,
                schedule,
                latent,
            },
            iterations: header.iterations,
            meta: header.meta,
        })
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
