//! Training and sampling orchestration shared by the command line and the
//! benchmark: dataset draws, the training loop, and the mean-fill baseline.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, CodecConfig, CodecTraining};
use crate::denoiser::{build_denoiser, Denoiser, DenoiserConfig, Variant};
use crate::error::{Error, Result};
use crate::inpaint::{sample, train_step, InpaintTask, LatentSpace, SampleOptions, SampleOutput};
use crate::optim::Adam;
use crate::schedule::NoiseSchedule;
use crate::volume::{gen_mask, MaskSpec, Volume};

/// Independent random stream for one training iteration. Drawing each
/// iteration from its own stream makes a resumed run identical to an
/// uninterrupted one.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iters: usize,
    pub lr: f64,
    /// Draws averaged per optimizer step.
    pub batch: usize,
    /// Shape and size of the masks drawn for training; `seed` is ignored.
    pub mask: MaskSpec,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            iters: 3000,
            lr: 1e-3,
            batch: 1,
            mask: MaskSpec::default(),
        }
    }
}

/// A fresh mask for `phantom`, retrying with derived seeds if the first
/// draw has no admissible region.
pub fn draw_mask(spec: &MaskSpec, phantom: &Volume, rng: &mut impl Rng) -> Result<Volume> {
    let mut last = None;
    for _ in 0..8 {
        let spec = MaskSpec {
            seed: rng.gen(),
            ..*spec
        };
        match gen_mask(&spec, phantom) {
            Ok(m) => return Ok(m),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Denoiser, schedule and (for the latent variant) codec of one method.
#[derive(Debug, Clone)]
pub struct Model {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub latent: Option<LatentSpace>,
}

impl Model {
    pub fn new(
        config: &DenoiserConfig,
        schedule: NoiseSchedule,
        latent: Option<LatentSpace>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if (config.variant == Variant::UnetLatent3D) != latent.is_some() {
            return Err(Error::Config(format!(
                "{} {} a codec",
                config.variant,
                if latent.is_some() { "does not take" } else { "needs" }
            )));
        }
        Ok(Model {
            denoiser: build_denoiser(config, rng)?,
            schedule,
            latent,
        })
    }

    pub fn variant(&self) -> Variant {
        self.denoiser.variant()
    }

    pub fn task(&self, ground_truth: Volume, mask: Volume) -> Result<InpaintTask> {
        InpaintTask::new(ground_truth, mask, self.variant(), self.schedule.clone())
    }

    /// Runs iterations `range` of a training run seeded with `seed`, calling
    /// `on_step(iteration, loss)` after each.
    pub fn train(
        &mut self,
        phantoms: &[Volume],
        settings: &TrainSettings,
        seed: u64,
        range: Range<usize>,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<()> {
        if phantoms.is_empty() {
            return Err(Error::invalid("train", "no training volumes"));
        }
        let adam = Adam::new(settings.lr);
        for it in range {
            let mut rng = iteration_rng(seed, it);
            let mut tasks = Vec::with_capacity(settings.batch.max(1));
            for _ in 0..settings.batch.max(1) {
                let gt = &phantoms[rng.gen_range(0..phantoms.len())];
                let mask = draw_mask(&settings.mask, gt, &mut rng)?;
                tasks.push(self.task(gt.clone(), mask)?);
            }
            let refs: Vec<&InpaintTask> = tasks.iter().collect();
            let loss = train_step(&mut self.denoiser, &adam, &refs, self.latent.as_ref(), &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("iteration {it}: {msg}")),
                    other => other,
                })?;
            on_step(it, loss);
        }
        Ok(())
    }

    pub fn sample(&self, task: &InpaintTask, opts: &SampleOptions) -> Result<SampleOutput> {
        sample(&self.denoiser, self.latent.as_ref(), task, opts)
    }
}

/// Trains a codec on `phantoms` and fits its latent scale.
pub fn fit_latent_space(
    config: &CodecConfig,
    training: &CodecTraining,
    phantoms: &[Volume],
    seed: u64,
) -> Result<LatentSpace> {
    let data: Vec<_> = phantoms.iter().map(Volume::to_tensor).collect();
    let (codec, _) = train_codec(config, &data, training, &mut ChaCha8Rng::seed_from_u64(seed))?;
    LatentSpace::fit(codec, &data)
}

/// Baseline inpainting: every masked voxel set to the mean of the unmasked
/// ones.
pub fn mean_fill(ground_truth: &Volume, mask: &Volume) -> Result<Volume> {
    if ground_truth.shape() != mask.shape() {
        return Err(Error::invalid("mean_fill", "volume and mask shapes differ"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&v, &m) in ground_truth.data().iter().zip(mask.data()) {
        if m == 0.0 {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("mean_fill", "mask covers the whole volume"));
    }
    let fill = (sum / n as f64) as f32;
    let mut out = ground_truth.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m != 0.0 {
            *v = fill;
        }
    }
    Ok(out)
}
