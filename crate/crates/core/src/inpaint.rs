//! Conditioning, training and sampling for every inpainting variant.
//!
//! Images live in `[0, 1]` on disk and in `[-1, 1]` inside the diffusion
//! process. The network sees `X_t = (x_t, b, m[, x_prev])` concatenated along
//! channels, where `b = x ⊙ ¬m` is the known part of the image. Slice-wise
//! variants run one chain per slice that touches the mask; volumetric variants
//! run one chain per volume, in image, latent or wavelet coefficient space.
//! Every sampler finishes by copying the known voxels back from the ground
//! truth, so the output equals it bitwise outside the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::codec::Codec;
use crate::denoiser::{Denoiser, Variant};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::schedule::{NoiseSchedule, PredictionTarget};
use crate::tensor::Tensor;
use crate::volume::{composite, Volume};
use crate::wavelet::{dwt3, idwt3, WaveletCoeffs};

/// Space in which a variant runs its diffusion chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Image,
    Latent,
    Wavelet,
}

impl Domain {
    pub fn of(variant: Variant) -> Domain {
        match variant {
            Variant::UnetLatent3D => Domain::Latent,
            Variant::UnetWavelet3D => Domain::Wavelet,
            _ => Domain::Image,
        }
    }
}

/// Default network output for a variant: clean coefficients for the wavelet
/// variant, noise for the others. A run may override it through its
/// schedule.
pub fn default_prediction_target(variant: Variant) -> PredictionTarget {
    match variant {
        Variant::UnetWavelet3D => PredictionTarget::X0,
        _ => PredictionTarget::Epsilon,
    }
}

/// Maps `[0, 1]` intensities to the `[-1, 1]` diffusion range.
pub fn to_model_range(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_range(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// The conditioning channels that accompany `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub mask: Tensor,
    pub masked_image: Tensor,
    pub prev_slice: Option<Tensor>,
    pub domain: Domain,
}

impl ConditioningBundle {
    /// Image-space bundle from a ground-truth tensor and a binary mask of the
    /// same shape, both single-channel. `b` is zero inside the mask.
    pub fn image(gt: &Tensor, mask: &Tensor, prev_slice: Option<Tensor>) -> Result<Self> {
        if gt.shape() != mask.shape() {
            return Err(Error::invalid(
                "conditioning",
                format!("image {:?} and mask {:?} differ", gt.shape(), mask.shape()),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("conditioning", "mask must be binary"));
        }
        let masked_image = to_model_range(gt).zip_map(mask, |x, m| if m != 0.0 { 0.0 } else { x })?;
        Ok(ConditioningBundle {
            mask: mask.clone(),
            masked_image,
            prev_slice,
            domain: Domain::Image,
        })
    }

    /// Wavelet-space bundle: the image-space `b` and `m` each transformed.
    pub fn wavelet(gt: &Tensor, mask: &Tensor) -> Result<Self> {
        let img = Self::image(gt, mask, None)?;
        Ok(ConditioningBundle {
            mask: dwt3(&img.mask)?.into_tensor(),
            masked_image: dwt3(&img.masked_image)?.into_tensor(),
            prev_slice: None,
            domain: Domain::Wavelet,
        })
    }

    /// Latent-space bundle: `b` and `m` pushed through the codec encoder.
    pub fn latent(space: &LatentSpace, gt: &Tensor, mask: &Tensor) -> Result<Self> {
        let img = Self::image(gt, mask, None)?;
        let b = gt.zip_map(mask, |x, m| if m != 0.0 { 0.0 } else { x })?;
        Ok(ConditioningBundle {
            mask: space.encode(&img.mask)?,
            masked_image: space.encode(&b)?,
            prev_slice: None,
            domain: Domain::Latent,
        })
    }
}

/// Stacks `(x_t, b, m[, x_prev])` along channels. The previous slice is
/// required by, and only accepted for, the sequential 2D variant.
pub fn assemble_conditioning(x_t: &Tensor, bundle: &ConditioningBundle, variant: Variant) -> Result<Tensor> {
    if Domain::of(variant) != bundle.domain {
        return Err(Error::invalid(
            "assemble_conditioning",
            format!("{variant} runs in {:?} space, bundle is {:?}", Domain::of(variant), bundle.domain),
        ));
    }
    let mut parts = vec![x_t, &bundle.masked_image, &bundle.mask];
    match (variant == Variant::Unet2DSeqPos, &bundle.prev_slice) {
        (true, Some(prev)) => parts.push(prev),
        (true, None) => return Err(Error::invalid("assemble_conditioning", "x_prev missing for Unet2DSeqPos")),
        (false, Some(_)) => {
            return Err(Error::invalid("assemble_conditioning", format!("{variant} takes no x_prev")))
        }
        (false, None) => {}
    }
    for p in &parts[1..] {
        if p.shape()[1..] != x_t.shape()[1..] {
            return Err(Error::invalid(
                "assemble_conditioning",
                format!("spatial extents {:?} and {:?} differ", &x_t.shape()[1..], &p.shape()[1..]),
            ));
        }
    }
    Tensor::concat(&parts)
}

/// Anything that maps an assembled input to a noise (or clean-signal)
/// estimate. `slice` is the depth index for slice-wise chains.
pub trait NoisePredictor: Sync {
    fn predict(&self, input: &Tensor, t: usize, slice: Option<usize>) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, input: &Tensor, t: usize, slice: Option<usize>) -> Result<Tensor> {
        let pos = if self.variant() == Variant::Unet2DSeqPos { slice } else { None };
        Denoiser::predict(self, input, t, pos)
    }
}

/// A trained codec plus the factor that brings its latents to unit scale.
#[derive(Debug, Clone)]
pub struct LatentSpace {
    pub codec: Codec,
    pub scale: f64,
}

impl LatentSpace {
    /// Chooses `scale` as the inverse standard deviation of the encoded
    /// dataset.
    pub fn fit(codec: Codec, dataset: &[Tensor]) -> Result<Self> {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for x in dataset {
            let z = codec.encode(x)?;
            sum += z.sum();
            sq += z.sum_squares();
            n += z.len();
        }
        if n == 0 {
            return Err(Error::invalid("latent_scale", "dataset is empty"));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        if std.is_nan() || std <= 1e-12 {
            return Err(Error::Numeric("latents have zero spread".into()));
        }
        Ok(LatentSpace { codec, scale: 1.0 / std })
    }

    /// Scaled continuous latents of a `[1, D, H, W]` volume in `[0, 1]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.codec.encode(x)?.scale(self.scale))
    }

    /// Undoes the scale, snaps to the codebook and decodes.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let code = self.codec.quantize(&z.scale(1.0 / self.scale))?;
        self.codec.decode(&code)
    }
}

/// Ground truth and mask for one inpainting problem.
#[derive(Debug, Clone)]
pub struct InpaintTask {
    pub ground_truth: Volume,
    pub mask: Volume,
    pub variant: Variant,
    pub schedule: NoiseSchedule,
}

impl InpaintTask {
    /// An all-zero mask is accepted; sampling then returns the input.
    pub fn new(ground_truth: Volume, mask: Volume, variant: Variant, schedule: NoiseSchedule) -> Result<Self> {
        if ground_truth.shape() != mask.shape() {
            return Err(Error::invalid(
                "inpaint_task",
                format!("volume {:?} and mask {:?} differ", ground_truth.shape(), mask.shape()),
            ));
        }
        if !mask.is_binary() {
            return Err(Error::invalid("inpaint_task", "mask must be binary"));
        }
        Ok(InpaintTask {
            ground_truth,
            mask,
            variant,
            schedule,
        })
    }

    /// Depth indices of slices containing at least one masked voxel.
    pub fn masked_slices(&self) -> Vec<usize> {
        (0..self.mask.shape()[0]).filter(|&z| self.mask.slice_nonzero(z) > 0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleOptions {
    pub seed: u64,
    pub store_intermediates: bool,
}

/// One reverse step as recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Slice index for slice-wise chains.
    pub slice: Option<usize>,
    pub t: usize,
    pub sigma: f64,
    /// Root-mean-square of the network output.
    pub prediction_rms: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Composited result: ground truth outside the mask.
    pub volume: Volume,
    /// Generator output in `[0, 1]` before compositing. Slices a slice-wise
    /// sampler never visited hold the ground truth.
    pub generated: Volume,
    /// Number of reverse chains executed.
    pub chains: usize,
    pub trace: Vec<StepRecord>,
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where and how one reverse chain runs.
#[derive(Debug, Clone, Copy)]
pub struct ChainSpec<'a> {
    pub schedule: &'a NoiseSchedule,
    pub shape: &'a [usize],
    /// Depth index handed to the model for slice-wise chains.
    pub slice: Option<usize>,
    /// Clamp the implied clean estimate to `[-c, c]` before each update.
    pub clip: Option<f64>,
}

/// Runs `x_T ~ N(0, I)` down to `x_0`, adding no noise at the last step.
/// `make_input` appends the conditioning channels to `x_t`.
pub fn reverse_chain(
    model: &dyn NoisePredictor,
    spec: &ChainSpec,
    rng: &mut impl Rng,
    trace: Option<&mut Vec<StepRecord>>,
    make_input: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let ChainSpec {
        schedule,
        shape,
        slice,
        clip,
    } = *spec;
    let mut local = Vec::new();
    let record = trace.is_some();
    let mut x = Tensor::randn(shape, rng);
    for t in (1..=schedule.steps()).rev() {
        let input = make_input(&x)?;
        let mut pred = model.predict(&input, t, slice)?;
        if pred.shape() != shape {
            return Err(Error::invalid(
                "reverse_chain",
                format!("model returned {:?}, expected {shape:?}", pred.shape()),
            ));
        }
        if record {
            local.push(StepRecord {
                slice,
                t,
                sigma: schedule.sigma(t)?,
                prediction_rms: (pred.sum_squares() / pred.len() as f64).sqrt(),
            });
        }
        if let Some(c) = clip {
            pred = match schedule.prediction_target() {
                PredictionTarget::Epsilon => {
                    let x0 = schedule.x0_from_eps(&x, t, &pred)?.map(|v| v.clamp(-c, c));
                    schedule.eps_from_x0(&x, t, &x0)?
                }
                PredictionTarget::X0 => pred.map(|v| v.clamp(-c, c)),
            };
        }
        let z = if t > 1 { Tensor::randn(shape, rng) } else { Tensor::zeros(shape) };
        x = schedule.reverse_step(&x, t, &pred, &z)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sample became non-finite at t = {t}")));
        }
    }
    if let Some(trace) = trace {
        trace.extend(local);
    }
    Ok(x)
}

fn finish(task: &InpaintTask, generated: &Tensor, chains: usize, trace: Vec<StepRecord>) -> Result<SampleOutput> {
    let generated = Volume::from_tensor(&from_model_range(generated))?;
    let volume = composite(&generated, &task.ground_truth, &task.mask)?
        .with_meta("variant", task.variant.name())
        .with_meta("T", task.schedule.steps());
    Ok(SampleOutput {
        volume,
        generated,
        chains,
        trace,
    })
}

fn passthrough(task: &InpaintTask) -> SampleOutput {
    let mut volume = task.ground_truth.clone().with_meta("variant", task.variant.name());
    volume = volume.with_meta("T", task.schedule.steps());
    SampleOutput {
        generated: task.ground_truth.clone(),
        volume,
        chains: 0,
        trace: Vec::new(),
    }
}

fn expect_variant(task: &InpaintTask, allowed: &[Variant], op: &'static str) -> Result<()> {
    if allowed.contains(&task.variant) {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("cannot sample {}", task.variant)))
    }
}

/// Independent chains for every slice touching the mask. Each slice draws
/// from its own stream of the seed, so the result does not depend on the
/// order or parallelism of the chains.
pub fn sample_2d_slicewise(model: &dyn NoisePredictor, task: &InpaintTask, opts: &SampleOptions) -> Result<SampleOutput> {
    expect_variant(task, &[Variant::Unet2D], "sample_2d_slicewise")?;
    let slices = task.masked_slices();
    if slices.is_empty() {
        return Ok(passthrough(task));
    }
    let results: Vec<Result<(usize, Tensor, Vec<StepRecord>)>> = slices
        .par_iter()
        .map(|&z| {
            let gt = task.ground_truth.slice_tensor(z);
            let bundle = ConditioningBundle::image(&gt, &task.mask.slice_tensor(z), None)?;
            let mut rng = chain_rng(opts.seed, z as u64);
            let mut trace = Vec::new();
            let x = reverse_chain(
                model,
                &ChainSpec {
                    schedule: &task.schedule,
                    shape: gt.shape(),
                    slice: Some(z),
                    clip: Some(1.0),
                },
                &mut rng,
                opts.store_intermediates.then_some(&mut trace),
                |x| assemble_conditioning(x, &bundle, task.variant),
            )?;
            Ok((z, x, trace))
        })
        .collect();
    let mut generated = to_model_range(&task.ground_truth.to_tensor());
    let mut trace = Vec::new();
    let plane = task.mask.shape()[1] * task.mask.shape()[2];
    for r in results {
        let (z, x, t) = r?;
        generated.data_mut()[z * plane..(z + 1) * plane].copy_from_slice(x.data());
        trace.extend(t);
    }
    finish(task, &generated, slices.len(), trace)
}

/// Slices in ascending depth order, each conditioned on the slice below it
/// as it stands after earlier slices were filled in. Slice 0 sees zeros.
pub fn sample_2d_seqpos(model: &dyn NoisePredictor, task: &InpaintTask, opts: &SampleOptions) -> Result<SampleOutput> {
    expect_variant(task, &[Variant::Unet2DSeqPos], "sample_2d_seqpos")?;
    let slices = task.masked_slices();
    if slices.is_empty() {
        return Ok(passthrough(task));
    }
    let [_, h, w] = task.mask.shape();
    let plane = h * w;
    // model-range working volume: known voxels now, samples once generated
    let mut working = ConditioningBundle::image(&task.ground_truth.to_tensor(), &task.mask.to_tensor(), None)?.masked_image;
    let mut trace = Vec::new();
    for &z in &slices {
        let prev = if z == 0 {
            Tensor::zeros(&[1, 1, h, w])
        } else {
            Tensor::new(&[1, 1, h, w], working.data()[(z - 1) * plane..z * plane].to_vec())?
        };
        let gt = task.ground_truth.slice_tensor(z);
        let mask = task.mask.slice_tensor(z);
        let bundle = ConditioningBundle::image(&gt, &mask, Some(prev))?;
        let mut rng = chain_rng(opts.seed, z as u64);
        let x = reverse_chain(
            model,
            &ChainSpec {
                schedule: &task.schedule,
                shape: gt.shape(),
                slice: Some(z),
                clip: Some(1.0),
            },
            &mut rng,
            opts.store_intermediates.then_some(&mut trace),
            |x| assemble_conditioning(x, &bundle, task.variant),
        )?;
        let dst = &mut working.data_mut()[z * plane..(z + 1) * plane];
        for ((d, &s), &m) in dst.iter_mut().zip(x.data()).zip(mask.data()) {
            if m != 0.0 {
                *d = s.clamp(-1.0, 1.0);
            }
        }
    }
    finish(task, &working, slices.len(), trace)
}

/// One chain over the whole volume (pseudo-3D and 3D networks).
pub fn sample_volume(model: &dyn NoisePredictor, task: &InpaintTask, opts: &SampleOptions) -> Result<SampleOutput> {
    expect_variant(task, &[Variant::UnetPseudo3D, Variant::Unet3D], "sample_volume")?;
    if task.mask.count_nonzero() == 0 {
        return Ok(passthrough(task));
    }
    let gt = task.ground_truth.to_tensor();
    let bundle = ConditioningBundle::image(&gt, &task.mask.to_tensor(), None)?;
    let mut trace = Vec::new();
    let x = reverse_chain(
        model,
        &ChainSpec {
            schedule: &task.schedule,
            shape: gt.shape(),
            slice: None,
            clip: Some(1.0),
        },
        &mut chain_rng(opts.seed, 0),
        opts.store_intermediates.then_some(&mut trace),
        |x| assemble_conditioning(x, &bundle, task.variant),
    )?;
    finish(task, &x, 1, trace)
}

/// One chain over scaled codec latents, decoded through the codebook.
pub fn sample_latent(
    space: &LatentSpace,
    model: &dyn NoisePredictor,
    task: &InpaintTask,
    opts: &SampleOptions,
) -> Result<SampleOutput> {
    expect_variant(task, &[Variant::UnetLatent3D], "sample_latent")?;
    if task.mask.count_nonzero() == 0 {
        return Ok(passthrough(task));
    }
    let gt = task.ground_truth.to_tensor();
    let bundle = ConditioningBundle::latent(space, &gt, &task.mask.to_tensor())?;
    let mut trace = Vec::new();
    let z = reverse_chain(
        model,
        &ChainSpec {
            schedule: &task.schedule,
            shape: bundle.mask.shape(),
            slice: None,
            clip: None,
        },
        &mut chain_rng(opts.seed, 0),
        opts.store_intermediates.then_some(&mut trace),
        |x| assemble_conditioning(x, &bundle, task.variant),
    )?;
    let decoded = space.decode(&z)?;
    finish(task, &to_model_range(&decoded), 1, trace)
}

/// One chain over the eight Haar subbands; the network predicts clean
/// coefficients.
pub fn sample_wavelet(model: &dyn NoisePredictor, task: &InpaintTask, opts: &SampleOptions) -> Result<SampleOutput> {
    expect_variant(task, &[Variant::UnetWavelet3D], "sample_wavelet")?;
    if task.mask.count_nonzero() == 0 {
        return Ok(passthrough(task));
    }
    let gt = task.ground_truth.to_tensor();
    let bundle = ConditioningBundle::wavelet(&gt, &task.mask.to_tensor())?;
    let mut trace = Vec::new();
    let coeffs = reverse_chain(
        model,
        &ChainSpec {
            schedule: &task.schedule,
            shape: bundle.mask.shape(),
            slice: None,
            clip: None,
        },
        &mut chain_rng(opts.seed, 0),
        opts.store_intermediates.then_some(&mut trace),
        |x| assemble_conditioning(x, &bundle, task.variant),
    )?;
    let x = idwt3(&WaveletCoeffs::new(coeffs)?);
    finish(task, &x, 1, trace)
}

/// Dispatches on the task's variant. `latent` is required for the latent
/// variant.
pub fn sample(
    model: &dyn NoisePredictor,
    latent: Option<&LatentSpace>,
    task: &InpaintTask,
    opts: &SampleOptions,
) -> Result<SampleOutput> {
    match task.variant {
        Variant::Unet2D => sample_2d_slicewise(model, task, opts),
        Variant::Unet2DSeqPos => sample_2d_seqpos(model, task, opts),
        Variant::UnetPseudo3D | Variant::Unet3D => sample_volume(model, task, opts),
        Variant::UnetWavelet3D => sample_wavelet(model, task, opts),
        Variant::UnetLatent3D => {
            let space = latent.ok_or_else(|| Error::Config("UnetLatent3D needs a trained codec".into()))?;
            sample_latent(space, model, task, opts)
        }
    }
}

/// Input, regression target and step for one training draw.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Tensor,
    pub target: Tensor,
    pub t: usize,
    pub slice: Option<usize>,
}

/// Draws `t`, `ε` and (for slice-wise variants) a slice that touches the
/// mask, and builds the network input and target for `task`.
pub fn make_example(task: &InpaintTask, latent: Option<&LatentSpace>, rng: &mut impl Rng) -> Result<TrainingExample> {
    let steps = task.schedule.steps();
    let variant = task.variant;
    let (x0, bundle, slice) = match Domain::of(variant) {
        Domain::Image if variant.is_slice_wise() => {
            let slices = task.masked_slices();
            let z = if slices.is_empty() {
                rng.gen_range(0..task.mask.shape()[0])
            } else {
                slices[rng.gen_range(0..slices.len())]
            };
            let gt = task.ground_truth.slice_tensor(z);
            let prev = (variant == Variant::Unet2DSeqPos).then(|| {
                if z == 0 {
                    Tensor::zeros(gt.shape())
                } else {
                    to_model_range(&task.ground_truth.slice_tensor(z - 1))
                }
            });
            let bundle = ConditioningBundle::image(&gt, &task.mask.slice_tensor(z), prev)?;
            (to_model_range(&gt), bundle, Some(z))
        }
        Domain::Image => {
            let gt = task.ground_truth.to_tensor();
            let bundle = ConditioningBundle::image(&gt, &task.mask.to_tensor(), None)?;
            (to_model_range(&gt), bundle, None)
        }
        Domain::Wavelet => {
            let gt = task.ground_truth.to_tensor();
            let bundle = ConditioningBundle::wavelet(&gt, &task.mask.to_tensor())?;
            (dwt3(&to_model_range(&gt))?.into_tensor(), bundle, None)
        }
        Domain::Latent => {
            let space = latent.ok_or_else(|| Error::Config("UnetLatent3D needs a trained codec".into()))?;
            let gt = task.ground_truth.to_tensor();
            let bundle = ConditioningBundle::latent(space, &gt, &task.mask.to_tensor())?;
            (space.encode(&gt)?, bundle, None)
        }
    };
    let t = rng.gen_range(1..=steps);
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = task.schedule.forward_diffuse(&x0, t, &eps)?;
    let input = assemble_conditioning(&x_t, &bundle, variant)?;
    let target = match task.schedule.prediction_target() {
        PredictionTarget::Epsilon => eps,
        PredictionTarget::X0 => x0,
    };
    Ok(TrainingExample {
        input,
        target,
        t,
        slice,
    })
}

/// Mean squared error of a model on one example, without gradients.
pub fn example_loss(model: &dyn NoisePredictor, example: &TrainingExample) -> Result<f64> {
    let pred = model.predict(&example.input, example.t, example.slice)?;
    Ok(pred.sub(&example.target)?.sum_squares() / pred.len() as f64)
}

/// One optimisation step on the mean loss over `tasks`, one fresh draw per
/// task. Returns that loss.
pub fn train_step(
    denoiser: &mut Denoiser,
    adam: &Adam,
    tasks: &[&InpaintTask],
    latent: Option<&LatentSpace>,
    rng: &mut impl Rng,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    denoiser.params.zero_grad();
    let mut total = 0.0;
    let weight = 1.0 / tasks.len() as f64;
    for task in tasks {
        if task.variant != denoiser.variant() {
            return Err(Error::invalid(
                "train_step",
                format!("task is for {}, network is {}", task.variant, denoiser.variant()),
            ));
        }
        let ex = make_example(task, latent, rng)?;
        let pos = if task.variant == Variant::Unet2DSeqPos { ex.slice } else { None };
        let mut tape = Tape::new();
        let input = tape.constant(ex.input);
        let out = denoiser.forward(&mut tape, input, ex.t, pos)?;
        let target = tape.constant(ex.target);
        let loss = tape.mse_loss(out, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} at t = {}", ex.t)));
        }
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled, &mut denoiser.params)?;
        total += value * weight;
    }
    adam.step(&mut denoiser.params)?;
    Ok(total)
}
