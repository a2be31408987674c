#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxelpaint::autodiff::{Tape, Var};
use voxelpaint::optim::ParamStore;
use voxelpaint::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// Largest relative error between analytic and central-difference gradients
/// of `sum(f(inputs) * weights)` with respect to every input, probing at most
/// `probes` entries per input.
pub fn grad_check<F>(inputs: &[Tensor], probes: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_check_with(&ParamStore::new(), inputs, probes, f)
}

/// [`grad_check`] for closures that also read parameters from `params`.
pub fn grad_check_with<F>(params: &ParamStore, inputs: &[Tensor], probes: usize, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    const H: f64 = 1e-5;
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        randn(tape.value(out).shape(), 999)
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss, &mut params.clone()).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let stride = (input.len() / probes).max(1);
        for j in (0..input.len()).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

use voxelpaint::denoiser::{build_denoiser, Denoiser, DenoiserConfig, Variant};
use voxelpaint::inpaint::{to_model_range, Domain, LatentSpace, NoisePredictor};
use voxelpaint::schedule::{NoiseSchedule, PredictionTarget};
use voxelpaint::volume::Volume;
use voxelpaint::wavelet::dwt3;

/// Smallest layout exercising every structural feature of a variant.
pub fn tiny_config(variant: Variant) -> DenoiserConfig {
    let (in_channels, out_channels) = DenoiserConfig::io_channels(variant, 2);
    DenoiserConfig {
        variant,
        in_channels,
        out_channels,
        base_channels: 8,
        channel_mults: vec![1, 2],
        res_blocks_per_scale: 1,
        depth_kernel: 3,
        time_embed_dim: 8,
    }
}

/// Input shape `[C, D, H, W]` of at most 4³ spatial voxels for a variant.
pub fn tiny_input_shape(config: &DenoiserConfig) -> [usize; 4] {
    let d = if config.variant.is_slice_wise() { 1 } else { 4 };
    [config.in_channels, d, 4, 4]
}

/// Replaces the zero-initialised output projection with random weights so
/// that outputs and input gradients are nonzero.
pub fn randomize_output(net: &mut Denoiser, seed: u64) {
    let mut r = rng(seed);
    for p in net.params.iter_mut() {
        if p.name.starts_with("out.conv") {
            p.value = Tensor::uniform(p.value.shape(), -0.5, 0.5, &mut r);
        }
    }
}

pub fn tiny_denoiser(variant: Variant, seed: u64) -> Denoiser {
    let mut net = build_denoiser(&tiny_config(variant), &mut rng(seed)).unwrap();
    randomize_output(&mut net, seed + 1);
    net
}

pub fn slice_pos_for(variant: Variant) -> Option<usize> {
    (variant == Variant::Unet2DSeqPos).then_some(3)
}

/// Worst relative finite-difference error of `sum(net(x) * w)` with respect
/// to the input and `probes` entries of every parameter tensor.
pub fn denoiser_grad_check(net: &Denoiser, x: &Tensor, t: usize, probes: usize) -> f64 {
    const H: f64 = 1e-5;
    let pos = slice_pos_for(net.variant());
    let out_shape = net.predict(x, t, pos).unwrap().shape().to_vec();
    let weights = randn(&out_shape, 4242);
    let loss_of = |net: &Denoiser, x: &Tensor| -> f64 {
        let out = net.predict(x, t, pos).unwrap();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut net_g = net.clone();
    net_g.params.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = net_g.forward(&mut tape, xv, t, pos).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss, &mut net_g.params).unwrap();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let gx = tape.grad(xv).unwrap().clone();
    let stride = (x.len() / probes).max(1);
    for j in (0..x.len()).step_by(stride) {
        let mut p = x.clone();
        p.data_mut()[j] += H;
        let mut m = x.clone();
        m.data_mut()[j] -= H;
        let numeric = (loss_of(net, &p) - loss_of(net, &m)) / (2.0 * H);
        worst = worst.max(rel(gx.data()[j], numeric));
    }
    for id in net.params.ids().collect::<Vec<_>>() {
        let n = net.params.value(id).len();
        let stride = (n / probes).max(1);
        for j in (0..n).step_by(stride) {
            let mut plus = net.clone();
            plus.params.get_mut(id).value.data_mut()[j] += H;
            let mut minus = net.clone();
            minus.params.get_mut(id).value.data_mut()[j] -= H;
            let numeric = (loss_of(&plus, x) - loss_of(&minus, x)) / (2.0 * H);
            worst = worst.max(rel(net_g.params.get(id).grad.data()[j], numeric));
        }
    }
    worst
}

/// Worst finite-difference error of every differentiable tape op on small
/// random inputs.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("add", grad_check(&[randn(&[3, 2], 1), randn(&[3, 2], 2)], 6, |t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", grad_check(&[randn(&[3, 2], 1), randn(&[3, 2], 2)], 6, |t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", grad_check(&[randn(&[3, 2], 1), randn(&[3, 2], 2)], 6, |t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", grad_check(&[randn(&[4], 3)], 4, |t, v| t.scale(v[0], -1.7))),
        ("add_channel", grad_check(&[randn(&[3, 2, 2], 4), randn(&[3], 5)], 12, |t, v| t.add_channel(v[0], v[1]).unwrap())),
        ("silu", grad_check(&[randn(&[2, 3, 3], 6)], 18, |t, v| t.silu(v[0]))),
        (
            "conv2d",
            grad_check(&[randn(&[2, 4, 3], 7), randn(&[3, 2, 3, 3], 8), randn(&[3], 9)], 24, |t, v| {
                t.conv2d(v[0], v[1], Some(v[2])).unwrap()
            }),
        ),
        (
            "conv2d_volume",
            grad_check(&[randn(&[2, 2, 3, 4], 10), randn(&[2, 2, 3, 3], 11)], 24, |t, v| {
                t.conv2d(v[0], v[1], None).unwrap()
            }),
        ),
        (
            "conv_axis1d",
            grad_check(&[randn(&[2, 4, 2, 3], 12), randn(&[3, 2, 3], 13), randn(&[3], 14)], 24, |t, v| {
                t.conv_axis1d(v[0], v[1], Some(v[2]), 1).unwrap()
            }),
        ),
        (
            "conv3d",
            grad_check(&[randn(&[2, 3, 4, 3], 15), randn(&[2, 2, 3, 3, 3], 16), randn(&[2], 17)], 24, |t, v| {
                t.conv3d(v[0], v[1], Some(v[2])).unwrap()
            }),
        ),
        (
            "conv3d_pointwise",
            grad_check(&[randn(&[3, 2, 2, 2], 18), randn(&[2, 3, 1, 1, 1], 19)], 24, |t, v| {
                t.conv3d(v[0], v[1], None).unwrap()
            }),
        ),
        (
            "linear",
            grad_check(&[randn(&[4], 20), randn(&[3, 4], 21), randn(&[3], 22)], 12, |t, v| {
                t.linear(v[0], v[1], Some(v[2])).unwrap()
            }),
        ),
        (
            "group_norm",
            grad_check(&[randn(&[4, 3, 2, 2], 23), randn(&[4], 24), randn(&[4], 25)], 48, |t, v| {
                t.group_norm(v[0], 2, v[1], v[2], false).unwrap()
            }),
        ),
        (
            "group_norm_per_slice",
            grad_check(&[randn(&[4, 3, 2, 2], 26), randn(&[4], 27), randn(&[4], 28)], 48, |t, v| {
                t.group_norm(v[0], 2, v[1], v[2], true).unwrap()
            }),
        ),
        (
            "concat",
            grad_check(&[randn(&[1, 2, 2], 29), randn(&[2, 2, 2], 30)], 8, |t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
        ),
        ("channel_slice", grad_check(&[randn(&[3, 2, 2], 31)], 12, |t, v| t.channel_slice(v[0], 1, 2).unwrap())),
        ("avg_pool", grad_check(&[randn(&[2, 2, 4, 4], 32)], 32, |t, v| t.avg_pool(v[0], &[1, 2, 2, 2]).unwrap())),
        ("upsample", grad_check(&[randn(&[2, 1, 2, 2], 33)], 8, |t, v| t.upsample_nearest(v[0], &[1, 2, 2, 2]).unwrap())),
        ("mse", grad_check(&[randn(&[3, 3], 34), randn(&[3, 3], 35)], 9, |t, v| t.mse_loss(v[0], v[1]).unwrap())),
        ("sum", grad_check(&[randn(&[2, 3], 36)], 6, |t, v| t.sum(v[0]))),
        ("gather_rows", grad_check(&[randn(&[4, 2], 37)], 8, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1], &[2, 2]).unwrap())),
    ]
}

/// Largest deviation between a pseudo-3D net (identity depth kernels of size
/// `depth_kernel`, weights copied from a 2D net) and that 2D net applied
/// slice by slice.
pub fn equivalence_error(depth_kernel: usize, seed: u64) -> f64 {
    let mut c2 = tiny_config(Variant::Unet2D);
    c2.time_embed_dim = 16;
    let mut c3 = c2.clone();
    c3.variant = Variant::UnetPseudo3D;
    c3.depth_kernel = depth_kernel;
    let mut net2 = build_denoiser(&c2, &mut rng(seed)).unwrap();
    randomize_output(&mut net2, seed + 1);
    let mut net3 = build_denoiser(&c3, &mut rng(seed + 2)).unwrap();
    let copied = net3.params.copy_matching(&net2.params);
    assert_eq!(copied, net2.params.len());

    let (d, h, w) = (5, 8, 8);
    let x = randn(&[3, d, h, w], seed + 3);
    let t = 17;
    let vol = net3.predict(&x, t, None).unwrap();
    let mut worst: f64 = 0.0;
    for z in 0..d {
        let slice: Vec<f64> = (0..3)
            .flat_map(|c| x.data()[(c * d + z) * h * w..(c * d + z + 1) * h * w].to_vec())
            .collect();
        let out = net2.predict(&Tensor::new(&[3, 1, h, w], slice).unwrap(), t, None).unwrap();
        for i in 0..h * w {
            worst = worst.max((out.data()[i] - vol.data()[z * h * w + i]).abs());
        }
    }
    worst
}


/// Knows the clean signal of the chain and returns the exact noise (or the
/// clean signal itself for x0-prediction) implied by the current `x_t`.
pub struct Oracle {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
    pub slice_wise: bool,
}

impl Oracle {
    pub fn new(variant: Variant, gt: &Volume, space: &LatentSpace, schedule: NoiseSchedule) -> Self {
        let img = gt.to_tensor();
        let x0 = match Domain::of(variant) {
            Domain::Image => to_model_range(&img),
            Domain::Wavelet => dwt3(&to_model_range(&img)).unwrap().into_tensor(),
            Domain::Latent => space.encode(&img).unwrap(),
        };
        Oracle {
            x0,
            schedule,
            slice_wise: variant.is_slice_wise(),
        }
    }
}

impl NoisePredictor for Oracle {
    fn predict(&self, input: &Tensor, t: usize, slice: Option<usize>) -> voxelpaint::Result<Tensor> {
        let x0 = if self.slice_wise {
            let z = slice.unwrap();
            let s = self.x0.shape();
            let plane = s[2] * s[3];
            Tensor::new(&[1, 1, s[2], s[3]], self.x0.data()[z * plane..(z + 1) * plane].to_vec())?
        } else {
            self.x0.clone()
        };
        let x_t = input.channel_slice(0, x0.shape()[0])?;
        match self.schedule.prediction_target() {
            PredictionTarget::Epsilon => self.schedule.eps_from_x0(&x_t, t, &x0),
            PredictionTarget::X0 => Ok(x0),
        }
    }
}
