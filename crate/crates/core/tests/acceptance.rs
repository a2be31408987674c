//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Arguments not starting with
//! `-` act as name filters, e.g. `cargo test --test acceptance -- c06`.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use voxelpaint::cli::{self, Cli, CHECKPOINT_FILE, EVAL_CSV, LOSS_FILE};
use voxelpaint::codec::{quantize, train_codec, CodecConfig, CodecTraining};
use voxelpaint::denoiser::{DenoiserConfig, Variant};
use voxelpaint::inpaint::{to_model_range, InpaintTask, SampleOptions};
use voxelpaint::metrics::{dice, mse_masked, psnr_from_mse, psnr_masked, ssim_masked, SsimParams};
use voxelpaint::pipeline::{fit_latent_space, mean_fill, Model, TrainSettings};
use voxelpaint::schedule::{DiffusionState, NoiseSchedule, PredictionTarget, ScheduleConfig};
use voxelpaint::tensor::Tensor;
use voxelpaint::volume::{gen_mask, gen_phantom, MaskSpec, PhantomSpec, Volume};
use voxelpaint::wavelet::{dwt3, idwt3};

type Outcome = Result<String, String>;

/// State handed from earlier criteria to later ones.
#[derive(Default)]
struct Shared {
    latent_model: Option<Model>,
    held_out: Vec<(Volume, Volume)>,
    pipeline_evals: Vec<PathBuf>,
    pipeline_report: Option<String>,
    _dirs: Vec<tempfile::TempDir>,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs(a: &Volume, b: &Volume) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------

fn gradient_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    for (name, err) in op_gradient_errors() {
        if err >= 1e-3 {
            failures.push(format!("{name} {err:.1e}"));
        }
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let mut worst_net = (Variant::Unet2D, 0.0f64);
    for v in Variant::ALL {
        let net = tiny_denoiser(v, 31);
        let shape = tiny_input_shape(net.config());
        assert!(shape[1..].iter().all(|&e| e <= 4));
        let err = denoiser_grad_check(&net, &randn(&shape, 32), 5, 3);
        if err >= 1e-3 {
            failures.push(format!("{v} {err:.1e}"));
        }
        if err > worst_net.1 {
            worst_net = (v, err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 120.0,
        format!(
            "worst op {} {:.1e}, worst network {} {:.1e}, {secs:.1}s of 120s{}",
            worst.0,
            worst.1,
            worst_net.0,
            worst_net.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; over tolerance: {}", failures.join(", "))
            }
        ),
    )
}

fn marginal_consistency(_: &mut Shared) -> Outcome {
    const DRAWS: usize = 100_000;
    let start = Instant::now();
    let mut worst_z: f64 = 0.0;
    for steps in [2usize, 3, 5] {
        for s in [
            ScheduleConfig::desk(steps, PredictionTarget::Epsilon).build().unwrap(),
            NoiseSchedule::linear(steps, 0.05, 0.3).unwrap(),
        ] {
            let mut r = rng(100 + steps as u64);
            let x0 = 0.7;
            let mut x = Tensor::full(&[DRAWS], x0);
            for t in 1..=steps {
                x = s.q_transition_sample(&x, t, &Tensor::randn(&[DRAWS], &mut r)).unwrap();
                let n = DRAWS as f64;
                let mean = x.mean();
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let ab = s.alpha_bar(t).unwrap();
                let (em, ev) = (ab.sqrt() * x0, 1.0 - ab);
                let z_mean = (mean - em).abs() / (ev / n).sqrt();
                let z_var = (var - ev).abs() / (ev * (2.0 / (n - 1.0)).sqrt());
                worst_z = worst_z.max(z_mean).max(z_var);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_z < 3.0 && secs < 60.0,
        format!("largest deviation {worst_z:.2} standard errors over T in {{2,3,5}}, {secs:.1}s of 60s"),
    )
}

fn closed_loop_oracle(_: &mut Shared) -> Outcome {
    let schedule = ScheduleConfig::desk(5, PredictionTarget::Epsilon).build().unwrap();
    // the bare chain in f64 with z = 0
    let x0 = to_model_range(&phantom8(3).to_tensor());
    let x_t = schedule.forward_diffuse(&x0, 5, &randn(x0.shape(), 4)).unwrap();
    let zero = Tensor::zeros(x0.shape());
    let mut state = DiffusionState::start(x_t, &schedule);
    while !state.is_done() {
        let eps = schedule.eps_from_x0(&state.x, state.t, &x0).unwrap();
        state.step(&schedule, &eps, &zero).unwrap();
    }
    let chain_err = state.x.max_abs_diff(&x0);

    let mut parts = vec![format!("raw chain {chain_err:.1e}")];
    let mut worst = chain_err;
    for v in [Variant::Unet2D, Variant::Unet2DSeqPos, Variant::UnetPseudo3D, Variant::Unet3D] {
        let gt = phantom8(6);
        let task = InpaintTask::new(gt.clone(), block_mask8(2, 6), v, schedule.clone()).unwrap();
        let oracle = Oracle {
            x0: to_model_range(&gt.to_tensor()),
            schedule: schedule.clone(),
            slice_wise: v.is_slice_wise(),
        };
        let out = voxelpaint::inpaint::sample(&oracle, None, &task, &SampleOptions::default()).unwrap();
        let err = max_abs(&out.volume, &gt);
        worst = worst.max(err);
        parts.push(format!("{v} {err:.1e}"));
    }
    check(worst < 1e-8, format!("max abs error at T=5: {}", parts.join(", ")))
}

fn wavelet_suite(_: &mut Shared) -> Outcome {
    let (mut rt, mut energy): (f64, f64) = (0.0, 0.0);
    for n in [4usize, 8, 16] {
        for seed in 0..5 {
            let v = randn(&[1, n, n, n], 1000 * n as u64 + seed);
            let c = dwt3(&v).unwrap();
            rt = rt.max(idwt3(&c).max_abs_diff(&v));
            energy = energy.max((c.energy() - v.sum_squares()).abs() / v.sum_squares());
        }
    }
    check(
        rt < 1e-10 && energy < 1e-9,
        format!("roundtrip {rt:.1e} (< 1e-10), Parseval relative {energy:.1e} (< 1e-9)"),
    )
}

fn pseudo3d_equivalence(_: &mut Shared) -> Outcome {
    let errs: Vec<(usize, f64)> = [1usize, 3, 5].iter().map(|&k| (k, equivalence_error(k, 50 + k as u64))).collect();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    check(
        worst < 1e-10,
        format!(
            "max abs error {}",
            errs.iter().map(|(k, e)| format!("k={k}: {e:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// toy benchmark

const BENCH_SHAPE: [usize; 3] = [16, 16, 16];
const BENCH_T: usize = 200;
const BENCH_SEED: u64 = 42;

fn bench_iters(v: Variant) -> usize {
    match v {
        Variant::Unet3D => 600,
        Variant::UnetPseudo3D => 400,
        _ => 1500,
    }
}

/// Masked MSE of each held-out task in the recorded reference run, in
/// `Variant::ALL` order. Runs must stay within 20% above these.
const REFERENCE_MSE: [[f64; 4]; 6] = [
    [0.002679, 0.000871, 0.005410, 0.055062],
    [0.016278, 0.002232, 0.001029, 0.071239],
    [0.002697, 0.000984, 0.004302, 0.052479],
    [0.005011, 0.001341, 0.004831, 0.040840],
    [0.006024, 0.002401, 0.004540, 0.076806],
    [0.011042, 0.010250, 0.008630, 0.058138],
];

fn bench_phantom(seed: u64) -> Volume {
    gen_phantom(&PhantomSpec {
        seed,
        shape: BENCH_SHAPE,
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn toy_benchmark(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let train: Vec<Volume> = (0..16).map(|i| bench_phantom(42_000 + i)).collect();
    shared.held_out = (0..4)
        .map(|j| {
            let g = bench_phantom(42_100 + j);
            let m = gen_mask(
                &MaskSpec {
                    seed: 42_200 + j,
                    ..MaskSpec::default()
                },
                &g,
            )
            .unwrap();
            (g, m)
        })
        .collect();
    let baseline: Vec<f64> = shared
        .held_out
        .iter()
        .map(|(g, m)| mse_masked(&mean_fill(g, m).unwrap(), g, m).unwrap())
        .collect();

    let mut lines = Vec::new();
    let mut measured = Vec::new();
    let mut ok = true;
    for (vi, v) in Variant::ALL.into_iter().enumerate() {
        let t0 = Instant::now();
        let latent = (v == Variant::UnetLatent3D).then(|| {
            let codec_training = CodecTraining {
                iters: 600,
                lr: 3e-3,
                cosine_decay: true,
            };
            fit_latent_space(&CodecConfig::default(), &codec_training, &train, BENCH_SEED).unwrap()
        });
        let schedule = ScheduleConfig::desk(BENCH_T, PredictionTarget::X0).build().unwrap();
        let config = DenoiserConfig::desk(v, CodecConfig::default().latent_dim);
        let mut model = Model::new(&config, schedule, latent, &mut ChaCha8Rng::seed_from_u64(BENCH_SEED)).unwrap();
        let settings = TrainSettings {
            iters: bench_iters(v),
            ..TrainSettings::default()
        };
        model.train(&train, &settings, BENCH_SEED, 0..settings.iters, |_, _| {}).unwrap();

        let mut mses = [0.0; 4];
        let mut kept = true;
        for (j, (g, m)) in shared.held_out.iter().enumerate() {
            let task = model.task(g.clone(), m.clone()).unwrap();
            let out = model
                .sample(
                    &task,
                    &SampleOptions {
                        seed: BENCH_SEED + j as u64,
                        store_intermediates: false,
                    },
                )
                .unwrap();
            mses[j] = mse_masked(&out.volume, g, m).unwrap();
            kept &= out
                .volume
                .data()
                .iter()
                .zip(g.data())
                .zip(m.data())
                .all(|((o, g), &m)| m != 0.0 || o.to_bits() == g.to_bits());
        }
        let beats = mses.iter().zip(&baseline).all(|(e, b)| e < b);
        let pinned = mses.iter().zip(&REFERENCE_MSE[vi]).all(|(e, r)| *e <= 1.2 * r);
        ok &= beats && pinned && kept;
        lines.push(format!(
            "{v} [{}]{}{}{} {:.0}s",
            mses.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" "),
            if beats { "" } else { " LOSES TO MEAN-FILL" },
            if pinned { "" } else { " ABOVE REFERENCE" },
            if kept { "" } else { " KNOWN VOXELS CHANGED" },
            t0.elapsed().as_secs_f64()
        ));
        measured.push(mses);
        if v == Variant::UnetLatent3D {
            shared.latent_model = Some(model);
        }
    }
    if let Ok(path) = std::env::var("VOXELPAINT_REFERENCE_OUT") {
        fs::write(path, format!("{measured:?}\n")).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs < 3600.0,
        format!(
            "masked MSE per task vs mean-fill [{}]: {}; {secs:.0}s of 3600s",
            baseline.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>().join(" "),
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn metrics_oracles(_: &mut Shared) -> Outcome {
    let mut r = rng(7);
    let shape = [6, 7, 8];
    let random = |r: &mut ChaCha8Rng| Volume::new(shape, (0..336).map(|_| r.gen::<f32>()).collect()).unwrap();
    let mask_of = |r: &mut ChaCha8Rng, p: f64| {
        let mut m = Volume::new(shape, (0..336).map(|_| if r.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap();
        m.data_mut()[0] = 1.0;
        m
    };
    let p = SsimParams::default();
    let mut failures = Vec::new();

    for _ in 0..5 {
        let a = random(&mut r);
        let m = mask_of(&mut r, 0.3);
        if ssim_masked(&a, &a, &m, &p).unwrap() != 1.0 {
            failures.push("ssim(a,a) != 1");
        }
    }
    if (psnr_from_mse(0.01, 1.0) - 20.0).abs() > 1e-12 {
        failures.push("psnr(0.01) != 20");
    }
    let half = Volume::full(shape, 0.5);
    let three_q = Volume::full(shape, 0.75);
    let m = mask_of(&mut r, 0.5);
    if mse_masked(&half, &three_q, &m).unwrap() != 0.0625 {
        failures.push("mse of constant offset");
    }
    if (psnr_masked(&half, &three_q, &m, 1.0).unwrap() - 10.0 * 16f64.log10()).abs() > 1e-12 {
        failures.push("psnr of constant offset");
    }
    if !psnr_masked(&half, &half, &m, 1.0).unwrap().is_infinite() {
        failures.push("psnr of identical volumes");
    }

    let row = |v: [f32; 8]| Volume::new([1, 2, 4], v.to_vec()).unwrap();
    let x = row([1., 1., 1., 1., 0., 0., 0., 0.]);
    let y = row([0., 0., 1., 1., 1., 1., 0., 0.]);
    let z = row([0., 0., 0., 0., 0., 0., 1., 1.]);
    if dice(&x, &z).unwrap() != 0.0 || dice(&x, &y).unwrap() != 0.5 || dice(&x, &x).unwrap() != 1.0 {
        failures.push("dice 0/0.5/1");
    }

    let mut sym: f64 = 0.0;
    let mut inv = true;
    for _ in 0..5 {
        let (a, b) = (random(&mut r), random(&mut r));
        let m = mask_of(&mut r, 0.2);
        sym = sym
            .max((ssim_masked(&a, &b, &m, &p).unwrap() - ssim_masked(&b, &a, &m, &p).unwrap()).abs())
            .max((mse_masked(&a, &b, &m).unwrap() - mse_masked(&b, &a, &m).unwrap()).abs())
            .max((psnr_masked(&a, &b, &m, 1.0).unwrap() - psnr_masked(&b, &a, &m, 1.0).unwrap()).abs());
        let x = mask_of(&mut r, 0.4);
        sym = sym.max((dice(&x, &m).unwrap() - dice(&m, &x).unwrap()).abs());

        // changing voxels outside the mask leaves MSE/PSNR unchanged; SSIM
        // only reads voxels within a window radius of the mask
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for ((va, vb), &mv) in a2.data_mut().iter_mut().zip(b2.data_mut()).zip(m.data()) {
            if mv == 0.0 {
                *va = r.gen();
                *vb = r.gen();
            }
        }
        inv &= mse_masked(&a, &b, &m).unwrap() == mse_masked(&a2, &b2, &m).unwrap();
        inv &= psnr_masked(&a, &b, &m, 1.0).unwrap() == psnr_masked(&a2, &b2, &m, 1.0).unwrap();
        let mut point = Volume::zeros([16, 16, 16]);
        point.set(8, 8, 8, 1.0);
        let big_a = Volume::new([16; 3], (0..4096).map(|_| r.gen::<f32>()).collect()).unwrap();
        let big_b = Volume::new([16; 3], (0..4096).map(|_| r.gen::<f32>()).collect()).unwrap();
        let mut far_a = big_a.clone();
        far_a.set(0, 0, 0, 0.123);
        far_a.set(15, 15, 1, 0.456);
        inv &= ssim_masked(&big_a, &big_b, &point, &p).unwrap() == ssim_masked(&far_a, &big_b, &point, &p).unwrap();
    }
    if sym > 1e-12 {
        failures.push("symmetry");
    }
    if !inv {
        failures.push("mask restriction");
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("self-SSIM exact, 20 dB at 0.01, Dice 0/0.5/1, invariance exact, asymmetry {sym:.1e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn vq_codec(shared: &mut Shared) -> Outcome {
    let v = bench_phantom(1).to_tensor();
    let (codec, _) = train_codec(&CodecConfig::default(), std::slice::from_ref(&v), &CodecTraining::default(), &mut rng(11)).unwrap();
    let overfit = codec.reconstruct(&v).unwrap().sub(&v).unwrap().sum_squares() / v.len() as f64;

    let z = codec.encode(&v).unwrap();
    let code = codec.quantize(&z).unwrap();
    let again = quantize(&code.quantized, codec.codebook()).unwrap();
    let idempotent = again.indices == code.indices && again.quantized == code.quantized;

    let Some(model) = shared.latent_model.as_ref() else {
        return Err(format!("overfit MSE {overfit:.1e}; latent model from the toy benchmark unavailable"));
    };
    // Sampling error is scored the way every output is scored, as masked MSE
    // of the composited volume, against the codec's own reconstruction on
    // the same mask. The whole-volume comparison of the raw decoder output is
    // reported alongside.
    let latent = model.latent.as_ref().unwrap();
    let mut floor_ok = true;
    let mut masked = Vec::new();
    let mut whole = Vec::new();
    for (j, (g, m)) in shared.held_out.iter().enumerate() {
        let task = model.task(g.clone(), m.clone()).unwrap();
        let out = model
            .sample(
                &task,
                &SampleOptions {
                    seed: BENCH_SEED + j as u64,
                    store_intermediates: false,
                },
            )
            .unwrap();
        let recon = Volume::from_tensor(&latent.codec.reconstruct(&g.to_tensor()).unwrap()).unwrap();
        let err = mse_masked(&out.volume, g, m).unwrap();
        let floor = mse_masked(&recon, g, m).unwrap();
        floor_ok &= err >= floor;
        masked.push(format!("{err:.4}>={floor:.4}"));
        let everywhere = Volume::full(g.shape(), 1.0);
        whole.push(format!(
            "{:.4}/{:.4}",
            mse_masked(&out.generated, g, &everywhere).unwrap(),
            mse_masked(&recon, g, &everywhere).unwrap()
        ));
    }
    check(
        overfit < 1e-3 && idempotent && floor_ok,
        format!(
            "overfit MSE {overfit:.1e} (< 1e-3), quantization idempotent: {idempotent}, masked sample error vs codec floor: {} (whole-volume decoder output/floor: {})",
            masked.join(" "),
            whole.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// pipeline

fn pipeline_config() -> serde_json::Value {
    let mut variants = serde_json::Map::new();
    for v in Variant::ALL {
        let (cin, cout) = DenoiserConfig::io_channels(v, 2);
        variants.insert(
            v.name().into(),
            json!({ "denoiser": {
                "variant": v, "in_channels": cin, "out_channels": cout, "base_channels": 4,
                "channel_mults": [1, 2], "res_blocks_per_scale": 1, "depth_kernel": 3, "time_embed_dim": 8
            }}),
        );
    }
    json!({
        "seed": 5,
        "dataset": { "count": 3, "shape": [8, 8, 8] },
        "schedule": { "T": 6 },
        "train": { "iters": 5 },
        "checkpoint_every": 3,
        "codec": { "latent_dim": 2, "codebook_size": 4, "downsample": 2, "channels": [4, 4] },
        "codec_training": { "iters": 30 },
        "variants": variants
    })
}

fn cli_run(args: &[&str]) -> String {
    let mut full = vec!["voxelpaint"];
    full.extend_from_slice(args);
    cli::run(Cli::try_parse_from(full).unwrap()).unwrap()
}

/// phantom → train → sample → eval for all six variants, then report.
fn run_pipeline(root: &Path) -> (String, Vec<PathBuf>) {
    let cfg = root.join("run.json");
    fs::write(&cfg, pipeline_config().to_string()).unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let cfg = cfg.to_str().unwrap();
    cli_run(&["phantom", "--config", cfg, "--out", &p("train_data")]);
    cli_run(&["phantom", "--config", cfg, "--seed", "6", "--count", "2", "--out", &p("tasks")]);
    let mut evals = Vec::new();
    for v in Variant::ALL {
        let n = v.name();
        cli_run(&["train", "--config", cfg, "--variant", n, "--data", &p("train_data"), "--out", &p(&format!("train_{n}"))]);
        let ckpt = root.join(format!("train_{n}")).join(CHECKPOINT_FILE);
        cli_run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--data", &p("tasks"), "--out", &p(&format!("samples_{n}"))]);
        cli_run(&["eval", "--samples", &p(&format!("samples_{n}")), "--out", &p(&format!("eval_{n}"))]);
        evals.push(root.join(format!("eval_{n}")));
    }
    let evals_str: Vec<String> = evals.iter().map(|e| e.to_str().unwrap().to_string()).collect();
    let mut args = vec!["report"];
    args.extend(evals_str.iter().map(String::as_str));
    (cli_run(&args), evals)
}

fn files_by_name(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().to_str().unwrap().to_string();
        let keep = rel.ends_with(".vvol")
            || rel.ends_with(CHECKPOINT_FILE)
            || rel.ends_with(LOSS_FILE)
            || rel.ends_with(EVAL_CSV);
        if keep {
            out.push((rel, fs::read(&entry).unwrap()));
        }
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn reproducibility(shared: &mut Shared) -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (report_a, evals) = run_pipeline(a.path());
    let (report_b, _) = run_pipeline(b.path());
    let (fa, fb) = (files_by_name(a.path()), files_by_name(b.path()));
    let volumes = fa.iter().filter(|f| f.0.ends_with(".vvol")).count();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_set = fa.iter().map(|f| &f.0).eq(fb.iter().map(|f| &f.0));
    shared.pipeline_evals = evals;
    shared.pipeline_report = Some(report_a.clone());
    shared._dirs.push(a);
    shared._dirs.push(b);
    check(
        same_set && differing.is_empty() && report_a == report_b && volumes > 0,
        format!(
            "{} artifacts compared ({volumes} volumes) across two full six-variant runs: {}; report tables {}",
            fa.len(),
            if differing.is_empty() {
                "bitwise identical".to_string()
            } else {
                format!("differ in {}", differing.join(", "))
            },
            if report_a == report_b { "identical" } else { "differ" }
        ),
    )
}

fn parse_mean(cell: &str) -> f64 {
    let c = cell.trim().trim_matches('*');
    if c == "inf" {
        return f64::INFINITY;
    }
    c.split(" ± ").next().unwrap().parse().unwrap()
}

fn report_shape(shared: &mut Shared) -> Outcome {
    let Some(report) = shared.pipeline_report.clone() else {
        return Err("no report from the pipeline run".into());
    };
    let rows: Vec<&str> = report.lines().filter(|l| l.starts_with('|')).collect();
    let mut problems = Vec::new();
    if rows.len() != 8 {
        problems.push(format!("{} table lines, expected header + rule + 6", rows.len()));
    }
    if rows.first() != Some(&"| Method | SSIM ↑ | MSE ↓ | PSNR ↑ |") {
        problems.push("header".into());
    }
    let body: Vec<Vec<&str>> = rows
        .iter()
        .skip(2)
        .map(|r| r.trim_matches('|').split('|').map(str::trim).collect())
        .collect();
    for (row, v) in body.iter().zip(Variant::ALL) {
        if row.len() != 4 || row[0] != v.name() {
            problems.push(format!("row for {v}"));
        }
        for cell in &row[1..] {
            let plain = cell.trim_matches('*');
            if !(plain == "inf" || plain.split(" ± ").count() == 2) {
                problems.push(format!("{v} cell {cell:?} is not mean ± std"));
            }
        }
    }
    for (col, higher) in [(1usize, true), (2, false), (3, true)] {
        let means: Vec<f64> = body.iter().map(|r| parse_mean(r[col])).collect();
        let best = means.iter().copied().reduce(|a, b| if (b > a) == higher { b } else { a }).unwrap();
        for (r, m) in body.iter().zip(&means) {
            let bold = r[col].starts_with("**") && r[col].ends_with("**");
            // compare on the printed precision
            if bold != (*m == best) {
                problems.push(format!("bolding in column {col} row {}", r[0]));
            }
        }
    }
    let five = cli::cmd_report(&shared.pipeline_evals[1..], false).unwrap();
    if !five.contains(&format!("| {} | — | — | — |", Variant::ALL[0])) {
        problems.push("missing variant not marked".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "six rows, SSIM/MSE/PSNR as mean ± std, best per column bold, missing rows marked".into()
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------

fn phantom8(seed: u64) -> Volume {
    gen_phantom(&PhantomSpec {
        seed,
        shape: [8, 8, 8],
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn block_mask8(z0: usize, z1: usize) -> Volume {
    let mut m = Volume::zeros([8, 8, 8]);
    for z in z0..z1 {
        for y in 2..6 {
            for x in 2..6 {
                m.set(z, y, x, 1.0);
            }
        }
    }
    m
}

type Criterion = (&'static str, &'static str, fn(&mut Shared) -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("c01_gradient_suite", "gradient suite", gradient_suite),
        ("c02_marginal_consistency", "chain vs marginal moments", marginal_consistency),
        ("c03_closed_loop_oracle", "closed-loop noise oracle", closed_loop_oracle),
        ("c04_wavelet_suite", "wavelet roundtrip and energy", wavelet_suite),
        ("c05_pseudo3d_equivalence", "pseudo-3D equivalence", pseudo3d_equivalence),
        ("c06_toy_benchmark", "toy inpainting benchmark", toy_benchmark),
        ("c07_metrics_oracles", "metrics oracles", metrics_oracles),
        ("c08_vq_codec", "VQ codec", vq_codec),
        ("c09_reproducibility", "pipeline reproducibility", reproducibility),
        ("c10_report_shape", "report shape", report_shape),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str| {
        filters.is_empty()
            || filters.iter().any(|f| id.contains(f.as_str()))
            // later criteria build on the benchmark and the pipeline run
            || (id.starts_with("c06") && filters.iter().any(|f| f.contains("c08")))
            || (id.starts_with("c09") && filters.iter().any(|f| f.contains("c10")))
    };
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (id, title, f)) in criteria.into_iter().enumerate() {
        if !selected(id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut shared))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{:>2}] {title}: {detail} ({secs:.1}s)", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
