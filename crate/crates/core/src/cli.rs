//! The `voxelpaint` command line: run configuration, artifact manifests and
//! the five commands. Everything here is callable in-process; the binary only
//! parses arguments and maps errors to exit codes.
//!
//! Configuration precedence, lowest first: built-in defaults, the JSON file
//! given with `--config`, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::{CodecConfig, CodecTraining};
use crate::denoiser::{DenoiserConfig, Variant};
use crate::error::{Error, Result};
use crate::inpaint::{default_prediction_target, SampleOptions};
use crate::metrics::{summarize, MetricReport, SsimParams, Summary, CSV_HEADER};
use crate::pipeline::{draw_mask, fit_latent_space, Model, TrainSettings};
use crate::schedule::{PredictionTarget, ScheduleConfig, SigmaMode};
use crate::volume::{gen_phantom, load_volume, save_volume, write_atomic, MaskSpec, PhantomSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.vpck";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Phantoms written by `phantom`.
    pub count: usize,
    pub shape: [usize; 3],
    /// Masks paired with phantoms and drawn during training; `seed` is unused.
    pub mask: MaskSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 16,
            shape: [32, 32, 32],
            mask: MaskSpec::default(),
        }
    }
}

/// Schedule settings. Unset betas take the desk values for `T`; an unset
/// prediction target takes the variant's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub sigma_mode: SigmaMode,
    pub prediction_target: Option<PredictionTarget>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            steps: 200,
            beta_start: None,
            beta_end: None,
            sigma_mode: SigmaMode::Beta,
            prediction_target: None,
        }
    }
}

/// Per-variant settings that take precedence over the shared ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantOverrides {
    pub iters: Option<usize>,
    pub lr: Option<f64>,
    pub prediction_target: Option<PredictionTarget>,
    pub denoiser: Option<DenoiserConfig>,
}

/// Everything needed to reproduce a run. One file can describe a whole
/// six-variant comparison; `variant` (or `--variant`) selects the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSettings,
    /// Iterations between checkpoint writes during `train`.
    pub checkpoint_every: usize,
    pub codec: CodecConfig,
    pub codec_training: CodecTraining,
    pub variants: BTreeMap<Variant, VariantOverrides>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Unet2D,
            seed: 42,
            out: None,
            dataset: DatasetConfig::default(),
            schedule: ScheduleSection::default(),
            train: TrainSettings::default(),
            checkpoint_every: 500,
            codec: CodecConfig::default(),
            codec_training: CodecTraining::default(),
            variants: BTreeMap::new(),
        }
    }
}

/// The concrete settings of one variant after overrides are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub variant: Variant,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSettings,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Extents the denoiser sees for a dataset volume of `shape`.
fn network_extent(variant: Variant, shape: [usize; 3], codec: &CodecConfig) -> Result<[usize; 3]> {
    match variant {
        Variant::UnetLatent3D => codec.latent_shape(shape).map_err(|e| config_err(e.to_string())),
        Variant::UnetWavelet3D => {
            if shape.iter().any(|e| e % 2 != 0) {
                return Err(config_err(format!("wavelet variant needs even extents, got {shape:?}")));
            }
            Ok(shape.map(|e| e / 2))
        }
        _ => Ok(shape),
    }
}

impl RunConfig {
    /// Parses strict JSON (unknown keys are errors) and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let v = self.variant;
        let over = self.variants.get(&v).cloned().unwrap_or_default();
        let denoiser = over
            .denoiser
            .unwrap_or_else(|| DenoiserConfig::desk(v, self.codec.latent_dim));
        let target = over
            .prediction_target
            .or(self.schedule.prediction_target)
            .unwrap_or_else(|| default_prediction_target(v));
        let mut schedule = ScheduleConfig::desk(self.schedule.steps, target);
        if let Some(b) = self.schedule.beta_start {
            schedule.beta_start = b;
        }
        if let Some(b) = self.schedule.beta_end {
            schedule.beta_end = b;
        }
        schedule.sigma_mode = self.schedule.sigma_mode;
        let mut train = self.train.clone();
        if let Some(iters) = over.iters {
            train.iters = iters;
        }
        if let Some(lr) = over.lr {
            train.lr = lr;
        }
        Ok(ResolvedRun {
            variant: v,
            denoiser,
            schedule,
            train,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (key, over) in &self.variants {
            if let Some(d) = &over.denoiser {
                if d.variant != *key {
                    return Err(config_err(format!("variants.{key}.denoiser is configured for {}", d.variant)));
                }
            }
        }
        if self.dataset.count == 0 {
            return Err(config_err("dataset.count must be positive"));
        }
        if self.dataset.shape.contains(&0) {
            return Err(config_err("dataset.shape has a zero extent"));
        }
        let m = &self.dataset.mask;
        if !(0.0 < m.min_fraction && m.min_fraction <= m.max_fraction && m.max_fraction <= 1.0) {
            return Err(config_err("dataset.mask needs 0 < min_fraction <= max_fraction <= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err("checkpoint_every must be positive"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) || self.train.batch == 0 {
            return Err(config_err("train.lr must be positive and train.batch at least 1"));
        }
        self.codec.validate().map_err(|e| config_err(e.to_string()))?;
        for v in Variant::ALL {
            let r = RunConfig { variant: v, ..self.clone() }.resolve()?;
            if r.variant != self.variant && !self.variants.contains_key(&v) {
                continue;
            }
            r.denoiser.validate().map_err(|e| config_err(e.to_string()))?;
            if (r.denoiser.in_channels, r.denoiser.out_channels)
                != DenoiserConfig::io_channels(v, self.codec.latent_dim)
            {
                return Err(config_err(format!("{v}: denoiser channel counts do not match the conditioning")));
            }
            r.schedule.build().map_err(|e| config_err(e.to_string()))?;
            let extent = network_extent(v, self.dataset.shape, &self.codec)?;
            let div = r.denoiser.spatial_divisor();
            let pooled = if matches!(v, Variant::Unet2D | Variant::Unet2DSeqPos | Variant::UnetPseudo3D) {
                &extent[1..]
            } else {
                &extent[..]
            };
            if pooled.iter().any(|e| e % div != 0) {
                return Err(config_err(format!(
                    "{v}: network extents {extent:?} are not divisible by the pooling factor {div}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the variant selector and output
    /// directory blanked, so all arms of one comparison share a hash.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            variant: Variant::Unet2D,
            out: None,
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Manifests

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

/// Index of an artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl Manifest {
    fn new(kind: &str, config_hash: &str, variant: Option<Variant>, seed: u64) -> Self {
        Manifest {
            kind: kind.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            variant,
            seed,
            files: Vec::new(),
            extra: Map::new(),
        }
    }

    /// Records a file already written under `dir`.
    fn add(&mut self, dir: &Path, name: &str, meta: Map<String, Value>) -> Result<()> {
        self.files.push(FileEntry {
            path: name.into(),
            sha256: sha256_file(&dir.join(name))?,
            meta,
        });
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "manifest",
            msg: format!("{}: {e}", path.display()),
        })
    }

    /// Reads a manifest of the given kind and checks every listed file
    /// against its recorded digest.
    pub fn read_verified(dir: &Path, kind: &str) -> Result<Self> {
        let m = Self::read(dir)?;
        if m.kind != kind {
            return Err(Error::Format {
                what: "manifest",
                msg: format!("{} holds a {} artifact, expected {kind}", dir.display(), m.kind),
            });
        }
        for f in &m.files {
            let got = sha256_file(&dir.join(&f.path))?;
            if got != f.sha256 {
                return Err(Error::Format {
                    what: "manifest",
                    msg: format!("{}: digest mismatch for {}", dir.display(), f.path),
                });
            }
        }
        Ok(m)
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::io(
                dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "directory is not empty (pass --force to overwrite)",
                ),
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn meta(pairs: Value) -> Map<String, Value> {
    match pairs {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

// ---------------------------------------------------------------------------
// phantom

pub fn phantom_name(i: usize) -> String {
    format!("phantom_{i:03}.vvol")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:03}.vvol")
}

/// Writes `dataset.count` phantoms with paired masks and a manifest.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    prepare_dir(out, force)?;
    let hash = cfg.hash();
    let mut manifest = Manifest::new("dataset", &hash, None, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.dataset.count {
        let spec = PhantomSpec {
            seed: rng.gen(),
            shape: cfg.dataset.shape,
            ..PhantomSpec::default()
        };
        let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let phantom = gen_phantom(&spec)?.with_meta("config_hash", hash.clone());
        let mask = draw_mask(&cfg.dataset.mask, &phantom, &mut mask_rng)?.with_meta("config_hash", hash.clone());
        save_volume(&phantom, &out.join(phantom_name(i)))?;
        save_volume(&mask, &out.join(mask_name(i)))?;
        manifest.add(out, &phantom_name(i), meta(json!({"role": "phantom", "index": i, "phantom_seed": spec.seed})))?;
        manifest.add(out, &mask_name(i), meta(json!({"role": "mask", "index": i})))?;
    }
    manifest.extra.insert("count".into(), json!(cfg.dataset.count));
    manifest.extra.insert("shape".into(), json!(cfg.dataset.shape));
    manifest.write(out)?;
    Ok(manifest)
}

/// Phantom and mask paths of a dataset directory, in index order.
pub fn dataset_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let m = Manifest::read_verified(dir, "dataset")?;
    let mut phantoms = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for f in &m.files {
        let idx = f.meta.get("index").and_then(Value::as_u64).unwrap_or(0);
        match f.meta.get("role").and_then(Value::as_str) {
            Some("phantom") => phantoms.insert(idx, dir.join(&f.path)),
            Some("mask") => masks.insert(idx, dir.join(&f.path)),
            _ => None,
        };
    }
    let pairs: Vec<_> = phantoms
        .into_iter()
        .filter_map(|(i, p)| masks.remove(&i).map(|m| (p, m)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Format {
            what: "dataset",
            msg: format!("{} lists no phantom/mask pairs", dir.display()),
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// train

/// Stream offsets for the one-off draws of a training run; iteration `i`
/// uses stream `i`.
const INIT_STREAM: u64 = u64::MAX;
const CODEC_STREAM: u64 = u64::MAX - 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn read_loss_csv(path: &Path, keep: usize) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format { what: "loss csv", msg };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).take(keep) {
        let (it, loss) = line.split_once(',').ok_or_else(|| bad(format!("bad row {line:?}")))?;
        rows.push((
            it.parse().map_err(|_| bad(format!("bad iteration {it:?}")))?,
            loss.parse().map_err(|_| bad(format!("bad loss {loss:?}")))?,
        ));
    }
    if rows.len() != keep {
        return Err(bad(format!("{} holds {} rows, checkpoint expects {keep}", path.display(), rows.len())));
    }
    Ok(rows)
}

fn write_loss_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (it, loss) in rows {
        let _ = writeln!(s, "{it},{loss}");
    }
    write_atomic(path, s.as_bytes())
}

/// Trains the configured variant on the phantoms of `data`, writing
/// `checkpoint.vpck`, `loss.csv` and a manifest to `out` every
/// `checkpoint_every` iterations. With `resume`, continues from the
/// checkpoint already in `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool, force: bool) -> Result<TrainOutcome> {
    let run = cfg.resolve()?;
    let hash = cfg.hash();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let loss_path = out.join(LOSS_FILE);
    let dataset = Manifest::read(data)?;
    let phantoms = dataset_pairs(data)?
        .iter()
        .map(|(p, _)| load_volume(p))
        .collect::<Result<Vec<_>>>()?;

    let (mut model, start, mut losses) = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let stored = ckpt.meta.get("config_hash").and_then(Value::as_str).unwrap_or("");
        if stored != hash || ckpt.model.variant() != run.variant {
            return Err(config_err(format!(
                "cannot resume: checkpoint is {} with config {stored}, this run is {} with config {hash}",
                ckpt.model.variant(),
                run.variant
            )));
        }
        let losses = read_loss_csv(&loss_path, ckpt.iterations)?;
        (ckpt.model, ckpt.iterations, losses)
    } else {
        prepare_dir(out, force)?;
        let latent = if run.variant == Variant::UnetLatent3D {
            let seed = stream_rng(cfg.seed, CODEC_STREAM).gen();
            Some(fit_latent_space(&cfg.codec, &cfg.codec_training, &phantoms, seed)?)
        } else {
            None
        };
        let schedule = run.schedule.build()?;
        let model = Model::new(&run.denoiser, schedule, latent, &mut stream_rng(cfg.seed, INIT_STREAM))?;
        (model, 0, Vec::new())
    };

    // the output location is not part of the model
    let stored_cfg = RunConfig { out: None, ..cfg.clone() };
    let ckpt_meta = json!({
        "config_hash": hash,
        "config": serde_json::to_value(&stored_cfg).expect("config serializes"),
        "dataset_hash": dataset.config_hash,
    });
    let save = |model: &Model, done: usize, losses: &[(usize, f64)]| -> Result<()> {
        Checkpoint {
            model: model.clone(),
            iterations: done,
            meta: ckpt_meta.clone(),
        }
        .save(&ckpt_path)?;
        write_loss_csv(&loss_path, losses)?;
        let mut manifest = Manifest::new("checkpoint", &hash, Some(run.variant), cfg.seed);
        manifest.add(out, CHECKPOINT_FILE, meta(json!({"iterations": done})))?;
        manifest.add(out, LOSS_FILE, Map::new())?;
        manifest.extra.insert("dataset_hash".into(), json!(dataset.config_hash));
        manifest.write(out)
    };

    let mut done = start;
    while done < run.train.iters {
        let end = (done + cfg.checkpoint_every).min(run.train.iters);
        let result = model.train(&phantoms, &run.train, cfg.seed, done..end, |it, loss| losses.push((it, loss)));
        if let Err(e) = result {
            let last = if done > 0 || resume {
                format!("last good checkpoint {} at iteration {done}", ckpt_path.display())
            } else {
                "no checkpoint was written".to_string()
            };
            return Err(match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg}; {last}")),
                other => other,
            });
        }
        done = end;
        save(&model, done, &losses)?;
        eprintln!(
            "{}: iteration {done}/{} loss {:.6}",
            run.variant,
            run.train.iters,
            losses.last().map_or(f64::NAN, |l| l.1)
        );
    }
    if done == 0 {
        save(&model, 0, &losses)?;
    }
    Ok(TrainOutcome {
        iterations: done,
        final_loss: losses.last().map(|l| l.1),
        checkpoint: ckpt_path,
    })
}

// ---------------------------------------------------------------------------
// sample

pub fn sample_name(i: usize) -> String {
    format!("sample_{i:03}.vvol")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFiles {
    pub ground_truth: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct SampleArgs {
    /// Overrides the seed recorded in the checkpoint's configuration.
    pub seed: Option<u64>,
    /// Fail unless the checkpoint holds this variant.
    pub expect_variant: Option<Variant>,
    /// Record the per-step trace in the manifest.
    pub trace: bool,
    pub force: bool,
}

/// Inpaints every task with the checkpointed model. Task `i` is sampled with
/// seed `seed + i`.
pub fn cmd_sample(checkpoint: &Path, tasks: &[TaskFiles], out: &Path, args: &SampleArgs) -> Result<Manifest> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let variant = ckpt.model.variant();
    if let Some(v) = args.expect_variant {
        if v != variant {
            return Err(config_err(format!("checkpoint holds {variant}, but {v} was requested")));
        }
    }
    if tasks.is_empty() {
        return Err(config_err("no tasks to sample"));
    }
    let hash = ckpt.meta.get("config_hash").and_then(Value::as_str).unwrap_or("").to_string();
    let seed = match args.seed {
        Some(s) => s,
        None => ckpt.meta.pointer("/config/seed").and_then(Value::as_u64).unwrap_or(0),
    };
    prepare_dir(out, args.force)?;
    let mut manifest = Manifest::new("samples", &hash, Some(variant), seed);
    for (i, task_files) in tasks.iter().enumerate() {
        let gt = load_volume(&task_files.ground_truth)?;
        let mask = load_volume(&task_files.mask)?;
        let task = ckpt.model.task(gt, mask)?;
        let opts = SampleOptions {
            seed: seed.wrapping_add(i as u64),
            store_intermediates: args.trace,
        };
        let started = Instant::now();
        let result = ckpt.model.sample(&task, &opts)?;
        let wall = started.elapsed().as_secs_f64();
        let volume = result.volume.with_meta("config_hash", hash.clone());
        save_volume(&volume, &out.join(sample_name(i)))?;
        let mut m = meta(json!({
            "ground_truth": absolute(&task_files.ground_truth)?,
            "mask": absolute(&task_files.mask)?,
            "variant": variant,
            "seed": opts.seed,
            "T": ckpt.model.schedule.steps(),
            "chains": result.chains,
            "wall_clock_s": wall,
        }));
        if args.trace {
            let trace: Vec<Value> = result
                .trace
                .iter()
                .map(|r| json!({"slice": r.slice, "t": r.t, "sigma": r.sigma, "prediction_rms": r.prediction_rms}))
                .collect();
            m.insert("trace".into(), Value::Array(trace));
        }
        manifest.add(out, &sample_name(i), m)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// eval

/// Masked metrics of a single output.
pub fn cmd_eval_one(output: &Path, ground_truth: &Path, mask: &Path) -> Result<MetricReport> {
    MetricReport::evaluate(
        &load_volume(output)?,
        &load_volume(ground_truth)?,
        &load_volume(mask)?,
        &SsimParams::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: Option<Variant>,
    pub config_hash: String,
    pub rows: Vec<(String, MetricReport)>,
    pub ssim: Summary,
    pub mse: Summary,
    pub psnr: Summary,
}

impl EvalSummary {
    pub fn from_rows(variant: Option<Variant>, config_hash: String, rows: Vec<(String, MetricReport)>) -> Result<Self> {
        let col = |f: fn(&MetricReport) -> f64| {
            summarize(&rows.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())
                .ok_or_else(|| Error::invalid("eval", "no rows to summarize"))
        };
        Ok(EvalSummary {
            ssim: col(|r| r.ssim)?,
            mse: col(|r| r.mse)?,
            psnr: col(|r| r.psnr)?,
            variant,
            config_hash,
            rows,
        })
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for (name, r) in &self.rows {
            s.push_str(&r.csv_row(name));
            s.push('\n');
        }
        s
    }
}

/// Evaluates every output listed in a sample directory against its task,
/// writing `eval.csv`, `eval.json` (rows plus mean ± std) and a manifest.
pub fn cmd_eval_batch(samples: &Path, out: &Path, force: bool) -> Result<EvalSummary> {
    let sm = Manifest::read_verified(samples, "samples")?;
    let mut rows = Vec::new();
    for f in &sm.files {
        let path = |key: &str| -> Result<PathBuf> {
            f.meta.get(key).and_then(Value::as_str).map(PathBuf::from).ok_or_else(|| Error::Format {
                what: "manifest",
                msg: format!("{} has no {key}", f.path),
            })
        };
        let report = cmd_eval_one(&samples.join(&f.path), &path("ground_truth")?, &path("mask")?)?;
        rows.push((f.path.trim_end_matches(".vvol").to_string(), report));
    }
    let summary = EvalSummary::from_rows(sm.variant, sm.config_hash.clone(), rows)?;
    prepare_dir(out, force)?;
    write_atomic(&out.join(EVAL_CSV), summary.csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&out.join(EVAL_JSON), json.as_bytes())?;
    let mut manifest = Manifest::new("eval", &sm.config_hash, sm.variant, sm.seed);
    manifest.add(out, EVAL_CSV, Map::new())?;
    manifest.add(out, EVAL_JSON, Map::new())?;
    manifest.write(out)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// report

/// Reads an eval directory (or its `eval.csv`) back into a summary, with
/// variant and hash taken from the directory's manifest.
pub fn read_eval(path: &Path) -> Result<EvalSummary> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let m = Manifest::read_verified(&dir, "eval")?;
    let csv_path = dir.join(EVAL_CSV);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format {
            what: "metrics csv",
            msg: format!("{} does not start with {CSV_HEADER:?}", csv_path.display()),
        });
    }
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricReport::from_csv_row)
        .collect::<Result<Vec<_>>>()?;
    EvalSummary::from_rows(m.variant, m.config_hash, rows)
}

fn fmt_cell(s: &Summary, decimals: usize) -> String {
    if s.mean.is_infinite() {
        return "inf".into();
    }
    format!("{:.*} ± {:.*}", decimals, s.mean, decimals, s.std)
}

/// Markdown comparison table: one row per variant, columns SSIM↑ MSE↓ PSNR↑
/// as mean ± std, the best mean per column in bold and "—" for variants
/// without results. Refuses evaluations from different configurations
/// unless `allow_mixed`.
pub fn cmd_report(evals: &[PathBuf], allow_mixed: bool) -> Result<String> {
    let mut by_variant: BTreeMap<Variant, EvalSummary> = BTreeMap::new();
    for path in evals {
        let e = read_eval(path)?;
        let v = e.variant.ok_or_else(|| config_err(format!("{} has no variant", path.display())))?;
        if by_variant.insert(v, e).is_some() {
            return Err(config_err(format!("{v} appears more than once")));
        }
    }
    let hashes: std::collections::BTreeSet<&str> = by_variant.values().map(|e| e.config_hash.as_str()).collect();
    if hashes.len() > 1 && !allow_mixed {
        return Err(config_err(format!(
            "evaluations come from {} different configurations ({}); pass --allow-mixed to combine them",
            hashes.len(),
            hashes.iter().map(|h| &h[..h.len().min(12)]).collect::<Vec<_>>().join(", ")
        )));
    }

    type Col = (fn(&EvalSummary) -> &Summary, bool, usize);
    let cols: [Col; 3] = [(|e| &e.ssim, true, 4), (|e| &e.mse, false, 4), (|e| &e.psnr, true, 2)];
    let best: Vec<Option<f64>> = cols
        .iter()
        .map(|(get, higher, _)| {
            by_variant.values().map(|e| get(e).mean).filter(|m| !m.is_nan()).reduce(|a, b| {
                if (b > a) == *higher {
                    b
                } else {
                    a
                }
            })
        })
        .collect();

    let mut s = String::from("| Method | SSIM ↑ | MSE ↓ | PSNR ↑ |\n|---|---|---|---|\n");
    for v in Variant::ALL {
        let _ = write!(s, "| {v} |");
        match by_variant.get(&v) {
            None => s.push_str(" — | — | — |"),
            Some(e) => {
                for ((get, _, decimals), best) in cols.iter().zip(&best) {
                    let cell = fmt_cell(get(e), *decimals);
                    if Some(get(e).mean) == *best {
                        let _ = write!(s, " **{cell}** |");
                    } else {
                        let _ = write!(s, " {cell} |");
                    }
                }
            }
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "\nMasked-region metrics, mean ± standard deviation over tasks. config {}; voxelpaint {TOOL_VERSION}",
        hashes.iter().map(|h| &h[..h.len().min(12)]).collect::<Vec<_>>().join(", ")
    );
    Ok(s)
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "voxelpaint", version, about = "Diffusion inpainting of 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with paired masks.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Number of phantoms (overrides dataset.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one variant on a phantom dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Inpaint tasks with a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory whose phantom/mask pairs are the tasks.
        #[arg(long, conflicts_with_all = ["gt", "mask"])]
        data: Option<PathBuf>,
        /// Ground-truth volume of a task (repeatable, paired with --mask).
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        mask: Vec<PathBuf>,
        /// Refuse checkpoints of any other variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Record per-step noise scale and prediction size in the manifest.
        #[arg(long)]
        trace: bool,
    },
    /// Masked-region metrics for one output or a whole sample directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Sample directory written by `sample`.
        #[arg(long, conflicts_with_all = ["output", "gt", "mask"])]
        samples: Option<PathBuf>,
        #[arg(long, requires_all = ["gt", "mask"])]
        output: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Comparison table from eval directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Eval directories (or their eval.csv files).
        #[arg(required = true)]
        evals: Vec<PathBuf>,
        /// Combine evaluations from different configurations.
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn load_config(common: &Common, variant: Option<Variant>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .ok_or_else(|| config_err("no output directory (pass --out or set \"out\")"))
}

/// Runs a parsed command, returning text for standard output.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Phantom { common, count } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(n) = count {
                cfg.dataset.count = n;
                cfg.validate()?;
            }
            let out = out_dir(&common, Some(&cfg))?;
            let m = cmd_phantom(&cfg, &out, common.force)?;
            Ok(format!("wrote {} files to {}\n", m.files.len(), out.display()))
        }
        Command::Train {
            common,
            data,
            variant,
            resume,
        } => {
            let cfg = load_config(&common, variant)?;
            let out = out_dir(&common, Some(&cfg))?;
            let r = cmd_train(&cfg, &data, &out, resume, common.force)?;
            Ok(format!(
                "{} iterations, final loss {}, checkpoint {}\n",
                r.iterations,
                r.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                r.checkpoint.display()
            ))
        }
        Command::Sample {
            common,
            checkpoint,
            data,
            gt,
            mask,
            variant,
            trace,
        } => {
            if common.config.is_some() {
                return Err(config_err("sample takes its configuration from the checkpoint"));
            }
            let tasks: Vec<TaskFiles> = match data {
                Some(dir) => dataset_pairs(&dir)?
                    .into_iter()
                    .map(|(ground_truth, mask)| TaskFiles { ground_truth, mask })
                    .collect(),
                None => {
                    if gt.len() != mask.len() {
                        return Err(config_err(format!("{} --gt but {} --mask", gt.len(), mask.len())));
                    }
                    gt.into_iter()
                        .zip(mask)
                        .map(|(ground_truth, mask)| TaskFiles { ground_truth, mask })
                        .collect()
                }
            };
            let out = out_dir(&common, None)?;
            let args = SampleArgs {
                seed: common.seed,
                expect_variant: variant,
                trace,
                force: common.force,
            };
            let m = cmd_sample(&checkpoint, &tasks, &out, &args)?;
            Ok(format!("wrote {} samples to {}\n", m.files.len(), out.display()))
        }
        Command::Eval {
            common,
            samples,
            output,
            gt,
            mask,
        } => match (samples, output, gt, mask) {
            (Some(dir), ..) => {
                let out = out_dir(&common, None)?;
                let s = cmd_eval_batch(&dir, &out, common.force)?;
                Ok(format!(
                    "{} outputs: ssim {}, mse {}, psnr {}\n",
                    s.rows.len(),
                    fmt_cell(&s.ssim, 4),
                    fmt_cell(&s.mse, 5),
                    fmt_cell(&s.psnr, 2)
                ))
            }
            (None, Some(o), Some(g), Some(m)) => {
                let report = cmd_eval_one(&o, &g, &m)?;
                Ok(report.to_json() + "\n")
            }
            _ => Err(config_err("eval needs --samples DIR or --output, --gt and --mask")),
        },
        Command::Report {
            common,
            evals,
            allow_mixed,
        } => {
            let table = cmd_report(&evals, allow_mixed)?;
            if let Some(out) = &common.out {
                write_atomic(out, table.as_bytes())?;
            }
            Ok(table)
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::Shape { .. } => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}
