//! Volumes, the `.vvol` container, preprocessing and synthetic phantoms.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 1 + 1 + 12 + 4;

/// Free-form header metadata. Keys are kept sorted so files are reproducible.
pub type Meta = BTreeMap<String, Value>;

/// A scalar field on a `D × H × W` grid of `f32` voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    pub meta: Meta,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("volume", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::invalid(
                "volume",
                format!("{} voxels for shape {shape:?} (expected {n})", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("volume voxel {i} is not finite")));
        }
        Ok(Volume {
            shape,
            data,
            meta: Meta::new(),
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 3], value: f32) -> Self {
        Volume::new(shape, vec![value; shape.iter().product()]).expect("finite fill")
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Number of nonzero voxels in depth slice `z`.
    pub fn slice_nonzero(&self, z: usize) -> usize {
        let plane = self.shape[1] * self.shape[2];
        self.data[z * plane..(z + 1) * plane].iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `[1, D, H, W]` tensor view in f64.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::new(&[1, d, h, w], self.data.iter().map(|&v| v as f64).collect()).expect("volume shape")
    }

    /// Depth slice `z` as a `[1, 1, H, W]` tensor.
    pub fn slice_tensor(&self, z: usize) -> Tensor {
        let [_, h, w] = self.shape;
        let plane = h * w;
        let data = self.data[z * plane..(z + 1) * plane].iter().map(|&v| v as f64).collect();
        Tensor::new(&[1, 1, h, w], data).expect("slice shape")
    }

    /// Builds a volume from a single-channel `[1, D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::invalid("from_tensor", format!("expected [1, D, H, W], got {s:?}")));
        }
        Volume::new([s[1], s[2], s[3]], t.data().iter().map(|&v| v as f32).collect())
    }

    /// Overwrites depth slice `z` from a tensor holding `H × W` values.
    pub fn set_slice(&mut self, z: usize, t: &Tensor) -> Result<()> {
        let plane = self.shape[1] * self.shape[2];
        if t.len() != plane {
            return Err(Error::shape("set_slice", "slice voxels", plane, t.len()));
        }
        for (dst, &v) in self.data[z * plane..(z + 1) * plane].iter_mut().zip(t.data()) {
            *dst = v as f32;
        }
        Ok(())
    }

    fn same_shape(&self, other: &Volume, op: &'static str) -> Result<()> {
        for (axis, (a, b)) in ["depth", "height", "width"].iter().zip(self.shape.iter().zip(other.shape)) {
            if *a != b {
                return Err(Error::shape(op, *axis, *a, b));
            }
        }
        Ok(())
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&v.meta).map_err(|e| Error::Format {
        what: "volume metadata",
        msg: e.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * v.len());
    bytes.extend_from_slice(VVOL_MAGIC);
    bytes.push(VVOL_VERSION);
    bytes.push(DTYPE_F32);
    for e in v.shape {
        bytes.extend_from_slice(&(e as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "vvol",
        msg: msg.into(),
    }
}

/// Parses an in-memory `.vvol` image.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != VVOL_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VVOL_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {}", bytes[5])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let shape = [u32_at(6), u32_at(10), u32_at(14)];
    let meta_len = u32_at(18);
    let meta_end = HEADER_LEN
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated metadata"))?;
    let meta: Meta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| bad("shape overflows"))?;
    let payload = &bytes[meta_end..];
    if payload.len() != 4 * n {
        return Err(bad(format!("payload is {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut v = Volume::new(shape, data).map_err(|e| bad(e.to_string()))?;
    v.meta = meta;
    Ok(v)
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Quantile of sorted values by linear interpolation between order statistics.
pub fn quantile(sorted: &[f32], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Clamps voxels to the `[low, high]` quantile range.
pub fn percentile_clip(v: &Volume, low: f64, high: f64) -> Volume {
    let mut sorted = v.data.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = quantile(&sorted, low) as f32;
    let hi = quantile(&sorted, high) as f32;
    let mut out = v.clone();
    for x in &mut out.data {
        *x = x.clamp(lo, hi);
    }
    out
}

fn rescale(v: &Volume, a: f64, b: f64) -> Result<Volume> {
    let (min, max) = (v.min() as f64, v.max() as f64);
    if max <= min {
        return Err(Error::invalid("normalize", format!("degenerate range [{min}, {max}]")));
    }
    let mut out = v.clone();
    for x in &mut out.data {
        let u = (*x as f64 - min) / (max - min);
        *x = (a + (b - a) * u) as f32;
    }
    Ok(out)
}

pub fn normalize_01(v: &Volume) -> Result<Volume> {
    rescale(v, 0.0, 1.0)
}

pub fn normalize_pm1(v: &Volume) -> Result<Volume> {
    rescale(v, -1.0, 1.0)
}

/// Centre crop or zero pad each axis to `target`. On odd differences the
/// extra voxel goes to the high side.
pub fn crop_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::invalid("crop_pad", format!("zero extent in {target:?}")));
    }
    // offset maps output index i to source index i + offset (may be negative)
    let offset: Vec<isize> = (0..3)
        .map(|a| (v.shape[a] as isize - target[a] as isize) / 2)
        .collect();
    let mut out = Volume::zeros(target);
    out.meta = v.meta.clone();
    for z in 0..target[0] {
        let sz = z as isize + offset[0];
        if sz < 0 || sz >= v.shape[0] as isize {
            continue;
        }
        for y in 0..target[1] {
            let sy = y as isize + offset[1];
            if sy < 0 || sy >= v.shape[1] as isize {
                continue;
            }
            for x in 0..target[2] {
                let sx = x as isize + offset[2];
                if sx >= 0 && sx < v.shape[2] as isize {
                    out.set(z, y, x, v.get(sz as usize, sy as usize, sx as usize));
                }
            }
        }
    }
    Ok(out)
}

/// Block means over `factor³` blocks.
pub fn avg_downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 || v.shape.iter().any(|e| e % factor != 0) {
        return Err(Error::invalid(
            "avg_downsample",
            format!("shape {:?} not divisible by {factor}", v.shape),
        ));
    }
    let out_shape = v.shape.map(|e| e / factor);
    let norm = (factor * factor * factor) as f64;
    let mut out = Volume::zeros(out_shape);
    out.meta = v.meta.clone();
    for z in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                let mut acc = 0.0f64;
                for a in 0..factor {
                    for b in 0..factor {
                        for c in 0..factor {
                            acc += v.get(z * factor + a, y * factor + b, x * factor + c) as f64;
                        }
                    }
                }
                out.set(z, y, x, (acc / norm) as f32);
            }
        }
    }
    Ok(out)
}

/// The canonical preprocessing chain: clip, normalize to `[0, 1]`, crop/pad.
pub fn preprocess(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    crop_pad(&normalize_01(&percentile_clip(v, 0.001, 0.999))?, target)
}

/// `b = x ⊙ ¬m`.
pub fn masked_image(gt: &Volume, mask: &Volume) -> Result<Volume> {
    gt.same_shape(mask, "masked_image")?;
    let mut out = gt.clone();
    for (x, &m) in out.data.iter_mut().zip(&mask.data) {
        if m != 0.0 {
            *x = 0.0;
        }
    }
    Ok(out)
}

/// Keeps known voxels and takes generated content inside the mask:
/// `b + generated ⊙ m` for a binary mask.
pub fn composite(generated: &Volume, gt: &Volume, mask: &Volume) -> Result<Volume> {
    gt.same_shape(generated, "composite")?;
    gt.same_shape(mask, "composite")?;
    let data = gt
        .data
        .iter()
        .zip(&generated.data)
        .zip(&mask.data)
        .map(|((&g, &s), &m)| if m != 0.0 { s } else { g })
        .collect();
    let mut out = Volume::new(gt.shape, data)?;
    out.meta = generated.meta.clone();
    Ok(out)
}

/// Parameters of a synthetic phantom: a smooth blobby field inside an
/// ellipsoidal support, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shape: [usize; 3],
    /// Semi-axes of the support as fractions of each extent.
    pub axis_range: (f64, f64),
    pub tissue_level: f64,
    pub blob_count: usize,
    pub blob_amplitude: (f64, f64),
    /// Blob standard deviation as a fraction of the mean extent.
    pub smoothness: (f64, f64),
    pub rim: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            shape: [32, 32, 32],
            axis_range: (0.38, 0.48),
            tissue_level: 0.35,
            blob_count: 6,
            blob_amplitude: (0.15, 0.45),
            smoothness: (0.08, 0.18),
            rim: true,
        }
    }
}

const FOREGROUND_FLOOR: f64 = 0.02;

pub fn gen_phantom(spec: &PhantomSpec) -> Result<Volume> {
    if spec.shape.contains(&0) {
        return Err(Error::invalid("gen_phantom", "zero extent"));
    }
    let (lo, hi) = spec.axis_range;
    if !(0.0 < lo && lo <= hi && hi <= 0.5) {
        return Err(Error::invalid("gen_phantom", format!("axis range {lo}..{hi} outside (0, 0.5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.shape.map(|e| e as f64);
    let center: [f64; 3] = std::array::from_fn(|a| ext[a] * (0.5 + rng.gen_range(-0.02..=0.02)));
    let semi: [f64; 3] = std::array::from_fn(|a| ext[a] * rng.gen_range(lo..=hi));
    let rho = |p: [f64; 3]| -> f64 { (0..3).map(|a| ((p[a] - center[a]) / semi[a]).powi(2)).sum::<f64>().sqrt() };

    let mean_ext = ext.iter().sum::<f64>() / 3.0;
    let mut blobs = Vec::with_capacity(spec.blob_count);
    while blobs.len() < spec.blob_count {
        let p: [f64; 3] = std::array::from_fn(|a| center[a] + semi[a] * rng.gen_range(-1.0..1.0));
        if rho(p) > 0.9 {
            continue;
        }
        let amp = rng.gen_range(spec.blob_amplitude.0..=spec.blob_amplitude.1);
        let sign = if rng.gen_bool(0.7) { 1.0 } else { -0.6 };
        let sigma = mean_ext * rng.gen_range(spec.smoothness.0..=spec.smoothness.1);
        blobs.push((p, sign * amp, sigma));
    }

    let [d, h, w] = spec.shape;
    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let r = rho(p);
                if r > 1.0 {
                    continue;
                }
                let mut v = spec.tissue_level;
                for (c, amp, sigma) in &blobs {
                    let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                if spec.rim && r > 0.82 {
                    v += 0.35 * (r - 0.82) / 0.18;
                }
                data[(z * h + y) * w + x] = v.clamp(FOREGROUND_FLOOR, 1.0) as f32;
            }
        }
    }
    Ok(Volume::new(spec.shape, data)?
        .with_meta("kind", "phantom")
        .with_meta("seed", spec.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Cuboid,
    Ellipsoid,
}

/// A concrete mask region in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub kind: MaskKind,
    pub center: [f64; 3],
    /// Semi-axes for ellipsoids, half-extents for cuboids.
    pub radii: [f64; 3],
}

impl MaskRegion {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let u: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.radii[a]);
        match self.kind {
            MaskKind::Ellipsoid => u.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            MaskKind::Cuboid => u.iter().all(|v| v.abs() <= 1.0),
        }
    }

    pub fn render(&self, shape: [usize; 3]) -> Volume {
        let mut m = Volume::zeros(shape);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    if self.contains([z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5]) {
                        m.set(z, y, x, 1.0);
                    }
                }
            }
        }
        m
    }
}

/// Random mask draw: shape kind (random when `None`) and the admissible
/// fraction of foreground voxels it may cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub seed: u64,
    pub kind: Option<MaskKind>,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            seed: 0,
            kind: None,
            min_fraction: 0.02,
            max_fraction: 0.15,
        }
    }
}

pub const MASK_DRAWS: usize = 100;

/// Draws a binary mask lying entirely inside the phantom foreground
/// (voxels `> 0`) whose foreground fraction is between `spec.min_fraction` and `spec.max_fraction`.
pub fn gen_mask(spec: &MaskSpec, phantom: &Volume) -> Result<Volume> {
    if !(0.0 < spec.min_fraction && spec.min_fraction <= spec.max_fraction && spec.max_fraction <= 1.0) {
        return Err(Error::invalid(
            "gen_mask",
            format!("fraction range {}..{}", spec.min_fraction, spec.max_fraction),
        ));
    }
    let shape = phantom.shape();
    let fg: Vec<usize> = (0..phantom.len()).filter(|&i| phantom.data[i] > 0.0).collect();
    if fg.is_empty() {
        return Err(Error::invalid("gen_mask", "phantom has no foreground"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MASK_DRAWS {
        let kind = spec.kind.unwrap_or(if rng.gen_bool(0.5) {
            MaskKind::Cuboid
        } else {
            MaskKind::Ellipsoid
        });
        let target = rng.gen_range(spec.min_fraction..=spec.max_fraction) * fg.len() as f64;
        let aspect: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.7..1.3));
        let unit_volume = match kind {
            MaskKind::Ellipsoid => 4.0 / 3.0 * std::f64::consts::PI,
            MaskKind::Cuboid => 8.0,
        } * aspect.iter().product::<f64>();
        let s = (target / unit_volume).cbrt();
        let c = fg[rng.gen_range(0..fg.len())];
        let (z, rem) = (c / (shape[1] * shape[2]), c % (shape[1] * shape[2]));
        let center = [z as f64 + 0.5, (rem / shape[2]) as f64 + 0.5, (rem % shape[2]) as f64 + 0.5];
        let region = MaskRegion {
            kind,
            center,
            radii: aspect.map(|a| a * s),
        };
        let mask = region.render(shape);
        let inside = mask.data.iter().zip(&phantom.data).all(|(&m, &p)| m == 0.0 || p > 0.0);
        let frac = mask.count_nonzero() as f64 / fg.len() as f64;
        if inside && frac >= spec.min_fraction && frac <= spec.max_fraction {
            let region_json = serde_json::to_value(region).expect("region serializes");
            return Ok(mask
                .with_meta("kind", "mask")
                .with_meta("seed", spec.seed)
                .with_meta("region", region_json));
        }
    }
    Err(Error::invalid(
        "gen_mask",
        format!("no admissible mask after {MASK_DRAWS} draws"),
    ))
}

pub fn foreground_fraction(v: &Volume) -> f64 {
    v.count_nonzero() as f64 / v.len() as f64
}
