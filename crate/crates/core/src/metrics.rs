//! Masked-region image quality metrics and Dice overlap.
//!
//! All image metrics are evaluated only where the mask is nonzero. SSIM uses
//! a Gaussian window centred on each masked voxel; windows are clipped at the
//! volume border and their weights renormalised.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    /// Use 2D windows within each depth slice instead of 3D windows.
    pub slice_wise: bool,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            slice_wise: false,
        }
    }
}

fn check_inputs(a: &Volume, b: &Volume, m: &Volume, op: &'static str) -> Result<usize> {
    for (axis, ((&x, &y), &z)) in ["depth", "height", "width"]
        .iter()
        .zip(a.shape().iter().zip(&b.shape()).zip(&m.shape()))
    {
        if x != y {
            return Err(Error::shape(op, *axis, x, y));
        }
        if x != z {
            return Err(Error::shape(op, format!("mask {axis}"), x, z));
        }
    }
    let n = m.count_nonzero();
    if n == 0 {
        return Err(Error::invalid(op, "mask is empty"));
    }
    Ok(n)
}

pub fn mse_masked(a: &Volume, b: &Volume, m: &Volume) -> Result<f64> {
    let n = check_inputs(a, b, m, "mse_masked")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(m.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|((&x, &y), _)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal to noise ratio in dB; `f64::INFINITY` when the masked MSE is 0.
pub fn psnr_masked(a: &Volume, b: &Volume, m: &Volume, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse_masked(a, b, m)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Largest odd window not exceeding `extent`.
fn fit_window(window: usize, extent: usize) -> usize {
    let w = window.min(extent);
    if w.is_multiple_of(2) {
        w - 1
    } else {
        w
    }
}

fn gaussian(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as f64;
    (0..len)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Mean SSIM over windows centred on masked voxels.
pub fn ssim_masked(a: &Volume, b: &Volume, m: &Volume, p: &SsimParams) -> Result<f64> {
    check_inputs(a, b, m, "ssim_masked")?;
    if p.window == 0 || p.sigma <= 0.0 {
        return Err(Error::invalid("ssim_masked", "window and sigma must be positive"));
    }
    let [d, h, w] = a.shape();
    let wd = if p.slice_wise { 1 } else { fit_window(p.window, d) };
    let (wh, ww) = (fit_window(p.window, h), fit_window(p.window, w));
    let (gd, gh, gw) = (gaussian(wd, p.sigma), gaussian(wh, p.sigma), gaussian(ww, p.sigma));
    let (rd, rh, rw) = ((wd / 2) as isize, (wh / 2) as isize, (ww / 2) as isize);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let (av, bv) = (a.data(), b.data());

    let mut total = 0.0;
    let mut sites = 0usize;
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(wd * wh * ww);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.get(z, y, x) == 0.0 {
                    continue;
                }
                taps.clear();
                let mut wsum = 0.0;
                for (i, dz) in (-rd..=rd).enumerate() {
                    let zz = z as isize + dz;
                    if zz < 0 || zz >= d as isize {
                        continue;
                    }
                    for (j, dy) in (-rh..=rh).enumerate() {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for (k, dx) in (-rw..=rw).enumerate() {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wt = gd[i] * gh[j] * gw[k];
                            wsum += wt;
                            taps.push(((zz as usize * h + yy as usize) * w + xx as usize, wt));
                        }
                    }
                }
                let (mut ma, mut mb) = (0.0, 0.0);
                for &(idx, wt) in &taps {
                    ma += wt * av[idx] as f64;
                    mb += wt * bv[idx] as f64;
                }
                ma /= wsum;
                mb /= wsum;
                let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
                for &(idx, wt) in &taps {
                    let (da, db) = (av[idx] as f64 - ma, bv[idx] as f64 - mb);
                    vaa += wt * (da * da);
                    vbb += wt * (db * db);
                    vab += wt * (da * db);
                }
                vaa /= wsum;
                vbb /= wsum;
                vab /= wsum;
                let num = (2.0 * (ma * mb) + c1) * (2.0 * vab + c2);
                let den = (ma * ma + mb * mb + c1) * (vaa + vbb + c2);
                total += num / den;
                sites += 1;
            }
        }
    }
    Ok(total / sites as f64)
}

/// `2|x ∧ y| / (|x| + |y|)`, defined as 1 when both are empty.
pub fn dice(x: &Volume, y: &Volume) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(
            "dice",
            format!("shapes {:?} and {:?} differ", x.shape(), y.shape()),
        ));
    }
    if !x.is_binary() || !y.is_binary() {
        return Err(Error::invalid("dice", "inputs must be binary"));
    }
    let both = x.data().iter().zip(y.data()).filter(|(&a, &b)| a != 0.0 && b != 0.0).count();
    let total = x.count_nonzero() + y.count_nonzero();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Masked metrics for one output volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub mse: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub voxel_count: usize,
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr {t:?}"))),
    }
}

pub const CSV_HEADER: &str = "name,ssim,mse,psnr,voxel_count";

impl MetricReport {
    pub fn evaluate(output: &Volume, gt: &Volume, mask: &Volume, params: &SsimParams) -> Result<Self> {
        let mse = mse_masked(output, gt, mask)?;
        Ok(MetricReport {
            ssim: ssim_masked(output, gt, mask, params)?,
            mse,
            psnr: psnr_from_mse(mse, params.data_range),
            voxel_count: mask.count_nonzero(),
        })
    }

    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr.is_infinite()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_row(&self, name: &str) -> String {
        let psnr = if self.psnr_is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", self.psnr)
        };
        format!("{name},{:.6},{:.8},{psnr},{}", self.ssim, self.mse, self.voxel_count)
    }

    /// Parses a row written by [`MetricReport::csv_row`].
    pub fn from_csv_row(row: &str) -> Result<(String, Self)> {
        let bad = |msg: String| Error::Format { what: "metrics csv", msg };
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            if s == "inf" {
                Ok(f64::INFINITY)
            } else {
                s.parse().map_err(|_| bad(format!("not a number: {s:?}")))
            }
        };
        Ok((
            f[0].to_string(),
            MetricReport {
                ssim: num(f[1])?,
                mse: num(f[2])?,
                psnr: num(f[3])?,
                voxel_count: f[4].parse().map_err(|_| bad(format!("bad count {:?}", f[4])))?,
            },
        ))
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 || !mean.is_finite() {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(Summary { mean, std, n })
}
