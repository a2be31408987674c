//! Single-level orthonormal 3D Haar transform.
//!
//! Along each axis a pair `(a, b)` maps to `low = (a + b) / √2` and
//! `high = (a - b) / √2`. The eight resulting subbands are stored channel-first
//! in the order LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH, where the letters name
//! the depth, height and width filters in that order.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUBBANDS: usize = 8;

pub const SUBBAND_NAMES: [&str; SUBBANDS] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// The eight half-resolution subbands of one volume, `[8, D/2, H/2, W/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    subbands: Tensor,
}

impl WaveletCoeffs {
    pub fn new(subbands: Tensor) -> Result<Self> {
        if subbands.rank() != 4 || subbands.shape()[0] != SUBBANDS {
            return Err(Error::invalid(
                "wavelet_coeffs",
                format!("expected [8, D, H, W], got {:?}", subbands.shape()),
            ));
        }
        Ok(WaveletCoeffs { subbands })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.subbands
    }

    pub fn into_tensor(self) -> Tensor {
        self.subbands
    }

    /// Extents of one subband.
    pub fn half_shape(&self) -> [usize; 3] {
        let s = self.subbands.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subband(&self, index: usize) -> Tensor {
        self.subbands.channel_slice(index, 1).expect("subband index")
    }

    pub fn energy(&self) -> f64 {
        self.subbands.sum_squares()
    }
}

/// Forward transform of a `[1, D, H, W]` volume with even extents.
pub fn dwt3(volume: &Tensor) -> Result<WaveletCoeffs> {
    let s = volume.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid("dwt3", format!("expected [1, D, H, W], got {s:?}")));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    for (name, e) in [("depth", d), ("height", h), ("width", w)] {
        if e % 2 != 0 {
            return Err(Error::invalid("dwt3", format!("{name} extent {e} is odd")));
        }
    }
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let band = hd * hh * hw;
    let src = volume.data();
    let mut out = vec![0.0; SUBBANDS * band];
    let mut block = [0.0; 8];
    for z in 0..hd {
        for y in 0..hh {
            for x in 0..hw {
                for (i, v) in block.iter_mut().enumerate() {
                    let (a, b, c) = (i >> 2, (i >> 1) & 1, i & 1);
                    *v = src[((2 * z + a) * h + 2 * y + b) * w + 2 * x + c];
                }
                analyze_block(&mut block);
                let site = (z * hh + y) * hw + x;
                for (k, v) in block.iter().enumerate() {
                    out[k * band + site] = *v;
                }
            }
        }
    }
    WaveletCoeffs::new(Tensor::new(&[SUBBANDS, hd, hh, hw], out)?)
}

/// Inverse of [`dwt3`].
pub fn idwt3(coeffs: &WaveletCoeffs) -> Tensor {
    let [hd, hh, hw] = coeffs.half_shape();
    let (h, w) = (2 * hh, 2 * hw);
    let band = hd * hh * hw;
    let src = coeffs.subbands.data();
    let mut out = vec![0.0; 8 * band];
    let mut block = [0.0; 8];
    for z in 0..hd {
        for y in 0..hh {
            for x in 0..hw {
                let site = (z * hh + y) * hw + x;
                for (k, v) in block.iter_mut().enumerate() {
                    *v = src[k * band + site];
                }
                synthesize_block(&mut block);
                for (i, v) in block.iter().enumerate() {
                    let (a, b, c) = (i >> 2, (i >> 1) & 1, i & 1);
                    out[((2 * z + a) * h + 2 * y + b) * w + 2 * x + c] = *v;
                }
            }
        }
    }
    Tensor::new(&[1, 2 * hd, h, w], out).expect("idwt3 shape")
}

/// In-place 2×2×2 butterfly. Input index bits are (depth, height, width)
/// offsets; output index bits are the (depth, height, width) filter choices.
fn analyze_block(v: &mut [f64; 8]) {
    for stride in [1, 2, 4] {
        butterfly(v, stride);
    }
}

fn synthesize_block(v: &mut [f64; 8]) {
    // the butterfly is its own inverse
    for stride in [4, 2, 1] {
        butterfly(v, stride);
    }
}

fn butterfly(v: &mut [f64; 8], stride: usize) {
    for i in 0..8 {
        if i & stride == 0 {
            let (a, b) = (v[i], v[i | stride]);
            v[i] = (a + b) * FRAC_1_SQRT_2;
            v[i | stride] = (a - b) * FRAC_1_SQRT_2;
        }
    }
}

/// Concatenates coefficient sets along the channel axis (8 channels each).
pub fn pack_channels(coeffs: &[&WaveletCoeffs]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = coeffs.iter().map(|c| &c.subbands).collect();
    Tensor::concat(&parts)
}

/// Splits an `[8n, ...]` tensor back into `n` coefficient sets.
pub fn unpack_channels(packed: &Tensor) -> Result<Vec<WaveletCoeffs>> {
    let c = packed.shape()[0];
    if !c.is_multiple_of(SUBBANDS) || packed.rank() != 4 {
        return Err(Error::invalid(
            "unpack_channels",
            format!("expected [8n, D, H, W], got {:?}", packed.shape()),
        ));
    }
    (0..c / SUBBANDS)
        .map(|i| WaveletCoeffs::new(packed.channel_slice(i * SUBBANDS, SUBBANDS)?))
        .collect()
}
