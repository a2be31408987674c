//! Raw numeric kernels behind the differentiable ops.
//!
//! Everything here works on plain slices in `[C, D, H, W]` layout. The tape in
//! [`crate::autodiff`] owns shape bookkeeping and calls into these.

/// Geometry of a same-padded cross-correlation over a `[C, D, H, W]` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Rows of the unfolded patch matrix.
    fn patch_len(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kd == 1 && self.kh == 1 && self.kw == 1
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len().max(1));
    assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len().max(1));
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold the receptive fields of output slice `z` into `cols[patch_len, h*w]`.
fn im2col_slice(g: &ConvGeom, input: &[f64], z: usize, cols: &mut [f64]) {
    let (pd, ph, pw) = (g.kd / 2, g.kh / 2, g.kw / 2);
    let hw = g.hw();
    let vol = g.volume();
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..g.kd {
            let zs = z as isize + a as isize - pd as isize;
            for b in 0..g.kh {
                for c in 0..g.kw {
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    row += 1;
                    if zs < 0 || zs >= g.d as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let plane = &input[ci * vol + zs as usize * hw..][..hw];
                    let x_lo = pw.saturating_sub(c);
                    let x_hi = (g.w + pw).saturating_sub(c).min(g.w);
                    for y in 0..g.h {
                        let ys = y as isize + b as isize - ph as isize;
                        let drow = &mut dst[y * g.w..(y + 1) * g.w];
                        if ys < 0 || ys >= g.h as isize || x_lo >= x_hi {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &plane[ys as usize * g.w..][..g.w];
                        drow[..x_lo].fill(0.0);
                        let off = x_lo + c - pw;
                        drow[x_lo..x_hi].copy_from_slice(&srow[off..off + (x_hi - x_lo)]);
                        drow[x_hi..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_slice`]: scatter-add `cols` back into `grad_input`.
fn col2im_slice(g: &ConvGeom, cols: &[f64], z: usize, grad_input: &mut [f64]) {
    let (pd, ph, pw) = (g.kd / 2, g.kh / 2, g.kw / 2);
    let hw = g.hw();
    let vol = g.volume();
    let mut row = 0;
    for ci in 0..g.cin {
        for a in 0..g.kd {
            let zs = z as isize + a as isize - pd as isize;
            for b in 0..g.kh {
                for c in 0..g.kw {
                    let src = &cols[row * hw..(row + 1) * hw];
                    row += 1;
                    if zs < 0 || zs >= g.d as isize {
                        continue;
                    }
                    let plane = &mut grad_input[ci * vol + zs as usize * hw..][..hw];
                    let x_lo = pw.saturating_sub(c);
                    let x_hi = (g.w + pw).saturating_sub(c).min(g.w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..g.h {
                        let ys = y as isize + b as isize - ph as isize;
                        if ys < 0 || ys >= g.h as isize {
                            continue;
                        }
                        let off = x_lo + c - pw;
                        let drow = &mut plane[ys as usize * g.w + off..][..x_hi - x_lo];
                        for (d, s) in drow.iter_mut().zip(&src[y * g.w + x_lo..y * g.w + x_hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let vol = g.volume();
    let hw = g.hw();
    let k = g.patch_len();
    let mut out = vec![0.0; g.cout * vol];
    if let Some(bias) = bias {
        for (co, chunk) in out.chunks_mut(vol).enumerate() {
            chunk.fill(bias[co]);
        }
    }
    if g.pointwise() {
        gemm(g.cout, k, vol, kernel, (k, 1), input, (vol, 1), 1.0, &mut out, (vol, 1));
        return out;
    }
    let mut cols = vec![0.0; k * hw];
    for z in 0..g.d {
        im2col_slice(g, input, z, &mut cols);
        gemm(
            g.cout,
            k,
            hw,
            kernel,
            (k, 1),
            &cols,
            (hw, 1),
            1.0,
            &mut out[z * hw..],
            (vol, 1),
        );
    }
    out
}

/// Gradients of a convolution. Each requested output is accumulated into.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let vol = g.volume();
    let hw = g.hw();
    let k = g.patch_len();
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks(vol).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
    }
    if g.pointwise() {
        if let Some(gk) = grad_kernel {
            // gk[cout, cin] += grad_out[cout, vol] * input[cin, vol]^T
            gemm(g.cout, vol, k, grad_out, (vol, 1), input, (1, vol), 1.0, gk, (k, 1));
        }
        if let Some(gi) = grad_input {
            // gi[cin, vol] += kernel^T[cin, cout] * grad_out[cout, vol]
            gemm(k, g.cout, vol, kernel, (1, k), grad_out, (vol, 1), 1.0, gi, (vol, 1));
        }
        return;
    }
    let mut cols = vec![0.0; k * hw];
    let mut grad_cols = if grad_input.is_some() {
        vec![0.0; k * hw]
    } else {
        Vec::new()
    };
    let mut grad_kernel = grad_kernel;
    let mut grad_input = grad_input;
    for z in 0..g.d {
        let go = &grad_out[z * hw..];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col_slice(g, input, z, &mut cols);
            gemm(g.cout, hw, k, go, (vol, 1), &cols, (1, hw), 1.0, gk, (k, 1));
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(k, g.cout, hw, kernel, (1, k), go, (vol, 1), 0.0, &mut grad_cols, (hw, 1));
            col2im_slice(g, &grad_cols, z, gi);
        }
    }
}

/// Layout of a group normalization: `channels` split into `groups`, and each
/// channel's `rest` trailing elements split into `slices` independent slabs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormGeom {
    pub channels: usize,
    pub groups: usize,
    pub slices: usize,
    pub rest: usize,
}

impl NormGeom {
    fn inner(&self) -> usize {
        self.rest / self.slices
    }

    fn for_each_member(&self, group: usize, slice: usize, mut f: impl FnMut(usize, usize)) {
        let per = self.channels / self.groups;
        let inner = self.inner();
        for c in group * per..(group + 1) * per {
            let base = c * self.rest + slice * inner;
            for i in base..base + inner {
                f(c, i);
            }
        }
    }
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

/// Returns the normalized values `x_hat` and one `rstd` per (group, slice).
pub(crate) fn group_norm_forward(g: &NormGeom, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x_hat = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(g.groups * g.slices);
    let n = ((g.channels / g.groups) * g.inner()) as f64;
    for group in 0..g.groups {
        for slice in 0..g.slices {
            // shifted sums keep a constant slab at exactly zero variance
            let mut pivot = None;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            g.for_each_member(group, slice, |_, i| {
                let p = *pivot.get_or_insert(x[i]);
                let d = x[i] - p;
                s1 += d;
                s2 += d * d;
            });
            let pivot = pivot.unwrap_or(0.0);
            let mean_shift = s1 / n;
            let var = (s2 / n - mean_shift * mean_shift).max(0.0);
            let mean = pivot + mean_shift;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            g.for_each_member(group, slice, |_, i| {
                x_hat[i] = (x[i] - mean) * rstd;
            });
            rstds.push(rstd);
        }
    }
    (x_hat, rstds)
}

/// Gradient w.r.t. the group-norm input given `d x_hat`.
pub(crate) fn group_norm_backward(g: &NormGeom, x_hat: &[f64], rstds: &[f64], grad_xhat: &[f64], grad_x: &mut [f64]) {
    let n = ((g.channels / g.groups) * g.inner()) as f64;
    for group in 0..g.groups {
        for slice in 0..g.slices {
            let rstd = rstds[group * g.slices + slice];
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            g.for_each_member(group, slice, |_, i| {
                mean_g += grad_xhat[i];
                mean_gx += grad_xhat[i] * x_hat[i];
            });
            mean_g /= n;
            mean_gx /= n;
            g.for_each_member(group, slice, |_, i| {
                grad_x[i] += rstd * (grad_xhat[i] - mean_g - x_hat[i] * mean_gx);
            });
        }
    }
}

/// Shape padded on the left to four axes.
pub(crate) fn as_4d(shape: &[usize]) -> [usize; 4] {
    assert!(shape.len() <= 4, "at most four axes supported, got {shape:?}");
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

pub(crate) fn avg_pool_forward(shape: [usize; 4], f: [usize; 4], x: &[f64]) -> Vec<f64> {
    let o = [shape[0] / f[0], shape[1] / f[1], shape[2] / f[2], shape[3] / f[3]];
    let mut out = vec![0.0; o.iter().product()];
    let norm = 1.0 / f.iter().product::<usize>() as f64;
    for_each_pooled(shape, f, |src, dst| out[dst] += x[src]);
    for v in &mut out {
        *v *= norm;
    }
    out
}

pub(crate) fn avg_pool_backward(shape: [usize; 4], f: [usize; 4], grad_out: &[f64], grad_x: &mut [f64]) {
    let norm = 1.0 / f.iter().product::<usize>() as f64;
    for_each_pooled(shape, f, |src, dst| grad_x[src] += grad_out[dst] * norm);
}

/// `shape` is the upsampled (output) extent.
pub(crate) fn upsample_forward(shape: [usize; 4], f: [usize; 4], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; shape.iter().product()];
    for_each_pooled(shape, f, |fine, coarse| out[fine] = x[coarse]);
    out
}

pub(crate) fn upsample_backward(shape: [usize; 4], f: [usize; 4], grad_out: &[f64], grad_x: &mut [f64]) {
    for_each_pooled(shape, f, |fine, coarse| grad_x[coarse] += grad_out[fine]);
}

/// Visits every fine index of `shape` with the coarse index it falls into.
fn for_each_pooled(shape: [usize; 4], f: [usize; 4], mut visit: impl FnMut(usize, usize)) {
    let o = [shape[0] / f[0], shape[1] / f[1], shape[2] / f[2], shape[3] / f[3]];
    let mut fine = 0;
    for a in 0..shape[0] {
        let ca = a / f[0];
        for b in 0..shape[1] {
            let cb = ca * o[1] + b / f[1];
            for c in 0..shape[2] {
                let cc = (cb * o[2] + c / f[2]) * o[3];
                for d in 0..shape[3] {
                    visit(fine, cc + d / f[3]);
                    fine += 1;
                }
            }
        }
    }
}
