//! Forward and adjoint kernels on raw buffers. The tape and the inference
//! path both call these, so training and evaluation share one numeric path.

use crate::geometry::{Vec3, DOMAIN_HALF};

/// Upper bound on the im2col scratch buffer, in values.
const IM2COL_BUDGET: usize = 1 << 22;

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` with explicit strides.
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
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
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
            1,
        );
    }
}

/// Spatial extent of a `[C, D, H, W]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Volume {
    pub channels: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Volume {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn cells(&self) -> usize {
        self.d * self.h * self.w
    }
}

/// Planes of output processed per im2col chunk.
fn planes_per_chunk(v: &Volume) -> usize {
    let per_plane = v.channels * 27 * v.plane();
    (IM2COL_BUDGET / per_plane.max(1)).clamp(1, v.d)
}

/// Fills `cols[(ci*27 + tap) * pc + p]` for output planes `z0..z0+nz`.
fn im2col(x: &[f64], v: &Volume, z0: usize, nz: usize, cols: &mut [f64]) {
    let (h, w, plane) = (v.h as isize, v.w as isize, v.plane());
    let pc = nz * plane;
    cols[..v.channels * 27 * pc].fill(0.0);
    for ci in 0..v.channels {
        let src = &x[ci * v.cells()..(ci + 1) * v.cells()];
        for tap in 0..27 {
            let (dz, dy, dx) = (
                (tap / 9) as isize - 1,
                ((tap / 3) % 3) as isize - 1,
                (tap % 3) as isize - 1,
            );
            let row = &mut cols[(ci * 27 + tap) * pc..(ci * 27 + tap + 1) * pc];
            let x_lo = (-dx).max(0) as usize;
            let x_hi = (w - dx).min(w) as usize;
            for lz in 0..nz {
                let sz = (z0 + lz) as isize + dz;
                if sz < 0 || sz >= v.d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let s0 = (sz as usize * plane) + (sy * w) as usize;
                    let d0 = lz * plane + (y * w) as usize;
                    let sx0 = (x_lo as isize + dx) as usize;
                    row[d0 + x_lo..d0 + x_hi].copy_from_slice(&src[s0 + sx0..s0 + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` into `dx`.
fn col2im(cols: &[f64], v: &Volume, z0: usize, nz: usize, dx: &mut [f64]) {
    let (h, w, plane) = (v.h as isize, v.w as isize, v.plane());
    let pc = nz * plane;
    for ci in 0..v.channels {
        let dst = &mut dx[ci * v.cells()..(ci + 1) * v.cells()];
        for tap in 0..27 {
            let (dz, dy, ddx) = (
                (tap / 9) as isize - 1,
                ((tap / 3) % 3) as isize - 1,
                (tap % 3) as isize - 1,
            );
            let row = &cols[(ci * 27 + tap) * pc..(ci * 27 + tap + 1) * pc];
            let x_lo = (-ddx).max(0) as usize;
            let x_hi = (w - ddx).min(w) as usize;
            for lz in 0..nz {
                let sz = (z0 + lz) as isize + dz;
                if sz < 0 || sz >= v.d as isize {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let s0 = (sz as usize * plane) + (sy * w) as usize;
                    let d0 = lz * plane + (y * w) as usize;
                    let sx0 = (x_lo as isize + ddx) as usize;
                    let n = x_hi - x_lo;
                    for (t, s) in dst[s0 + sx0..s0 + sx0 + n].iter_mut().zip(&row[d0 + x_lo..d0 + x_hi]) {
                        *t += s;
                    }
                }
            }
        }
    }
}

/// 3^3 cross-correlation, zero padding 1, stride 1. `weight` is
/// `[c_out, c_in, 3, 3, 3]`; the output is `[c_out, D, H, W]`.
pub fn conv3d_forward(x: &[f64], v: &Volume, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
    let p = v.cells();
    let k = v.channels * 27;
    let mut out = vec![0.0; c_out * p];
    let zc = planes_per_chunk(v);
    let mut cols = vec![0.0; k * zc * v.plane()];
    let mut z0 = 0;
    while z0 < v.d {
        let nz = zc.min(v.d - z0);
        let pc = nz * v.plane();
        im2col(x, v, z0, nz, &mut cols);
        gemm(
            c_out,
            k,
            pc,
            weight,
            (k, 1),
            &cols,
            (pc, 1),
            0.0,
            &mut out[z0 * v.plane()..],
            p,
        );
        z0 += nz;
    }
    for (co, &b) in bias.iter().enumerate() {
        for o in &mut out[co * p..(co + 1) * p] {
            *o += b;
        }
    }
    out
}

/// Gradients of [`conv3d_forward`]: returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `want_input` is false.
pub fn conv3d_backward(
    x: &[f64],
    v: &Volume,
    weight: &[f64],
    c_out: usize,
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = v.cells();
    let k = v.channels * 27;
    let mut dw = vec![0.0; c_out * k];
    let db: Vec<f64> = (0..c_out)
        .map(|co| grad_out[co * p..(co + 1) * p].iter().sum())
        .collect();
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let zc = planes_per_chunk(v);
    let mut cols = vec![0.0; k * zc * v.plane()];
    let mut z0 = 0;
    while z0 < v.d {
        let nz = zc.min(v.d - z0);
        let pc = nz * v.plane();
        let g = &grad_out[z0 * v.plane()..];
        im2col(x, v, z0, nz, &mut cols);
        // dW += G_chunk * cols^T
        gemm(c_out, pc, k, g, (p, 1), &cols, (1, pc), 1.0, &mut dw, k);
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * G_chunk
            gemm(k, c_out, pc, weight, (1, k), g, (p, 1), 0.0, &mut cols, pc);
            col2im(&cols, v, z0, nz, dx);
        }
        z0 += nz;
    }
    (dx, dw, db)
}

/// 2^3 max pooling. Returns the pooled values and, per output, the flat
/// input index of the first maximum in window order.
pub fn maxpool2_forward(x: &[f64], v: &Volume) -> (Vec<f64>, Vec<u32>) {
    let (od, oh, ow) = (v.d / 2, v.h / 2, v.w / 2);
    let n = v.channels * od * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..v.channels {
        let base = c * v.cells();
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + (2 * z + dz) * v.plane() + (2 * y + dy) * v.w + 2 * xx + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(argmax: &[u32], input_len: usize, grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i as usize] += g;
    }
    dx
}

/// Eight flat spatial indices and blend weights of one trilinear lookup.
pub type Stencil = [(u32, f64); 8];

/// Blend stencil of `p` in a `k^3` grid aligned with the canonical cube.
/// Continuous coordinates `u = (p + 0.5) k - 0.5` are clamped to `[0, k-1]`.
pub fn trilinear_stencil(p: &Vec3, k: usize) -> Stencil {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let u = ((p[a] + DOMAIN_HALF) * k as f64 - 0.5).clamp(0.0, (k - 1) as f64);
        let i0 = (u.floor() as usize).min(k.saturating_sub(2));
        lo[a] = i0;
        hi[a] = (i0 + 1).min(k - 1);
        f[a] = u - i0 as f64;
    }
    let mut s = [(0u32, 0.0f64); 8];
    for (corner, slot) in s.iter_mut().enumerate() {
        let pick = |a: usize| corner >> a & 1 == 1;
        let (ix, iy, iz) = (
            if pick(0) { hi[0] } else { lo[0] },
            if pick(1) { hi[1] } else { lo[1] },
            if pick(2) { hi[2] } else { lo[2] },
        );
        let w = (0..3).map(|a| if pick(a) { f[a] } else { 1.0 - f[a] }).product();
        *slot = ((ix + k * (iy + k * iz)) as u32, w);
    }
    s
}

/// `[c, cells]` to `[cells, c]`, so each corner's channels are contiguous.
pub fn channels_last(grid: &[f64], channels: usize) -> Vec<f64> {
    let cells = grid.len() / channels.max(1);
    let mut last = vec![0.0; grid.len()];
    for (c, plane) in grid.chunks_exact(cells).enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            last[i * channels + c] = v;
        }
    }
    last
}

/// Writes the blend of one stencil over a channel-last grid into `row`,
/// whose length is the channel count.
pub fn trilinear_gather(last: &[f64], s: &Stencil, row: &mut [f64]) {
    let c = row.len();
    row.fill(0.0);
    for &(i, w) in s {
        let corner = &last[i as usize * c..(i as usize + 1) * c];
        for (o, &v) in row.iter_mut().zip(corner) {
            *o += w * v;
        }
    }
}

/// Samples a `[c, k, k, k]` grid at each stencil, giving `[q, c]`.
pub fn trilinear_forward(grid: &[f64], channels: usize, k: usize, stencils: &[Stencil]) -> Vec<f64> {
    debug_assert_eq!(grid.len(), channels * k * k * k);
    let last = channels_last(grid, channels);
    let mut out = vec![0.0; stencils.len() * channels];
    for (s, row) in stencils.iter().zip(out.chunks_exact_mut(channels)) {
        trilinear_gather(&last, s, row);
    }
    out
}

pub fn trilinear_backward(channels: usize, k: usize, stencils: &[Stencil], grad_out: &[f64]) -> Vec<f64> {
    let cells = k * k * k;
    let mut last = vec![0.0; cells * channels];
    for (s, g) in stencils.iter().zip(grad_out.chunks_exact(channels)) {
        for &(i, w) in s {
            let corner = &mut last[i as usize * channels..(i as usize + 1) * channels];
            for (d, &gc) in corner.iter_mut().zip(g) {
                *d += w * gc;
            }
        }
    }
    let mut dg = vec![0.0; channels * cells];
    for (i, corner) in last.chunks_exact(channels).enumerate() {
        for (c, &v) in corner.iter().enumerate() {
            dg[c * cells + i] = v;
        }
    }
    dg
}

/// `y[q x f_out] = x[q x f_in] * w^T + b`.
pub fn linear_forward(x: &[f64], q: usize, f_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let f_out = b.len();
    let mut y = Vec::with_capacity(q * f_out);
    for _ in 0..q {
        y.extend_from_slice(b);
    }
    gemm(q, f_in, f_out, x, (f_in, 1), w, (1, f_in), 1.0, &mut y, f_out);
    y
}

/// Returns `(d_x, d_w, d_b)`; `d_x` is skipped when `want_input` is false.
pub fn linear_backward(
    x: &[f64],
    q: usize,
    f_in: usize,
    w: &[f64],
    f_out: usize,
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let dx = want_input.then(|| {
        let mut dx = vec![0.0; q * f_in];
        gemm(q, f_out, f_in, grad_out, (f_out, 1), w, (f_in, 1), 0.0, &mut dx, f_in);
        dx
    });
    let mut dw = vec![0.0; f_out * f_in];
    gemm(f_out, q, f_in, grad_out, (1, f_out), x, (f_in, 1), 0.0, &mut dw, f_in);
    let mut db = vec![0.0; f_out];
    for row in grad_out.chunks_exact(f_out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) - x y + ln(1 + exp(-|x|))`, the cross-entropy of a logit.
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
