//! Dense numeric kernels behind the differentiable volumetric ops.
//!
//! Feature maps are `[channels, x, y, z]` row-major, so `z` is contiguous.
//! Convolutions lower to GEMM over im2col blocks of whole z-rows; the block
//! size bounds scratch memory independently of the volume size.

/// Target number of voxels per im2col block.
const BLOCK_VOXELS: usize = 8192;

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c[m,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
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
    // Bounds: the furthest element each operand touches must be in range.
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every access inside the three slices, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a same-padded cubic convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub dims: [usize; 3],
    pub k: usize,
}

impl ConvGeom {
    fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn rows_per_block(&self) -> usize {
        (BLOCK_VOXELS / self.dims[2]).max(1)
    }
}

/// Fills `cols[(ci*k^3 + tap), v]` for the z-rows `row0..row0+rows`.
fn im2col(input: &[f64], g: &ConvGeom, row0: usize, rows: usize, cols: &mut [f64]) {
    let [nx, ny, nz] = g.dims;
    let pad = (g.k / 2) as isize;
    let width = rows * nz;
    let mut r = 0;
    for ci in 0..g.c_in {
        let chan = &input[ci * g.voxels()..(ci + 1) * g.voxels()];
        for dx in -pad..=pad {
            for dy in -pad..=pad {
                for dz in -pad..=pad {
                    let dst_row = &mut cols[r * width..(r + 1) * width];
                    for (local, row) in (row0..row0 + rows).enumerate() {
                        let dst = &mut dst_row[local * nz..(local + 1) * nz];
                        let sx = (row / ny) as isize + dx;
                        let sy = (row % ny) as isize + dy;
                        if sx < 0 || sy < 0 || sx >= nx as isize || sy >= ny as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &chan[(sx as usize * ny + sy as usize) * nz..][..nz];
                        copy_shifted(src, dst, dz);
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `dst[z] = src[z + shift]`, zero outside `src`.
fn copy_shifted(src: &[f64], dst: &mut [f64], shift: isize) {
    let n = dst.len() as isize;
    let lo = (-shift).clamp(0, n) as usize;
    let hi = (n - shift).clamp(0, n) as usize;
    dst[..lo].fill(0.0);
    if hi > lo {
        let s = (lo as isize + shift) as usize;
        dst[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
    }
    dst[hi.max(lo)..].fill(0.0);
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `grad_input`.
fn col2im(cols: &[f64], g: &ConvGeom, row0: usize, rows: usize, grad_input: &mut [f64]) {
    let [nx, ny, nz] = g.dims;
    let pad = (g.k / 2) as isize;
    let width = rows * nz;
    let vox = g.voxels();
    let mut r = 0;
    for ci in 0..g.c_in {
        let chan = &mut grad_input[ci * vox..(ci + 1) * vox];
        for dx in -pad..=pad {
            for dy in -pad..=pad {
                for dz in -pad..=pad {
                    let src_row = &cols[r * width..(r + 1) * width];
                    for (local, row) in (row0..row0 + rows).enumerate() {
                        let sx = (row / ny) as isize + dx;
                        let sy = (row % ny) as isize + dy;
                        if sx < 0 || sy < 0 || sx >= nx as isize || sy >= ny as isize {
                            continue;
                        }
                        let src = &src_row[local * nz..(local + 1) * nz];
                        let dst = &mut chan[(sx as usize * ny + sy as usize) * nz..][..nz];
                        let n = nz as isize;
                        let lo = (-dz).clamp(0, n) as usize;
                        let hi = (n - dz).clamp(0, n) as usize;
                        for z in lo..hi {
                            dst[(z as isize + dz) as usize] += src[z];
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn blocks(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let total = g.dims[0] * g.dims[1];
    let step = g.rows_per_block();
    (0..total).step_by(step).map(move |r0| (r0, step.min(total - r0)))
}

pub(crate) fn conv3d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let vox = g.voxels();
    let kdim = g.c_in * g.taps();
    let mut out = vec![0.0; g.c_out * vox];
    let mut cols = Vec::new();
    for (row0, rows) in blocks(g) {
        let width = rows * g.dims[2];
        cols.resize(kdim * width, 0.0);
        im2col(input, g, row0, rows, &mut cols);
        gemm(
            g.c_out,
            kdim,
            width,
            1.0,
            kernel,
            (kdim, 1),
            &cols,
            (width, 1),
            0.0,
            &mut out[row0 * g.dims[2]..],
            (vox, 1),
        );
    }
    for (co, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            out[co * vox..(co + 1) * vox].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Accumulates gradients of a same-padded convolution. Any of the output
/// buffers may be omitted.
pub(crate) fn conv3d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let vox = g.voxels();
    let kdim = g.c_in * g.taps();
    if let Some(gb) = grad_bias {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += grad_out[co * vox..(co + 1) * vox].iter().sum::<f64>();
        }
    }
    if grad_input.is_none() && grad_kernel.is_none() {
        return;
    }
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for (row0, rows) in blocks(g) {
        let width = rows * g.dims[2];
        let off = row0 * g.dims[2];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            cols.resize(kdim * width, 0.0);
            im2col(input, g, row0, rows, &mut cols);
            // dK[co, j] += sum_v dOut[co, v] * cols[j, v]
            gemm(g.c_out, width, kdim, 1.0, &grad_out[off..], (vox, 1), &cols, (1, width), 1.0, gk, (kdim, 1));
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            dcols.resize(kdim * width, 0.0);
            // dcols[j, v] = sum_co K[co, j] * dOut[co, v]
            gemm(kdim, g.c_out, width, 1.0, kernel, (1, kdim), &grad_out[off..], (vox, 1), 0.0, &mut dcols, (width, 1));
            col2im(&dcols, g, row0, rows, gi);
        }
    }
}

/// 2x2x2 max pooling; returns pooled values and the flat argmax of each
/// output (first index wins ties).
pub(crate) fn maxpool_forward(input: &[f64], c: usize, dims: [usize; 3]) -> (Vec<f64>, Vec<usize>, f64) {
    let [nx, ny, nz] = dims;
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = Vec::with_capacity(c * ox * oy * oz);
    let mut arg = Vec::with_capacity(out.capacity());
    let mut margin = f64::INFINITY;
    for ch in 0..c {
        let base = ch * nx * ny * nz;
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let i = base + ((2 * x + dx) * ny + 2 * y + dy) * nz + 2 * z + dz;
                                let v = input[i];
                                if v > best {
                                    second = best;
                                    best = v;
                                    best_i = i;
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                    }
                    margin = margin.min(best - second);
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg, margin)
}

/// Stride-2, kernel-2 transposed convolution. Kernel is `[c_in, c_out, 2, 2, 2]`.
pub(crate) fn upconv_forward(input: &[f64], kernel: &[f64], c_in: usize, c_out: usize, dims: [usize; 3]) -> Vec<f64> {
    let vox = dims[0] * dims[1] * dims[2];
    let rows = c_out * 8;
    // taps[(co, t), v] = sum_ci K[ci, (co, t)] * in[ci, v]
    let mut taps = vec![0.0; rows * vox];
    gemm(rows, c_in, vox, 1.0, kernel, (1, rows), input, (vox, 1), 0.0, &mut taps, (vox, 1));
    let mut out = vec![0.0; c_out * vox * 8];
    scatter_taps(&taps, c_out, dims, |dst, src| *dst = src, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn upconv_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    dims: [usize; 3],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let vox = dims[0] * dims[1] * dims[2];
    let rows = c_out * 8;
    let mut dtaps = vec![0.0; rows * vox];
    gather_taps(grad_out, c_out, dims, &mut dtaps);
    if let Some(gi) = grad_input {
        // dIn[ci, v] += sum_r K[ci, r] * dtaps[r, v]
        gemm(c_in, rows, vox, 1.0, kernel, (rows, 1), &dtaps, (vox, 1), 1.0, gi, (vox, 1));
    }
    if let Some(gk) = grad_kernel {
        // dK[ci, r] += sum_v in[ci, v] * dtaps[r, v]
        gemm(c_in, vox, rows, 1.0, input, (vox, 1), &dtaps, (1, vox), 1.0, gk, (rows, 1));
    }
}

fn tap_target(dims: [usize; 3], x: usize, y: usize, z: usize, t: usize) -> usize {
    let (a, b, c) = (t >> 2, (t >> 1) & 1, t & 1);
    ((2 * x + a) * 2 * dims[1] + 2 * y + b) * 2 * dims[2] + 2 * z + c
}

fn scatter_taps(taps: &[f64], c_out: usize, dims: [usize; 3], f: impl Fn(&mut f64, f64), out: &mut [f64]) {
    let vox = dims[0] * dims[1] * dims[2];
    for co in 0..c_out {
        let dst = &mut out[co * vox * 8..(co + 1) * vox * 8];
        for t in 0..8 {
            let src = &taps[(co * 8 + t) * vox..(co * 8 + t + 1) * vox];
            let mut v = 0;
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        f(&mut dst[tap_target(dims, x, y, z, t)], src[v]);
                        v += 1;
                    }
                }
            }
        }
    }
}

fn gather_taps(grad_out: &[f64], c_out: usize, dims: [usize; 3], taps: &mut [f64]) {
    let vox = dims[0] * dims[1] * dims[2];
    for co in 0..c_out {
        let src = &grad_out[co * vox * 8..(co + 1) * vox * 8];
        for t in 0..8 {
            let dst = &mut taps[(co * 8 + t) * vox..(co * 8 + t + 1) * vox];
            let mut v = 0;
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    for z in 0..dims[2] {
                        dst[v] = src[tap_target(dims, x, y, z, t)];
                        v += 1;
                    }
                }
            }
        }
    }
}
