//! Forward and backward kernels on channel-major activations.
//!
//! Activations are laid out `[C][N][H][W]` so that every channel is one
//! contiguous plane across the whole batch; convolutions then become a
//! single GEMM against an im2col matrix per group of samples.

use matrixmultiply::sgemm;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Channel-major activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Elements per channel plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }
}

/// `C = alpha * A·B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: A out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        sgemm(
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

/// Upper bound on im2col buffer elements; larger batches are processed in groups.
const COL_BUDGET: usize = 1 << 19;

fn group_size(k: usize, hw: usize, n: usize) -> usize {
    (COL_BUDGET / (k * hw).max(1)).clamp(1, n.max(1))
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f32>, Vec<f32>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two reusable per-thread buffers of at least `len` elements.
/// Their contents on entry are unspecified.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32], &mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (a, b) = &mut *bufs;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

/// Fills `col` (`[Cin·9][g·hw]`) for samples `n0..n0+g`.
fn im2col3x3(x: &Act, n0: usize, g: usize, col: &mut [f32]) {
    let (h, w, hw, p) = (x.h, x.w, x.hw(), x.plane());
    let ld = g * hw;
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                for j in 0..g {
                    let src = &x.data[ci * p + (n0 + j) * hw..ci * p + (n0 + j + 1) * hw];
                    let dst = &mut col[row * ld + j * hw..row * ld + (j + 1) * hw];
                    for y in 0..h {
                        let d = &mut dst[y * w..(y + 1) * w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let s = &src[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                d[0] = 0.0;
                                d[1..].copy_from_slice(&s[..w - 1]);
                            }
                            1 => d.copy_from_slice(s),
                            _ => {
                                d[..w - 1].copy_from_slice(&s[1..]);
                                d[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im3x3(col: &[f32], n0: usize, g: usize, dx: &mut Act) {
    let (h, w, hw, p) = (dx.h, dx.w, dx.hw(), dx.plane());
    let ld = g * hw;
    for ci in 0..dx.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                for j in 0..g {
                    let src = &col[row * ld + j * hw..row * ld + (j + 1) * hw];
                    let dst = &mut dx.data[ci * p + (n0 + j) * hw..ci * p + (n0 + j + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = &src[y * w..(y + 1) * w];
                        let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => d[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, b)| *a += b),
                            1 => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                            _ => d[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, b)| *a += b),
                        }
                    }
                }
            }
        }
    }
}

/// Output channels computed together by the direct kernel.
const CO_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Simd {
    Avx2,
    Avx512,
}

#[cfg(target_arch = "x86_64")]
fn simd_level() -> Option<Simd> {
    use std::sync::OnceLock;
    static LEVEL: OnceLock<Option<Simd>> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        if is_x86_feature_detected!("avx512f") {
            Some(Simd::Avx512)
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            Some(Simd::Avx2)
        } else {
            None
        }
    })
}

#[cfg(not(target_arch = "x86_64"))]
fn simd_level() -> Option<Simd> {
    None
}

/// Weights regrouped as `[co / 8][ci][tap][co % 8]`, zero past `c_out`.
fn pack_weights(c_in: usize, c_out: usize, w: impl Fn(usize, usize, usize) -> f32) -> Vec<f32> {
    let blocks = c_out.div_ceil(CO_BLOCK);
    let mut out = vec![0.0f32; blocks * c_in * 9 * CO_BLOCK];
    for co in 0..c_out {
        let (b, o) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..c_in {
            for tap in 0..9 {
                out[((b * c_in + ci) * 9 + tap) * CO_BLOCK + o] = w(co, ci, tap);
            }
        }
    }
    out
}

/// Sample `n` of `x` with a one-pixel zero border and trailing slack for
/// over-wide row reads.
fn pad_sample(x: &Act, n: usize, slack: usize, buf: &mut Vec<f32>) {
    let (h, w, hw, p) = (x.h, x.w, x.hw(), x.plane());
    let pw = w + 2;
    let pp = (h + 2) * pw;
    buf.clear();
    buf.resize(x.c * pp + slack, 0.0);
    for ci in 0..x.c {
        let src = &x.data[ci * p + n * hw..ci * p + (n + 1) * hw];
        for y in 0..h {
            let d = ci * pp + (y + 1) * pw + 1;
            buf[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
}

macro_rules! direct_kernel {
    ($name:ident, $feat:literal, $lanes:literal, $vec:ty, $zero:ident, $load:ident, $set1:ident, $fma:ident, $store:ident) => {
        /// Writes `c_out` output planes of one padded sample into `out`.
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        #[allow(clippy::too_many_arguments)]
        unsafe fn $name(
            xp: &[f32],
            c_in: usize,
            h: usize,
            w: usize,
            packed: &[f32],
            c_out: usize,
            out: &mut [f32],
            out_plane: usize,
        ) {
            use std::arch::x86_64::*;
            let pw = w + 2;
            let pp = (h + 2) * pw;
            let x_end = (c_in - 1) * pp + (h + 1) * pw + (w - 1) / $lanes * $lanes + 2 + $lanes;
            assert!(x_end <= xp.len() && packed.len() >= c_out.div_ceil(CO_BLOCK) * c_in * 9 * CO_BLOCK);
            assert!(c_out == 0 || (c_out - 1) * out_plane + h * w <= out.len());
            let xptr = xp.as_ptr();
            for b in 0..c_out.div_ceil(CO_BLOCK) {
                let wb = packed.as_ptr().add(b * c_in * 9 * CO_BLOCK);
                let rows = (c_out - b * CO_BLOCK).min(CO_BLOCK);
                for y in 0..h {
                    for x0 in (0..w).step_by($lanes) {
                        let mut acc: [$vec; CO_BLOCK] = [$zero(); CO_BLOCK];
                        for ci in 0..c_in {
                            let base = xptr.add(ci * pp + y * pw + x0);
                            let wc = wb.add(ci * 9 * CO_BLOCK);
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let xv = $load(base.add(ky * pw + kx));
                                    let wt = wc.add((ky * 3 + kx) * CO_BLOCK);
                                    for o in 0..CO_BLOCK {
                                        acc[o] = $fma($set1(*wt.add(o)), xv, acc[o]);
                                    }
                                }
                            }
                        }
                        let lanes = (w - x0).min($lanes);
                        let mut tmp = [0.0f32; $lanes];
                        for (o, a) in acc.iter().enumerate().take(rows) {
                            $store(tmp.as_mut_ptr(), *a);
                            let d = (b * CO_BLOCK + o) * out_plane + y * w + x0;
                            out[d..d + lanes].copy_from_slice(&tmp[..lanes]);
                        }
                    }
                }
            }
        }
    };
}

direct_kernel!(direct_avx2, "avx2,fma", 8, __m256, _mm256_setzero_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_fmadd_ps, _mm256_storeu_ps);
direct_kernel!(direct_avx512, "avx512f", 16, __m512, _mm512_setzero_ps, _mm512_loadu_ps, _mm512_set1_ps, _mm512_fmadd_ps, _mm512_storeu_ps);

macro_rules! weight_grad_kernel {
    ($name:ident, $feat:literal, $lanes:literal, $cob:literal, $vec:ty, $zero:ident, $load:ident, $fma:ident, $store:ident) => {
        /// Accumulates `dW[co][ci][tap] += Σ dy[co]·x[ci] shifted by tap` over a
        /// padded batch `xp` (`[ci][n][(h+2)·(w+2)]`). Requires `w % lanes == 0`.
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        #[allow(clippy::too_many_arguments)]
        unsafe fn $name(xp: &[f32], dy: &Act, c_in: usize, d_weight: &mut [f32]) {
            use std::arch::x86_64::*;
            let (n, h, w) = (dy.n, dy.h, dy.w);
            let (pw, hw, p) = (w + 2, dy.hw(), dy.plane());
            let pp = (h + 2) * pw;
            let c_out = dy.c;
            assert!(w % $lanes == 0 && xp.len() >= c_in * n * pp && dy.data.len() >= c_out * p);
            assert!(d_weight.len() >= c_out * c_in * 9);
            let (xptr, dptr) = (xp.as_ptr(), dy.data.as_ptr());
            for cb in (0..c_out).step_by($cob) {
                let rows = (c_out - cb).min($cob);
                for ci in 0..c_in {
                    for ky in 0..3 {
                        let mut acc: [[$vec; 3]; $cob] = [[$zero(); 3]; $cob];
                        for s in 0..n {
                            let xs = xptr.add((ci * n + s) * pp + ky * pw);
                            for y in 0..h {
                                for x0 in (0..w).step_by($lanes) {
                                    let xr = xs.add(y * pw + x0);
                                    let xv = [$load(xr), $load(xr.add(1)), $load(xr.add(2))];
                                    let off = s * hw + y * w + x0;
                                    for o in 0..$cob {
                                        let co = cb + o.min(rows - 1);
                                        let g = $load(dptr.add(co * p + off));
                                        for kx in 0..3 {
                                            acc[o][kx] = $fma(g, xv[kx], acc[o][kx]);
                                        }
                                    }
                                }
                            }
                        }
                        let mut tmp = [0.0f32; $lanes];
                        for (o, a) in acc.iter().enumerate().take(rows) {
                            for kx in 0..3 {
                                $store(tmp.as_mut_ptr(), a[kx]);
                                let sum: f64 = tmp.iter().map(|&v| v as f64).sum();
                                d_weight[((cb + o) * c_in + ci) * 9 + ky * 3 + kx] += sum as f32;
                            }
                        }
                    }
                }
            }
        }
    };
}

weight_grad_kernel!(weight_grad_avx2, "avx2,fma", 8, 4, __m256, _mm256_setzero_ps, _mm256_loadu_ps, _mm256_fmadd_ps, _mm256_storeu_ps);
weight_grad_kernel!(weight_grad_avx512, "avx512f", 16, 8, __m512, _mm512_setzero_ps, _mm512_loadu_ps, _mm512_fmadd_ps, _mm512_storeu_ps);

/// `x` with a one-pixel zero border around every image, `[C][N][(H+2)·(W+2)]`.
fn pad_batch(x: &Act) -> Vec<f32> {
    let (h, w, hw) = (x.h, x.w, x.hw());
    let pw = w + 2;
    let pp = (h + 2) * pw;
    let mut buf = vec![0.0f32; x.c * x.n * pp];
    for (img, src) in x.data.chunks_exact(hw.max(1)).enumerate().take(x.c * x.n) {
        for y in 0..h {
            let d = img * pp + (y + 1) * pw + 1;
            buf[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    buf
}

fn lane_width(level: Simd) -> usize {
    match level {
        Simd::Avx2 => 8,
        Simd::Avx512 => 16,
    }
}

/// Direct 3×3 convolution of `x` with packed weights into a fresh activation.
#[cfg_attr(not(target_arch = "x86_64"), allow(unused_variables))]
fn conv3x3_simd(x: &Act, packed: &[f32], c_out: usize, level: Simd) -> Act {
    let mut y = Act::zeros(c_out, x.n, x.h, x.w);
    let xb = lane_width(level);
    let p = y.plane();
    let hw = x.hw();
    let mut buf = Vec::new();
    for n in 0..x.n {
        pad_sample(x, n, xb + 2, &mut buf);
        let out = &mut y.data[n * hw..];
        #[cfg(target_arch = "x86_64")]
        // SAFETY: `level` comes from runtime feature detection.
        unsafe {
            match level {
                Simd::Avx2 => direct_avx2(&buf, x.c, x.h, x.w, packed, c_out, out, p),
                Simd::Avx512 => direct_avx512(&buf, x.c, x.h, x.w, packed, c_out, out, p),
            }
        }
    }
    y
}


/// 3×3 convolution, stride 1, zero padding 1, no bias. `weight` is `[Cout, Cin, 3, 3]`.
pub fn conv3x3(x: &Act, weight: &[f32], c_out: usize) -> Act {
    conv3x3_at(x, weight, c_out, simd_level())
}

fn conv3x3_at(x: &Act, weight: &[f32], c_out: usize, simd: Option<Simd>) -> Act {
    let k = x.c * 9;
    debug_assert_eq!(weight.len(), c_out * k);
    if let Some(level) = simd.filter(|&l| x.w >= lane_width(l)) {
        let packed = pack_weights(x.c, c_out, |co, ci, tap| weight[(co * x.c + ci) * 9 + tap]);
        return conv3x3_simd(x, &packed, c_out, level);
    }
    let hw = x.hw();
    let p = x.plane();
    let mut y = Act::zeros(c_out, x.n, x.h, x.w);
    let g = group_size(k, hw, x.n);
    with_scratch(k * g * hw, |col, _| {
        for n0 in (0..x.n).step_by(g) {
            let gn = g.min(x.n - n0);
            let ld = gn * hw;
            im2col3x3(x, n0, gn, col);
            gemm(c_out, k, ld, weight, k, 1, col, ld, 1, 0.0, &mut y.data[n0 * hw..], p, 1);
        }
    });
    y
}

/// Gradients of [`conv3x3`]; accumulates into `d_weight` and returns `dx`.
pub fn conv3x3_backward(x: &Act, weight: &[f32], dy: &Act, d_weight: &mut [f32]) -> Act {
    conv3x3_backward_at(x, weight, dy, d_weight, simd_level())
}

fn conv3x3_backward_at(x: &Act, weight: &[f32], dy: &Act, d_weight: &mut [f32], simd: Option<Simd>) -> Act {
    let k = x.c * 9;
    let c_out = dy.c;
    let hw = x.hw();
    let p = x.plane();
    let g = group_size(k, hw, x.n);
    if let Some(level) = simd.filter(|&l| x.w >= lane_width(l)) {
        // dx is the convolution of dy with the transposed, rotated kernel.
        let c_in = x.c;
        let packed = pack_weights(c_out, c_in, |ci, co, tap| weight[(co * c_in + ci) * 9 + 8 - tap]);
        if x.w % lane_width(level) == 0 {
            let xp = pad_batch(x);
            #[cfg(target_arch = "x86_64")]
            // SAFETY: `level` comes from runtime feature detection.
            unsafe {
                match level {
                    Simd::Avx2 => weight_grad_avx2(&xp, dy, c_in, d_weight),
                    Simd::Avx512 => weight_grad_avx512(&xp, dy, c_in, d_weight),
                }
            }
        } else {
            with_scratch(k * g * hw, |col, _| {
                for n0 in (0..x.n).step_by(g) {
                    let gn = g.min(x.n - n0);
                    let ld = gn * hw;
                    im2col3x3(x, n0, gn, col);
                    gemm(c_out, ld, k, &dy.data[n0 * hw..], p, 1, col, 1, ld, 1.0, d_weight, k, 1);
                }
            });
        }
        return conv3x3_simd(dy, &packed, c_in, level);
    }
    let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
    with_scratch(k * g * hw, |col, dcol| {
        for n0 in (0..x.n).step_by(g) {
            let gn = g.min(x.n - n0);
            let ld = gn * hw;
            im2col3x3(x, n0, gn, col);
            let dy_g = &dy.data[n0 * hw..];
            // dW += dY · colᵀ
            gemm(c_out, ld, k, dy_g, p, 1, col, 1, ld, 1.0, d_weight, k, 1);
            // dcol = Wᵀ · dY
            gemm(k, c_out, ld, weight, 1, k, dy_g, p, 1, 0.0, dcol, ld, 1);
            col2im3x3(dcol, n0, gn, &mut dx);
        }
    });
    dx
}

/// 1×1 convolution without bias. `weight` is `[Cout, Cin]`.
pub fn conv1x1(x: &Act, weight: &[f32], c_out: usize) -> Act {
    let p = x.plane();
    let mut y = Act::zeros(c_out, x.n, x.h, x.w);
    gemm(c_out, x.c, p, weight, x.c, 1, &x.data, p, 1, 0.0, &mut y.data, p, 1);
    y
}

pub fn conv1x1_backward(x: &Act, weight: &[f32], dy: &Act, d_weight: &mut [f32]) -> Act {
    let p = x.plane();
    gemm(dy.c, p, x.c, &dy.data, p, 1, &x.data, 1, p, 1.0, d_weight, x.c, 1);
    let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
    gemm(x.c, dy.c, p, weight, 1, x.c, &dy.data, p, 1, 0.0, &mut dx.data, p, 1);
    dx
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Act,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

/// Sum of `f(a[i], b[i])`, accumulated in f32 lanes per block and in f64 across blocks.
#[inline]
fn block_sum(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> f64 {
    const LANES: usize = 16;
    const BLOCK: usize = 1024;
    let mut total = 0.0f64;
    for (ca, cb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut acc = [0.0f32; LANES];
        let mut ia = ca.chunks_exact(LANES);
        let mut ib = cb.chunks_exact(LANES);
        for (xa, xb) in (&mut ia).zip(&mut ib) {
            for l in 0..LANES {
                acc[l] += f(xa[l], xb[l]);
            }
        }
        let tail: f32 = ia.remainder().iter().zip(ib.remainder()).map(|(&x, &y)| f(x, y)).sum();
        total += acc.iter().map(|&v| v as f64).sum::<f64>() + tail as f64;
    }
    total
}

/// Batch norm using batch statistics.
pub fn batch_norm_train(x: &Act, gamma: &[f32], beta: &[f32]) -> (Act, BnCache) {
    let p = x.plane();
    let mut y = Act::zeros(x.c, x.n, x.h, x.w);
    let mut xhat = Act::zeros(x.c, x.n, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let src = x.channel(c);
        let mean = block_sum(src, src, |v, _| v) / p as f64;
        let m32 = mean as f32;
        let var = block_sum(src, src, |v, _| (v - m32) * (v - m32)) / p as f64;
        let istd = 1.0 / (var + BN_EPS as f64).sqrt();
        let (mean32, istd32) = (mean as f32, istd as f32);
        let (g, b) = (gamma[c], beta[c]);
        for ((xh, yo), &v) in xhat
            .channel_mut(c)
            .iter_mut()
            .zip(y.channel_mut(c).iter_mut())
            .zip(src)
        {
            *xh = (v - mean32) * istd32;
            *yo = g * *xh + b;
        }
        inv_std.push(istd32);
        means.push(mean32);
        let unbiased = if p > 1 { var * p as f64 / (p - 1) as f64 } else { var };
        vars.push(unbiased as f32);
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean: means,
            var_unbiased: vars,
        },
    )
}

/// Batch norm using running statistics.
pub fn batch_norm_eval(x: &Act, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Act {
    let mut y = x.clone();
    for c in 0..x.c {
        let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        y.channel_mut(c).iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    y
}

/// Returns `dx`, accumulating into `d_gamma` and `d_beta`.
pub fn batch_norm_backward(
    dy: &Act,
    cache: &BnCache,
    gamma: &[f32],
    d_gamma: &mut [f32],
    d_beta: &mut [f32],
) -> Act {
    let p = dy.plane();
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let xh = cache.xhat.channel(c);
        let sum_dy = block_sum(g, g, |v, _| v);
        let sum_dy_xhat = block_sum(g, xh, |a, b| a * b);
        d_gamma[c] += sum_dy_xhat as f32;
        d_beta[c] += sum_dy as f32;
        let scale = gamma[c] * cache.inv_std[c] / p as f32;
        let (sdy, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
        for ((o, &gi), &xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *o = scale * (p as f32 * gi - sdy - xi * sdx);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Act, out: &Act) {
    dy.data
        .iter_mut()
        .zip(&out.data)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// 2×2 max pool, stride 2. Returns the output and, per output element, the
/// flat input index of the maximum.
pub fn max_pool2(x: &Act) -> (Act, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    let mut o = 0;
    for c in 0..x.c {
        for n in 0..x.n {
            let base = c * x.plane() + n * x.hw();
            for r in 0..oh {
                for col in 0..ow {
                    let i0 = base + 2 * r * x.w + 2 * col;
                    let cands = [i0, i0 + 1, i0 + x.w, i0 + x.w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    y.data[o] = x.data[best];
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &Act, arg: &[u32], x_shape: (usize, usize, usize, usize)) -> Act {
    let (c, n, h, w) = x_shape;
    let mut dx = Act::zeros(c, n, h, w);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// 2×2 stride-2 transposed convolution without bias. `weight` is `[Cin, Cout, 2, 2]`.
pub fn up_conv2(x: &Act, weight: &[f32], c_out: usize) -> Act {
    let k4 = c_out * 4;
    let p = x.plane();
    // Z[(co,a,b), (n,i,j)] = Σ_ci W[ci, (co,a,b)] · X[ci, (n,i,j)]
    let mut z = vec![0.0f32; k4 * p];
    gemm(k4, x.c, p, weight, 1, k4, &x.data, p, 1, 0.0, &mut z, p, 1);
    let mut y = Act::zeros(c_out, x.n, x.h * 2, x.w * 2);
    let (yp, yhw, yw) = (y.plane(), y.hw(), y.w);
    for co in 0..c_out {
        for a in 0..2 {
            for b in 0..2 {
                let zrow = &z[(co * 4 + a * 2 + b) * p..][..p];
                for n in 0..x.n {
                    for i in 0..x.h {
                        let src = &zrow[n * x.hw() + i * x.w..][..x.w];
                        let dst_row = co * yp + n * yhw + (2 * i + a) * yw + b;
                        for (j, &v) in src.iter().enumerate() {
                            y.data[dst_row + 2 * j] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn up_conv2_backward(x: &Act, weight: &[f32], dy: &Act, d_weight: &mut [f32]) -> Act {
    let c_out = dy.c;
    let k4 = c_out * 4;
    let p = x.plane();
    let mut dz = vec![0.0f32; k4 * p];
    let (yp, yhw, yw) = (dy.plane(), dy.hw(), dy.w);
    for co in 0..c_out {
        for a in 0..2 {
            for b in 0..2 {
                let zrow = &mut dz[(co * 4 + a * 2 + b) * p..][..p];
                for n in 0..x.n {
                    for i in 0..x.h {
                        let dst = &mut zrow[n * x.hw() + i * x.w..][..x.w];
                        let src_row = co * yp + n * yhw + (2 * i + a) * yw + b;
                        for (j, v) in dst.iter_mut().enumerate() {
                            *v = dy.data[src_row + 2 * j];
                        }
                    }
                }
            }
        }
    }
    // dW[ci, k] += Σ_p X[ci, p] · dZ[k, p]
    gemm(x.c, p, k4, &x.data, p, 1, &dz, 1, p, 1.0, d_weight, k4, 1);
    let mut dx = Act::zeros(x.c, x.n, x.h, x.w);
    gemm(x.c, k4, p, weight, k4, 1, &dz, p, 1, 0.0, &mut dx.data, p, 1);
    dx
}

/// Stacks `a` then `b` along channels.
pub fn concat(a: &Act, b: &Act) -> Act {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        n: a.n,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split(d: &Act, c_first: usize) -> (Act, Act) {
    let cut = c_first * d.plane();
    let first = Act {
        c: c_first,
        n: d.n,
        h: d.h,
        w: d.w,
        data: d.data[..cut].to_vec(),
    };
    let second = Act {
        c: d.c - c_first,
        n: d.n,
        h: d.h,
        w: d.w,
        data: d.data[cut..].to_vec(),
    };
    (first, second)
}

pub fn add_inplace(a: &mut Act, b: &Act) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
