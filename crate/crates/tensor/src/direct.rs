//! Register-blocked stride-1 "same" convolution.
//!
//! The input is copied into a zero-padded buffer so that every kernel tap
//! is a constant flat offset. Output rows are computed in tiles of
//! `LANES` voxels x `BLOCK` output channels held in local accumulators.
//! The input gradient is the same convolution applied to the upstream
//! gradient with the kernel transposed and flipped.

use std::any::TypeId;

use crate::Scalar;

const LANES: usize = 16;
const BLOCK: usize = 4;

type Dims = [usize; 3];

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    inp: Dims,
    /// padded extents
    pd: Dims,
    pad: usize,
    /// output row length rounded up to `LANES`
    wr: usize,
}

impl Layout {
    pub(crate) fn new(inp: Dims, pad: usize) -> Self {
        let pd = [inp[0] + 2 * pad, inp[1] + 2 * pad, inp[2] + 2 * pad];
        Self { inp, pd, pad, wr: inp[2].div_ceil(LANES) * LANES }
    }

    fn padded_plane(&self) -> usize {
        self.pd.iter().product()
    }

    fn rounded_plane(&self) -> usize {
        self.inp[0] * self.inp[1] * self.wr
    }

    fn plane(&self) -> usize {
        self.inp.iter().product()
    }

    /// Zero-padded copy of `[C, D, H, W]` with `LANES` slack at the end so
    /// the last tile may over-read.
    pub(crate) fn pad<T: Scalar>(&self, x: &[T], c: usize) -> Vec<T> {
        let psp = self.padded_plane();
        let sp = self.plane();
        let mut out = vec![T::zero(); c * psp + LANES];
        let [d, h, w] = self.inp;
        for ci in 0..c {
            for dd in 0..d {
                for hh in 0..h {
                    let src = &x[ci * sp + (dd * h + hh) * w..][..w];
                    let at = ci * psp + ((dd + self.pad) * self.pd[1] + hh + self.pad) * self.pd[2] + self.pad;
                    out[at..at + w].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// `[C, D, H, W]` rows widened to `wr` with zeros, channels padded to a
    /// multiple of `BLOCK`.
    fn widen<T: Scalar>(&self, x: &[T], c: usize) -> Vec<T> {
        let c4 = c.div_ceil(BLOCK) * BLOCK;
        let rsp = self.rounded_plane();
        let mut out = vec![T::zero(); c4 * rsp];
        let w = self.inp[2];
        for (src, dst) in x.chunks(w).zip(out.chunks_mut(self.wr)) {
            dst[..w].copy_from_slice(src);
        }
        out
    }

    fn offsets(&self, kernel: usize, dilation: usize) -> Vec<usize> {
        let mut offs = Vec::with_capacity(kernel.pow(3));
        for kd in 0..kernel {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    offs.push(((kd * self.pd[1] + kh) * self.pd[2] + kw) * dilation);
                }
            }
        }
        offs
    }
}

/// Weights `[Co, Ci, taps]` regrouped as `[Co/BLOCK][Ci][taps][BLOCK]`.
fn block_weights<T: Scalar>(w: &[T], co: usize, ci: usize, taps: usize) -> Vec<T> {
    let blocks = co.div_ceil(BLOCK);
    let mut out = vec![T::zero(); blocks * ci * taps * BLOCK];
    for o in 0..co {
        for i in 0..ci {
            for t in 0..taps {
                out[(((o / BLOCK) * ci + i) * taps + t) * BLOCK + o % BLOCK] = w[(o * ci + i) * taps + t];
            }
        }
    }
    out
}

#[inline(always)]
fn fma<T: Scalar, const FUSED: bool>(a: T, b: T, c: T) -> T {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `y[Co4, D, H, wr] = conv(xp)`; `wb` from [`block_weights`].
#[inline(always)]
fn forward_body<T: Scalar, const FUSED: bool>(
    l: &Layout,
    xp: &[T],
    ci: usize,
    wb: &[T],
    offs: &[usize],
    y: &mut [T],
) {
    let taps = offs.len();
    let psp = l.padded_plane();
    let rsp = l.rounded_plane();
    let blocks = wb.len() / (ci * taps * BLOCK);
    let [d, h, _] = l.inp;
    for dd in 0..d {
        for hh in 0..h {
            let base = (dd * l.pd[1] + hh) * l.pd[2];
            let out_row = (dd * h + hh) * l.wr;
            for j0 in (0..l.wr).step_by(LANES) {
                for blk in 0..blocks {
                    let mut acc = [[T::zero(); LANES]; BLOCK];
                    let wblk = &wb[blk * ci * taps * BLOCK..][..ci * taps * BLOCK];
                    for i in 0..ci {
                        let plane = &xp[i * psp + base + j0..];
                        let wi = &wblk[i * taps * BLOCK..][..taps * BLOCK];
                        for (t, &off) in offs.iter().enumerate() {
                            let s: &[T; LANES] = plane[off..off + LANES].try_into().unwrap();
                            let wv: &[T; BLOCK] = wi[t * BLOCK..t * BLOCK + BLOCK].try_into().unwrap();
                            for b in 0..BLOCK {
                                for k in 0..LANES {
                                    acc[b][k] = fma::<T, FUSED>(wv[b], s[k], acc[b][k]);
                                }
                            }
                        }
                    }
                    for (b, a) in acc.iter().enumerate() {
                        let at = (blk * BLOCK + b) * rsp + out_row + j0;
                        y[at..at + LANES].copy_from_slice(a);
                    }
                }
            }
        }
    }
}

/// `dw[Co4, Ci, taps] = sum_x dy[co, x] * xp[ci, x + off]`.
#[inline(always)]
fn weight_grad_body<T: Scalar, const FUSED: bool>(
    l: &Layout,
    xp: &[T],
    ci: usize,
    dyw: &[T],
    offs: &[usize],
    dw: &mut [T],
) {
    let taps = offs.len();
    let psp = l.padded_plane();
    let rsp = l.rounded_plane();
    let blocks = dyw.len() / (rsp * BLOCK);
    let [d, h, w] = l.inp;
    for i in 0..ci {
        for (t, &off) in offs.iter().enumerate() {
            for blk in 0..blocks {
                let mut acc = [[T::zero(); LANES]; BLOCK];
                for dd in 0..d {
                    for hh in 0..h {
                        let src = &xp[i * psp + (dd * l.pd[1] + hh) * l.pd[2] + off..];
                        let out_row = (dd * h + hh) * l.wr;
                        for j0 in (0..w).step_by(LANES) {
                            let s: &[T; LANES] = src[j0..j0 + LANES].try_into().unwrap();
                            for (b, a) in acc.iter_mut().enumerate() {
                                let at = (blk * BLOCK + b) * rsp + out_row + j0;
                                // widened dy rows are zero past `w`, masking the over-read
                                let g: &[T; LANES] = dyw[at..at + LANES].try_into().unwrap();
                                for k in 0..LANES {
                                    a[k] = fma::<T, FUSED>(g[k], s[k], a[k]);
                                }
                            }
                        }
                    }
                }
                for (b, a) in acc.iter().enumerate() {
                    let o = blk * BLOCK + b;
                    let total = a.iter().copied().fold(T::zero(), |x, y| x + y);
                    let slot = (o * ci + i) * taps + t;
                    if slot < dw.len() {
                        dw[slot] = dw[slot] + total;
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_avx2<T: Scalar>(l: &Layout, xp: &[T], ci: usize, wb: &[T], offs: &[usize], y: &mut [T]) {
    forward_body::<T, true>(l, xp, ci, wb, offs, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_avx2<T: Scalar>(l: &Layout, xp: &[T], ci: usize, dyw: &[T], offs: &[usize], dw: &mut [T]) {
    weight_grad_body::<T, true>(l, xp, ci, dyw, offs, dw)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn run_forward<T: Scalar>(l: &Layout, xp: &[T], ci: usize, wb: &[T], offs: &[usize], y: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(wb), Some(y), true) = (as_f32(xp), as_f32(wb), as_f32_mut(y), avx512::available()) {
        avx512::forward(l, xp, ci, wb, offs, y);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { forward_avx2(l, xp, ci, wb, offs, y) };
        return;
    }
    forward_body::<T, false>(l, xp, ci, wb, offs, y)
}

fn run_weight_grad<T: Scalar>(l: &Layout, xp: &[T], ci: usize, dyw: &[T], offs: &[usize], dw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(xp), Some(dyw), Some(dw), true) = (as_f32(xp), as_f32(dyw), as_f32_mut(dw), avx512::available()) {
        if offs.len().is_multiple_of(avx512::TAP_GROUP) {
            avx512::weight_grad(l, xp, ci, dyw, offs, dw);
            return;
        }
    }
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { weight_grad_avx2(l, xp, ci, dyw, offs, dw) };
        return;
    }
    weight_grad_body::<T, false>(l, xp, ci, dyw, offs, dw)
}

fn as_f32<T: Scalar>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: `T` is `f32` when the type ids agree.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) })
}

fn as_f32_mut<T: Scalar>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: as above.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) })
}

/// Hand-written AVX-512 kernels for `f32`. Each tile covers four 16-voxel
/// row segments, so one weight broadcast feeds four fused multiply-adds.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{Layout, BLOCK, LANES};

    /// Taps handled together by the weight-gradient kernel.
    pub(super) const TAP_GROUP: usize = 3;
    const SEGS: usize = 4;

    pub(super) fn available() -> bool {
        std::is_x86_feature_detected!("avx512f")
    }

    /// `(input offset, output offset)` of every 16-voxel row segment.
    fn segments(l: &Layout) -> Vec<(usize, usize)> {
        let [d, h, _] = l.inp;
        let mut segs = Vec::with_capacity(d * h * l.wr / LANES);
        for dd in 0..d {
            for hh in 0..h {
                let base = (dd * l.pd[1] + hh) * l.pd[2];
                let out_row = (dd * h + hh) * l.wr;
                for j0 in (0..l.wr).step_by(LANES) {
                    segs.push((base + j0, out_row + j0));
                }
            }
        }
        segs
    }

    pub(super) fn forward(l: &Layout, xp: &[f32], ci: usize, wb: &[f32], offs: &[usize], y: &mut [f32]) {
        let taps = offs.len();
        let psp = l.padded_plane();
        let rsp = l.rounded_plane();
        let blocks = wb.len() / (ci * taps * BLOCK);
        let segs = segments(l);
        let max_off = offs.iter().copied().max().unwrap_or(0);
        let max_in = segs.iter().map(|s| s.0).max().unwrap_or(0);
        assert!((ci - 1) * psp + max_in + max_off + LANES <= xp.len(), "padded input too short");
        assert!(blocks * BLOCK * rsp <= y.len() && wb.len() >= blocks * ci * taps * BLOCK);
        // SAFETY: feature detected by the caller; reads are bounded by the
        // assertions above and writes stay inside `blocks * BLOCK * rsp`.
        unsafe { forward_impl(xp, ci, wb, offs, y, &segs, psp, rsp, blocks) }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    unsafe fn forward_impl(
        xp: &[f32],
        ci: usize,
        wb: &[f32],
        offs: &[usize],
        y: &mut [f32],
        segs: &[(usize, usize)],
        psp: usize,
        rsp: usize,
        blocks: usize,
    ) {
        let taps = offs.len();
        let xptr = xp.as_ptr();
        let yptr = y.as_mut_ptr();
        for blk in 0..blocks {
            let wblk = wb.as_ptr().add(blk * ci * taps * BLOCK);
            for chunk in segs.chunks(SEGS) {
                // a short final chunk repeats its last segment; the duplicate
                // writes carry identical values
                let pick = |k: usize| chunk[k.min(chunk.len() - 1)];
                let ins = [pick(0).0, pick(1).0, pick(2).0, pick(3).0];
                let mut acc = [[_mm512_setzero_ps(); SEGS]; BLOCK];
                for i in 0..ci {
                    let plane = xptr.add(i * psp);
                    let wi = wblk.add(i * taps * BLOCK);
                    for (t, &off) in offs.iter().enumerate() {
                        let x0 = _mm512_loadu_ps(plane.add(ins[0] + off));
                        let x1 = _mm512_loadu_ps(plane.add(ins[1] + off));
                        let x2 = _mm512_loadu_ps(plane.add(ins[2] + off));
                        let x3 = _mm512_loadu_ps(plane.add(ins[3] + off));
                        let wt = wi.add(t * BLOCK);
                        for (b, a) in acc.iter_mut().enumerate() {
                            let wv = _mm512_set1_ps(*wt.add(b));
                            a[0] = _mm512_fmadd_ps(wv, x0, a[0]);
                            a[1] = _mm512_fmadd_ps(wv, x1, a[1]);
                            a[2] = _mm512_fmadd_ps(wv, x2, a[2]);
                            a[3] = _mm512_fmadd_ps(wv, x3, a[3]);
                        }
                    }
                }
                for (b, a) in acc.iter().enumerate() {
                    let ch = yptr.add((blk * BLOCK + b) * rsp);
                    for (k, v) in a.iter().enumerate() {
                        _mm512_storeu_ps(ch.add(pick(k).1), *v);
                    }
                }
            }
        }
    }

    pub(super) fn weight_grad(l: &Layout, xp: &[f32], ci: usize, dyw: &[f32], offs: &[usize], dw: &mut [f32]) {
        let taps = offs.len();
        let psp = l.padded_plane();
        let rsp = l.rounded_plane();
        let blocks = dyw.len() / (rsp * BLOCK);
        let segs = segments(l);
        let max_off = offs.iter().copied().max().unwrap_or(0);
        let max_in = segs.iter().map(|s| s.0).max().unwrap_or(0);
        assert!((ci - 1) * psp + max_in + max_off + LANES <= xp.len(), "padded input too short");
        assert_eq!(taps % TAP_GROUP, 0);
        // SAFETY: feature detected by the caller; reads bounded as above and
        // `dyw` holds `blocks * BLOCK * rsp` values.
        unsafe { weight_grad_impl(xp, ci, dyw, offs, dw, &segs, psp, rsp, blocks) }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    unsafe fn weight_grad_impl(
        xp: &[f32],
        ci: usize,
        dyw: &[f32],
        offs: &[usize],
        dw: &mut [f32],
        segs: &[(usize, usize)],
        psp: usize,
        rsp: usize,
        blocks: usize,
    ) {
        let taps = offs.len();
        let xptr = xp.as_ptr();
        let gptr = dyw.as_ptr();
        for i in 0..ci {
            let plane = xptr.add(i * psp);
            for tg in (0..taps).step_by(TAP_GROUP) {
                let o = [offs[tg], offs[tg + 1], offs[tg + 2]];
                for blk in 0..blocks {
                    let g = gptr.add(blk * BLOCK * rsp);
                    let mut acc = [[_mm512_setzero_ps(); TAP_GROUP]; BLOCK];
                    for &(inp, out) in segs {
                        let x0 = _mm512_loadu_ps(plane.add(inp + o[0]));
                        let x1 = _mm512_loadu_ps(plane.add(inp + o[1]));
                        let x2 = _mm512_loadu_ps(plane.add(inp + o[2]));
                        for (b, a) in acc.iter_mut().enumerate() {
                            // widened dy rows are zero past `w`, masking the over-read
                            let gv = _mm512_loadu_ps(g.add(b * rsp + out));
                            a[0] = _mm512_fmadd_ps(gv, x0, a[0]);
                            a[1] = _mm512_fmadd_ps(gv, x1, a[1]);
                            a[2] = _mm512_fmadd_ps(gv, x2, a[2]);
                        }
                    }
                    for (b, a) in acc.iter().enumerate() {
                        let oc = blk * BLOCK + b;
                        for (k, v) in a.iter().enumerate() {
                            let slot = (oc * ci + i) * taps + tg + k;
                            if slot < dw.len() {
                                dw[slot] += _mm512_reduce_add_ps(*v);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One stride-1 same-padded convolution problem.
pub(crate) struct DirectConv {
    layout: Layout,
    offs: Vec<usize>,
    ci: usize,
    co: usize,
    taps: usize,
}

impl DirectConv {
    pub(crate) fn new(inp: Dims, ci: usize, co: usize, kernel: usize, dilation: usize, pad: usize) -> Self {
        let layout = Layout::new(inp, pad);
        let offs = layout.offsets(kernel, dilation);
        Self { layout, offs, ci, co, taps: kernel.pow(3) }
    }

    /// One sample: `x [Ci, D, H, W]`, `w [Co, Ci, taps]` into `y [Co, D, H, W]`
    /// (overwritten, then `bias` added per channel).
    pub(crate) fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
        let xp = self.layout.pad(x, self.ci);
        let wb = block_weights(w, self.co, self.ci, self.taps);
        self.forward_padded(&xp, &wb, self.ci, self.co, bias, y);
    }

    fn forward_padded<T: Scalar>(&self, xp: &[T], wb: &[T], ci: usize, co: usize, bias: Option<&[T]>, y: &mut [T]) {
        let l = &self.layout;
        let rsp = l.rounded_plane();
        let mut wide = vec![T::zero(); co.div_ceil(BLOCK) * BLOCK * rsp];
        run_forward(l, xp, ci, wb, &self.offs, &mut wide);
        let w = l.inp[2];
        let sp = l.plane();
        for o in 0..co {
            let b = bias.map_or(T::zero(), |b| b[o]);
            let src = &wide[o * rsp..(o + 1) * rsp];
            let dst = &mut y[o * sp..(o + 1) * sp];
            for (s, dd) in src.chunks(l.wr).zip(dst.chunks_mut(w)) {
                for (dv, &sv) in dd.iter_mut().zip(s) {
                    *dv = sv + b;
                }
            }
        }
    }

    /// Input gradient for one sample, written into `dx [Ci, D, H, W]`.
    pub(crate) fn input_grad<T: Scalar>(&self, w: &[T], dy: &[T], dx: &mut [T]) {
        let taps = self.taps;
        // w'[ci, co, t] = w[co, ci, taps - 1 - t]
        let mut wt = vec![T::zero(); w.len()];
        for o in 0..self.co {
            for i in 0..self.ci {
                for t in 0..taps {
                    wt[(i * self.co + o) * taps + t] = w[(o * self.ci + i) * taps + (taps - 1 - t)];
                }
            }
        }
        let dyp = self.layout.pad(dy, self.co);
        let wb = block_weights(&wt, self.ci, self.co, taps);
        self.forward_padded(&dyp, &wb, self.co, self.ci, None, dx);
    }

    /// Accumulate the weight gradient for one sample into `dw [Co, Ci, taps]`.
    pub(crate) fn weight_grad<T: Scalar>(&self, x: &[T], dy: &[T], dw: &mut [T]) {
        let xp = self.layout.pad(x, self.ci);
        let dyw = self.layout.widen(dy, self.co);
        run_weight_grad(&self.layout, &xp, self.ci, &dyw, &self.offs, dw);
    }
}
