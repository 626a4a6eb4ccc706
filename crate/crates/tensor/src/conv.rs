//! 3D convolution via im2col + GEMM.

use crate::direct::DirectConv;
use crate::{Scalar, Tensor};

/// Cubic-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Stride-1 geometry that preserves spatial extent.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self { kernel, stride: 1, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    /// Stride-2 geometry that halves even spatial extents.
    pub fn down(kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "downsampling needs an odd kernel");
        Self { kernel, stride: 2, dilation: 1, padding: (kernel - 1) / 2 }
    }

    pub fn pointwise() -> Self {
        Self { kernel: 1, stride: 1, dilation: 1, padding: 0 }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        assert!(padded >= span, "input extent {len} too small for kernel span {span}");
        (padded - span) / self.stride + 1
    }

    fn is_direct(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && 2 * self.padding == self.dilation * (self.kernel - 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

type Dims = [usize; 3];

const PAD: usize = usize::MAX;

/// Per-axis lookup `taps[tap][out] -> source index`, with [`PAD`] marking
/// positions that fall into zero padding.
fn tap_table(g: &ConvGeometry, out: usize, len: usize) -> Vec<Vec<usize>> {
    (0..g.kernel)
        .map(|tap| {
            (0..out)
                .map(|o| {
                    let pos = (o * g.stride + tap * g.dilation) as isize - g.padding as isize;
                    if pos >= 0 && (pos as usize) < len {
                        pos as usize
                    } else {
                        PAD
                    }
                })
                .collect()
        })
        .collect()
}

struct Taps {
    d: Vec<Vec<usize>>,
    h: Vec<Vec<usize>>,
    w: Vec<Vec<usize>>,
}

impl Taps {
    fn new(g: &ConvGeometry, inp: Dims, out: Dims) -> Self {
        Self {
            d: tap_table(g, out[0], inp[0]),
            h: tap_table(g, out[1], inp[1]),
            w: tap_table(g, out[2], inp[2]),
        }
    }
}

/// Unfold one sample `[C, D, H, W]` into `[C * k^3, P]` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, inp: Dims, out: Dims, g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let taps = Taps::new(g, inp, out);
    let p = out[0] * out[1] * out[2];
    let in_sp = inp[0] * inp[1] * inp[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * in_sp..(ci + 1) * in_sp];
        for td in &taps.d {
            for th in &taps.h {
                for tw in &taps.w {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    let mut lines = dst.chunks_exact_mut(out[2]);
                    for &id in td {
                        for &ih in th {
                            let line = lines.next().expect("column row sized to output");
                            if id == PAD || ih == PAD {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(id * inp[1] + ih) * inp[2]..][..inp[2]];
                            for (v, &iw) in line.iter_mut().zip(tw) {
                                *v = if iw == PAD { T::zero() } else { src[iw] };
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(row, c * k * k * k);
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], c: usize, inp: Dims, out: Dims, g: &ConvGeometry, dx: &mut [T]) {
    let taps = Taps::new(g, inp, out);
    let p = out[0] * out[1] * out[2];
    let in_sp = inp[0] * inp[1] * inp[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut dx[ci * in_sp..(ci + 1) * in_sp];
        for td in &taps.d {
            for th in &taps.h {
                for tw in &taps.w {
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    let mut lines = src.chunks_exact(out[2]);
                    for &id in td {
                        for &ih in th {
                            let line = lines.next().expect("column row sized to output");
                            if id == PAD || ih == PAD {
                                continue;
                            }
                            let dst = &mut xc[(id * inp[1] + ih) * inp[2]..][..inp[2]];
                            for (&v, &iw) in line.iter().zip(tw) {
                                if iw != PAD {
                                    dst[iw] = dst[iw] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims(shape: &[usize]) -> (usize, usize, Dims) {
    assert_eq!(shape.len(), 5, "conv3d expects [N, C, D, H, W], got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

pub(crate) fn output_shape(x: &[usize], w: &[usize], g: &ConvGeometry) -> Vec<usize> {
    let (n, c, inp) = dims(x);
    assert_eq!(w.len(), 5, "conv3d weight must be [Co, Ci, k, k, k]");
    assert_eq!(w[1], c, "conv3d channel mismatch: input has {c}, weight expects {}", w[1]);
    assert!(w[2..].iter().all(|&s| s == g.kernel), "weight kernel does not match geometry");
    vec![n, w[0], g.out_len(inp[0]), g.out_len(inp[1]), g.out_len(inp[2])]
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let oshape = output_shape(x.shape(), w.shape(), g);
    let (n, c, inp) = dims(x.shape());
    let out = [oshape[2], oshape[3], oshape[4]];
    let co = oshape[1];
    let kk = c * g.kernel.pow(3);
    let p = out.iter().product::<usize>();
    let in_len = c * inp.iter().product::<usize>();
    let mut y = Tensor::zeros(&oshape);
    if g.is_direct() {
        let direct = DirectConv::new(inp, c, co, g.kernel, g.dilation, g.padding);
        for s in 0..n {
            let ys = &mut y.data_mut()[s * co * p..(s + 1) * co * p];
            direct.forward(&x.data()[s * in_len..(s + 1) * in_len], w.data(), b.map(|b| b.data()), ys);
        }
        return y;
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let ys = &mut y.data_mut()[s * co * p..(s + 1) * co * p];
        if let Some(b) = b {
            for (row, &bv) in ys.chunks_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, c, inp, out, g, &mut cols);
            &cols
        };
        T::gemm(co, kk, p, T::one(), w.data(), (kk as isize, 1), src, (p as isize, 1), beta, ys, (p as isize, 1));
    }
    y
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, inp) = dims(x.shape());
    let oshape = dy.shape();
    let out = [oshape[2], oshape[3], oshape[4]];
    let co = oshape[1];
    let kk = c * g.kernel.pow(3);
    let p = out.iter().product::<usize>();
    let in_len = c * inp.iter().product::<usize>();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    if g.is_direct() {
        let direct = DirectConv::new(inp, c, co, g.kernel, g.dilation, g.padding);
        for s in 0..n {
            let dys = &dy.data()[s * co * p..(s + 1) * co * p];
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            if let Some(db) = db.as_mut() {
                for (acc, row) in db.data_mut().iter_mut().zip(dys.chunks(p)) {
                    *acc = *acc + row.iter().copied().sum::<T>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                direct.weight_grad(xs, dys, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                direct.input_grad(w.data(), dys, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
            }
        }
        return (dx, dw, db);
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };

    for s in 0..n {
        let dys = &dy.data()[s * co * p..(s + 1) * co * p];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.data_mut().iter_mut().zip(dys.chunks(p)) {
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, c, inp, out, g, &mut cols);
                &cols
            };
            // dW[co, kk] += dY[co, p] @ cols[kk, p]^T
            T::gemm(co, p, kk, T::one(), dys, (p as isize, 1), src, (1, p as isize), T::one(), dw.data_mut(), (kk as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dX[kk, p] = W[co, kk]^T @ dY[co, p]
                T::gemm(kk, co, p, T::one(), w.data(), (1, kk as isize), dys, (p as isize, 1), T::zero(), dxs, (p as isize, 1));
            } else {
                T::gemm(kk, co, p, T::one(), w.data(), (1, kk as isize), dys, (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
                col2im(&cols, c, inp, out, g, dxs);
            }
        }
    }
    (dx, dw, db)
}
