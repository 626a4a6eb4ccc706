use std::collections::HashMap;

use crate::conv::{self, ConvGeometry};
use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Abs { x: Var },
    ClampMin { x: Var, min: T },
    Scale { x: Var, c: T },
    AddConst { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Concat { inputs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Upsample2 { x: Var },
    SpatialMean { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Expand { x: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumPerChannel { x: Var },
    SelectRow { table: Var, row: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient for a parameter, `None` if it did not take part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

const NORM_EPS: f64 = 1e-5;

fn channel_geometry(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared modules accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let value = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv { x, w, b, geom }, &inputs)
    }

    /// Per-sample, per-channel normalization over spatial dims with a
    /// learned affine transform (`gamma`, `beta` of shape `[C]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_geometry(xv.shape());
        assert_eq!(self.value(gamma).shape(), [c]);
        assert_eq!(self.value(beta).shape(), [c]);
        let eps = T::from_f64_lossy(NORM_EPS);
        let inv_s = T::one() / T::from_usize(s).unwrap();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        let mut mean = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n * c);
        for (i, (src, dst)) in xv.data().chunks(s).zip(out.data_mut().chunks_mut(s)).enumerate() {
            let m = src.iter().copied().sum::<T>() * inv_s;
            let var = src.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_s;
            let is = T::one() / (var + eps).sqrt();
            let ch = i % c;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = gv[ch] * (v - m) * is + bv[ch];
            }
            mean.push(m);
            inv_std.push(is);
        }
        self.push(out, Op::InstanceNorm { x, gamma, beta, mean, inv_std }, &[x, gamma, beta])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64_lossy(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::abs);
        self.push(out, Op::Abs { x }, &[x])
    }

    /// `max(x, min)` elementwise; the gradient passes where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let min = T::from_f64_lossy(min);
        let out = self.value(x).map(|v| v.max(min));
        self.push(out, Op::ClampMin { x, min }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst { x }, &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Tensor::new(av.shape(), av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x / y);
        self.push(out, Op::Div { a, b }, &[a, b])
    }

    /// Concatenate `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let first = self.shape(inputs[0]).to_vec();
        let (n, _, s) = channel_geometry(&first);
        let mut total = 0;
        for &v in inputs {
            let sh = self.shape(v);
            assert!(
                sh.len() == first.len() && sh[0] == n && sh[2..] == first[2..],
                "concat shape mismatch: {sh:?} vs {first:?}"
            );
            total += sh[1];
        }
        let mut shape = first.clone();
        shape[1] = total;
        let mut out = Vec::with_capacity(n * total * s);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[1] * s;
                out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        self.push(Tensor::new(&shape, out), Op::Concat { inputs: inputs.to_vec() }, inputs)
    }

    /// Channels `start..end` of a `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_geometry(xv.shape());
        assert!(start < end && end <= c, "bad channel slice {start}..{end} of {c}");
        let mut shape = xv.shape().to_vec();
        shape[1] = end - start;
        let mut out = Vec::with_capacity(n * (end - start) * s);
        for b in 0..n {
            out.extend_from_slice(&xv.data()[(b * c + start) * s..(b * c + end) * s]);
        }
        self.push(Tensor::new(&shape, out), Op::SliceChannels { x, start }, &[x])
    }

    /// Nearest-neighbour x2 upsampling of `[N, C, D, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape();
        assert_eq!(sh.len(), 5);
        let (d, h, w) = (sh[2], sh[3], sh[4]);
        let oshape = [sh[0], sh[1], 2 * d, 2 * h, 2 * w];
        let mut out = Tensor::zeros(&oshape);
        let src_sp = d * h * w;
        let dst_sp = 8 * src_sp;
        for (src, dst) in xv.data().chunks(src_sp).zip(out.data_mut().chunks_mut(dst_sp)) {
            for od in 0..2 * d {
                for oh in 0..2 * h {
                    let row = &src[((od / 2) * h + oh / 2) * w..][..w];
                    let line = &mut dst[(od * 2 * h + oh) * 2 * w..][..2 * w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        *v = row[ow / 2];
                    }
                }
            }
        }
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    /// Global average over spatial dims: `[N, C, ...] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = channel_geometry(xv.shape());
        let inv = T::one() / T::from_usize(s).unwrap();
        let out: Vec<T> = xv.data().chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        self.push(Tensor::new(&[n, c], out), Op::SpatialMean { x }, &[x])
    }

    /// `x @ w^T + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.shape().len(), 2);
        let (n, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), [o, i], "linear weight shape");
        assert_eq!(bv.shape(), [o], "linear bias shape");
        let mut out = Tensor::from_fn(&[n, o], |k| bv.data()[k % o]);
        T::gemm(n, i, o, T::one(), xv.data(), (i as isize, 1), wv.data(), (1, i as isize), T::one(), out.data_mut(), (o as isize, 1));
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Broadcast `x` to `shape`; ranks must agree and every source dim is
    /// either equal to the target or 1.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let strides = broadcast_strides(xv.shape(), shape);
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_broadcast(shape, &strides, |_, src| out.push(xv.data()[src]));
        self.push(Tensor::new(shape, out), Op::Expand { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Softmax along axis 1 of `[N, K, ...]`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = axis1_log_softmax(self.value(x)).map(T::exp);
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Log-softmax along axis 1 of `[N, K, ...]`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = axis1_log_softmax(self.value(x));
        self.push(out, Op::LogSoftmax { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Sum over batch and spatial dims: `[N, C, ...] -> [C]`.
    pub fn sum_per_channel(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, c, s) = channel_geometry(xv.shape());
        let mut out = vec![T::zero(); c];
        for (i, ch) in xv.data().chunks(s).enumerate() {
            out[i % c] = out[i % c] + ch.iter().copied().sum::<T>();
        }
        self.push(Tensor::new(&[c], out), Op::SumPerChannel { x }, &[x])
    }

    /// Row `row` of a `[R, E]` table as a `[1, E]` tensor.
    pub fn select_row(&mut self, table: Var, row: usize) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.shape().len(), 2);
        let e = tv.shape()[1];
        assert!(row < tv.shape()[0], "row {row} out of range");
        let out = Tensor::new(&[1, e], tv.data()[row * e..(row + 1) * e].to_vec());
        self.push(out, Op::SelectRow { table, row }, &[table])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { nodes: grads, params: self.params.clone() }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let unary = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(input, output, upstream)
            let xv = self.value(x);
            Tensor::new(
                xv.shape(),
                xv.data()
                    .iter()
                    .zip(out.data())
                    .zip(dy.data())
                    .map(|((&a, &y), &g)| f(a, y, g))
                    .collect(),
            )
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let (_, c, s) = channel_geometry(xv.shape());
                let gv = self.value(*gamma).data();
                let inv_s = T::one() / T::from_usize(s).unwrap();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let chunks = xv.data().chunks(s).zip(dy.data().chunks(s)).zip(dx.data_mut().chunks_mut(s));
                for (i, ((xs, gs), dxs)) in chunks.enumerate() {
                    let ch = i % c;
                    let (m, is) = (mean[i], inv_std[i]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&xvv, &g) in xs.iter().zip(gs) {
                        let xhat = (xvv - m) * is;
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * xhat;
                    }
                    dgamma[ch] = dgamma[ch] + sum_gx;
                    dbeta[ch] = dbeta[ch] + sum_g;
                    let k = gv[ch] * is;
                    for ((d, &xvv), &g) in dxs.iter_mut().zip(xs).zip(gs) {
                        let xhat = (xvv - m) * is;
                        *d = k * (g - sum_g * inv_s - xhat * sum_gx * inv_s);
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::new(&[c], dgamma));
                acc(*beta, Tensor::new(&[c], dbeta));
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                acc(*x, unary(*x, &|a, _, g| if a > T::zero() { g } else { g * slope }));
            }
            Op::Sigmoid { x } => acc(*x, unary(*x, &|_, y, g| g * y * (T::one() - y))),
            Op::Exp { x } => acc(*x, unary(*x, &|_, y, g| g * y)),
            Op::Log { x } => acc(*x, unary(*x, &|a, _, g| g / a)),
            Op::Abs { x } => acc(*x, unary(*x, &|a, _, g| g * a.signum())),
            Op::ClampMin { x, min } => {
                let min = *min;
                acc(*x, unary(*x, &|a, _, g| if a > min { g } else { T::zero() }));
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(*x, dy.map(|g| g * c));
            }
            Op::AddConst { x } => acc(*x, dy.clone()),
            Op::Add { a, b } => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|g| -g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, Tensor::new(av.shape(), dy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(bv.shape(), dy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, Tensor::new(av.shape(), dy.data().iter().zip(bv.data()).map(|(&g, &y)| g / y).collect()));
                }
                if self.needs(*b) {
                    let d = dy
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect();
                    acc(*b, Tensor::new(bv.shape(), d));
                }
            }
            Op::Concat { inputs } => {
                let (n, total, s) = channel_geometry(dy.shape());
                let mut offset = 0;
                for &v in inputs {
                    let sh = self.shape(v).to_vec();
                    let c = sh[1];
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(n * c * s);
                        for b in 0..n {
                            g.extend_from_slice(&dy.data()[(b * total + offset) * s..(b * total + offset + c) * s]);
                        }
                        acc(v, Tensor::new(&sh, g));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x).to_vec();
                let (n, c, s) = channel_geometry(&xs);
                let width = dy.shape()[1];
                let mut g = Tensor::zeros(&xs);
                for b in 0..n {
                    g.data_mut()[(b * c + start) * s..(b * c + start + width) * s]
                        .copy_from_slice(&dy.data()[b * width * s..(b + 1) * width * s]);
                }
                acc(*x, g);
            }
            Op::Upsample2 { x } => {
                let xs = self.shape(*x).to_vec();
                let (d, h, w) = (xs[2], xs[3], xs[4]);
                let mut g = Tensor::zeros(&xs);
                let src_sp = d * h * w;
                for (dst, src) in g.data_mut().chunks_mut(src_sp).zip(dy.data().chunks(8 * src_sp)) {
                    for od in 0..2 * d {
                        for oh in 0..2 * h {
                            let line = &src[(od * 2 * h + oh) * 2 * w..][..2 * w];
                            let row = &mut dst[((od / 2) * h + oh / 2) * w..][..w];
                            for (ow, &v) in line.iter().enumerate() {
                                row[ow / 2] = row[ow / 2] + v;
                            }
                        }
                    }
                }
                acc(*x, g);
            }
            Op::SpatialMean { x } => {
                let xs = self.shape(*x).to_vec();
                let (_, _, s) = channel_geometry(&xs);
                let inv = T::one() / T::from_usize(s).unwrap();
                let mut g = Vec::with_capacity(xs.iter().product());
                for &gv in dy.data() {
                    g.extend(std::iter::repeat_n(gv * inv, s));
                }
                acc(*x, Tensor::new(&xs, g));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[n, i]);
                    T::gemm(n, o, i, T::one(), dy.data(), (o as isize, 1), wv.data(), (i as isize, 1), T::zero(), dx.data_mut(), (i as isize, 1));
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(&[o, i]);
                    T::gemm(o, n, i, T::one(), dy.data(), (1, o as isize), xv.data(), (i as isize, 1), T::zero(), dw.data_mut(), (i as isize, 1));
                    acc(*w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in dy.data().chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    acc(*b, Tensor::new(&[o], db));
                }
            }
            Op::Expand { x } => {
                let xs = self.shape(*x).to_vec();
                let strides = broadcast_strides(&xs, dy.shape());
                let mut g = Tensor::zeros(&xs);
                let gd = g.data_mut();
                for_each_broadcast(dy.shape(), &strides, |o, src| gd[src] = gd[src] + dy.data()[o]);
                acc(*x, g);
            }
            Op::Reshape { x } => acc(*x, dy.clone().reshape(self.shape(*x))),
            Op::Softmax { x } => {
                let (n, k, s) = channel_geometry(out.shape());
                let mut g = Tensor::zeros(out.shape());
                for b in 0..n {
                    for sp in 0..s {
                        let at = |c: usize| (b * k + c) * s + sp;
                        let dot: T = (0..k).map(|c| out.data()[at(c)] * dy.data()[at(c)]).sum();
                        for c in 0..k {
                            g.data_mut()[at(c)] = out.data()[at(c)] * (dy.data()[at(c)] - dot);
                        }
                    }
                }
                acc(*x, g);
            }
            Op::LogSoftmax { x } => {
                let (n, k, s) = channel_geometry(out.shape());
                let mut g = Tensor::zeros(out.shape());
                for b in 0..n {
                    for sp in 0..s {
                        let at = |c: usize| (b * k + c) * s + sp;
                        let total: T = (0..k).map(|c| dy.data()[at(c)]).sum();
                        for c in 0..k {
                            g.data_mut()[at(c)] = dy.data()[at(c)] - out.data()[at(c)].exp() * total;
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Sum { x } => {
                let gv = dy.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(*x, Tensor::full(self.shape(*x), dy.item() / n));
            }
            Op::SumPerChannel { x } => {
                let xs = self.shape(*x).to_vec();
                let (_, c, s) = channel_geometry(&xs);
                let mut g = Tensor::zeros(&xs);
                for (i, ch) in g.data_mut().chunks_mut(s).enumerate() {
                    ch.fill(dy.data()[i % c]);
                }
                acc(*x, g);
            }
            Op::SelectRow { table, row } => {
                let ts = self.shape(*table).to_vec();
                let e = ts[1];
                let mut g = Tensor::zeros(&ts);
                g.data_mut()[row * e..(row + 1) * e].copy_from_slice(dy.data());
                acc(*table, g);
            }
        }
    }
}

fn axis1_log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, k, s) = channel_geometry(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for sp in 0..s {
            let at = |c: usize| (b * k + c) * s + sp;
            let max = (0..k).map(|c| x.data()[at(c)]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..k).map(|c| (x.data()[at(c)] - max).exp()).sum::<T>().ln();
            for c in 0..k {
                out.data_mut()[at(c)] = x.data()[at(c)] - lse;
            }
        }
    }
    out
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    assert_eq!(src.len(), dst.len(), "expand needs equal ranks: {src:?} -> {dst:?}");
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        assert!(src[i] == dst[i] || src[i] == 1, "cannot broadcast {src:?} to {dst:?}");
        strides[i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Visit every output position with its flat index and the flat index of
/// the broadcast source element.
fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let base: usize = idx[..rank - 1].iter().zip(strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(o + j, base + j * inner_stride);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
