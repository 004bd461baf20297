//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and the
//! ids of its inputs, and [`Tape::backward`] walks the nodes in reverse.
//! Nodes whose inputs carry no gradient requirement are skipped.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, Conv2dGeom, ConvDims};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom, dims: ConvDims },
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    NormalizeLast(Var),
    Upsample { x: Var, scale: usize },
    Concat { a: Var, b: Var, axis: usize },
    Reshape(Var),
    TransposeLast2(Var),
    Sum(Var),
    Mean(Var),
    PixelNll { probs: Var, mask: Vec<bool>, floor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split a shape into (outer, axis length, inner) around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return dim_err("conv2d", format!("expected NCHW input and OIHW weight, got {xs:?} / {ws:?}"));
        }
        if geom.groups == 0 || geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::Parameter { op: "conv2d", detail: format!("{geom:?}") });
        }
        let (n, cin, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % geom.groups != 0 || cout % geom.groups != 0 || cin_g * geom.groups != cin {
            return dim_err(
                "conv2d",
                format!("weight expects {} input channels in {} groups, input has {cin}", cin_g * geom.groups, geom.groups),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return dim_err("conv2d", format!("bias shape {:?} for {cout} output channels", self.shape(b)));
            }
        }
        let (Some(oh), Some(ow)) = (geom.out_size(h, kh), geom.out_size(w_, kw)) else {
            return dim_err("conv2d", format!("{h}x{w_} input too small for {kh}x{kw} kernel with {geom:?}"));
        };
        let dims = ConvDims { n, cin, h, w: w_, cout, kh, kw, oh, ow };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            &geom,
        );
        let value = Tensor::new(&[n, cout, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, dims }, &inputs))
    }

    /// 2-D product, or batched product when both operands are 3-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (as_.len(), bs.len()) {
            (2, 2) => (1, as_[0], as_[1], bs[0], bs[1]),
            (3, 3) if as_[0] == bs[0] => (as_[0], as_[1], as_[2], bs[1], bs[2]),
            _ => return dim_err("matmul", format!("{as_:?} x {bs:?}")),
        };
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions differ: {as_:?} x {bs:?}"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if as_.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap();
        if self.shape(b) != [last] {
            return dim_err("add_bias", format!("bias {:?} for last axis {last}", self.shape(b)));
        }
        let mut value = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_mut(last) {
            for (v, &bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x·w + b` with `w` laid out `(in, out)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let mut value = self.value(x).clone();
        let d = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    d[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Divide each slice along the last axis by its sum.
    pub fn normalize_last(&mut self, x: Var) -> Var {
        let last = *self.shape(x).last().unwrap();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(last) {
            let total: T = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, Op::NormalizeLast(x), &[x])
    }

    /// Bilinear upsampling of the two trailing axes by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale < 1 {
            return Err(Error::Parameter { op: "upsample_bilinear", detail: format!("scale {scale} < 1") });
        }
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err("upsample_bilinear", format!("{shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let data = kernels::upsample_forward(self.value(x).data(), planes, h, w, scale);
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape[nd - 2] *= scale;
        out_shape[nd - 1] *= scale;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Upsample { x, scale }, &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return dim_err("concat", format!("{sa:?} and {sb:?} along axis {axis}"));
        }
        let (outer, la, inner) = around_axis(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] += lb;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { a, b, axis }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err("transpose", format!("{shape:?}"));
        }
        let nd = shape.len();
        let (r, c) = (shape[nd - 2], shape[nd - 1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for (blk, out) in src.chunks(r * c).zip(data.chunks_mut(r * c)) {
            transpose_into(blk, r, c, out);
        }
        let mut out_shape = shape;
        out_shape.swap(nd - 2, nd - 1);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::TransposeLast2(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean negative log-likelihood of the true class for `(N, 2, H, W)`
    /// probabilities; channel 1 is "pressure present". Probabilities are
    /// floored at `floor` before the logarithm.
    pub fn pixel_nll(&mut self, probs: Var, mask: &[bool], floor: T) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 4 || shape[1] != 2 || mask.len() != shape[0] * shape[2] * shape[3] {
            return dim_err("pixel_nll", format!("probs {shape:?} with {} mask pixels", mask.len()));
        }
        let hw = shape[2] * shape[3];
        let d = self.value(probs).data();
        let mut total = T::zero();
        for (i, &m) in mask.iter().enumerate() {
            let (n, p) = (i / hw, i % hw);
            let c = usize::from(m);
            total -= d[(n * 2 + c) * hw + p].max(floor).ln();
        }
        let value = Tensor::scalar(total / T::from_f64(mask.len() as f64));
        Ok(self.push(value, Op::PixelNll { probs, mask: mask.to_vec(), floor }, &[probs]))
    }

    /// Gradients of the single-element `loss` with respect to every leaf that
    /// was registered with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return dim_err("backward", format!("loss must be a single element, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[idx].value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape(), data).expect("gradient shape");
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, dims } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let cg = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, dims, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batched = sa.len() == 3;
                let (batch, m, k, n) =
                    if batched { (sa[0], sa[1], sa[2], sb[2]) } else { (1, sa[0], sa[1], sb[1]) };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n).t(),
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n),
                            T::zero(),
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let last = self.value(*b).len();
                    let mut db = vec![T::zero(); last];
                    for row in gd.chunks(last) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, like(*a, gd.iter().zip(bd).map(|(&g, &y)| g * y).collect()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, like(*b, gd.iter().zip(ad).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                let od = out.data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, like(*a, gd.iter().zip(bd).map(|(&g, &y)| g / y).collect()));
                }
                if self.wants(*b) {
                    let db = gd.iter().zip(bd).zip(od).map(|((&g, &y), &q)| -g * q / y).collect();
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let data = gd.to_vec();
                self.accumulate(grads, *x, like(*x, data));
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let two = T::from_f64(2.0);
                self.accumulate(grads, *x, like(*x, gd.iter().zip(xd).map(|(&g, &v)| two * v * g).collect()));
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(out.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = gd.iter().zip(xd).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = around_axis(out.shape(), *axis);
                let sd = out.data();
                let mut dx = vec![T::zero(); sd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| gd[idx(j)] * sd[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = sd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::NormalizeLast(x) => {
                let last = *out.shape().last().unwrap();
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); xd.len()];
                for ((xr, yr), (gr, dr)) in
                    xd.chunks(last).zip(out.data().chunks(last)).zip(gd.chunks(last).zip(dx.chunks_mut(last)))
                {
                    let total: T = xr.iter().copied().sum();
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for (d, &g) in dr.iter_mut().zip(gr) {
                        *d = (g - dot) / total;
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Upsample { x, scale } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*x).len() / (h * w);
                let dx = kernels::upsample_backward(gd, planes, h, w, *scale);
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = around_axis(self.shape(*a), *axis);
                let lb = self.shape(*b)[*axis];
                let mut da = Vec::with_capacity(outer * la * inner);
                let mut db = Vec::with_capacity(outer * lb * inner);
                let row = (la + lb) * inner;
                for o in 0..outer {
                    da.extend_from_slice(&gd[o * row..o * row + la * inner]);
                    db.extend_from_slice(&gd[o * row + la * inner..(o + 1) * row]);
                }
                self.accumulate(grads, *a, like(*a, da));
                self.accumulate(grads, *b, like(*b, db));
            }
            Op::TransposeLast2(x) => {
                let s = out.shape();
                let nd = s.len();
                let (r, c) = (s[nd - 2], s[nd - 1]);
                let mut dx = vec![T::zero(); gd.len()];
                for (blk, o) in gd.chunks(r * c).zip(dx.chunks_mut(r * c)) {
                    transpose_into(blk, r, c, o);
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, like(*x, vec![v; n]));
            }
            Op::PixelNll { probs, mask, floor } => {
                let s = self.shape(*probs);
                let hw = s[2] * s[3];
                let pd = self.value(*probs).data();
                let mut dp = vec![T::zero(); pd.len()];
                let scale = gd[0] / T::from_f64(mask.len() as f64);
                for (i, &m) in mask.iter().enumerate() {
                    let (n, p) = (i / hw, i % hw);
                    let at = (n * 2 + usize::from(m)) * hw + p;
                    if pd[at] > *floor {
                        dp[at] = -scale / pd[at];
                    }
                }
                self.accumulate(grads, *probs, like(*probs, dp));
            }
        }
    }
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
