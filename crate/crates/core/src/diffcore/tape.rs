//! Wengert tape: every op computes its value eagerly and records how to
//! propagate a cotangent back to its inputs.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SoftmaxXent { logits: Var, target: Vec<f64> },
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    RowDot(Var, Var),
    Reshape(Var),
    Gap(Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    relu_inputs: Option<Vec<f64>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents of every tape node with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4], TensorError> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(TensorError::Rank { op, expected: 4, shape: s.to_vec() }),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise log-sum-exp, max-shifted.
fn row_lse<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row {
        if v.re() > max.re() {
            max = v;
        }
    }
    let mut s = T::zero();
    for &v in row {
        s += (v - max).exp();
    }
    max + s.ln()
}

fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        dst[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[(ci * h + sy as usize) * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            img[(ci * h + sy as usize) * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), relu_inputs: None }
    }

    /// Record every ReLU pre-activation seen by this tape. Used by the
    /// finite-difference checker to skip coordinates that straddle a kink.
    pub fn with_kink_tracking() -> Self {
        Self { nodes: Vec::new(), relu_inputs: Some(Vec::new()) }
    }

    pub fn kink_inputs(&self) -> Option<&[f64]> {
        self.relu_inputs.as_deref()
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

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, value: &Tensor<f64>) -> Var {
        self.constant(Tensor::from_f64(value))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::from_f64(c);
        let out = self.value(a).map(|x| x * k);
        let g = self.ng(a);
        self.push(out, Op::Scale(a, c), g)
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(bias).data());
        let mut data = va.to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vb[j];
            }
        }
        let g = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, bias), g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        if let Some(track) = self.relu_inputs.as_mut() {
            track.extend(self.nodes[a.0].value.data().iter().map(|v| v.re()));
        }
        let out = self.value(a).map(|x| if x.re() > 0.0 { x } else { T::zero() });
        let g = self.ng(a);
        self.push(out, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let g = self.ng(a);
        self.push(out, Op::Sigmoid(a), g)
    }

    /// Row-wise softmax of a `[m, n]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("softmax")?;
        let z = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &z[r * n..(r + 1) * n];
            let lse = row_lse(row);
            out.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let g = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), g))
    }

    /// `-Σ_r Σ_j target[r, j] · log_softmax(logits[r, :])_j` as a scalar.
    /// The target is a constant; rows need not be normalized.
    pub fn softmax_xent(&mut self, logits: Var, target: &Tensor<f64>) -> Result<Var, TensorError> {
        let (m, n) = self.value(logits).dims2("softmax_xent")?;
        if target.shape() != [m, n] {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_xent",
                left: vec![m, n],
                right: target.shape().to_vec(),
            });
        }
        let z = self.value(logits).data();
        let t = target.data();
        let mut loss = T::zero();
        for r in 0..m {
            let row = &z[r * n..(r + 1) * n];
            let lse = row_lse(row);
            for j in 0..n {
                let tj = t[r * n + j];
                if tj != 0.0 {
                    loss -= T::from_f64(tj) * (row[j] - lse);
                }
            }
        }
        let g = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, target: t.to_vec() }, g))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let g = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row gather `out[r] = a[idx[r]]`; repeated indices broadcast a row.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, len: m });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let g = self.ng(a);
        Ok(self.push(Tensor::new(vec![idx.len(), n], data)?, Op::GatherRows(a, idx.to_vec()), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n1) = self.value(a).dims2("concat_cols")?;
        let (m2, n2) = self.value(b).dims2("concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&va[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&vb[r * n2..(r + 1) * n2]);
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n1 + n2], data)?, Op::ConcatCols(a, b), g))
    }

    /// Per-row inner product of two `[m, n]` matrices, giving `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("row_dot")?;
        same_shape("row_dot", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let mut s = T::zero();
            for j in 0..n {
                s += va[r * n + j] * vb[r * n + j];
            }
            out.push(s);
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::vector(out), Op::RowDot(a, b), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        let g = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Global average pooling `[n, c, h, w] -> [n, c]`.
    pub fn gap(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("gap", self.value(x))?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for plane in src.chunks(hw) {
            let mut s = T::zero();
            for &v in plane {
                s += v;
            }
            out.push(s * inv);
        }
        let g = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::Gap(x), g))
    }

    /// Same-padded stride-1 convolution with a square odd kernel.
    /// `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let [n, c, h, wd] = dims4("conv2d", self.value(x))?;
        let [o, c2, k, k2] = dims4("conv2d", self.value(w))?;
        if c != c2 || k != k2 || k % 2 == 0 || self.shape(b) != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let hw = h * wd;
        let ckk = c * k * k;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut out = vec![T::zero(); n * o * hw];
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for i in 0..n {
            im2col(&xs[i * c * hw..(i + 1) * c * hw], c, h, wd, k, &mut cols);
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bs[oc]);
            }
            T::gemm(o, ckk, hw, ws, (ckk, 1), &cols, (hw, 1), dst, true);
        }
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, o, h, wd], out)?, Op::Conv2d { x, w, b }, g))
    }

    /// 2x2 max pooling with stride 2; spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("max_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Rank { op: "max_pool2", expected: 4, shape: vec![n, c, h, w] });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx].re() > src[best].re() {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let g = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, g))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(TensorError::NonScalar { shape: out.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for (x, &y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = g.clone();
                    for (x, &y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let k = T::from_f64(*c);
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*bias) {
                    let (m, n) = g.dims2("add_row")?;
                    let mut gb = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), self.value(*b).data(), (1, n), &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), g.data(), (n, 1), &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (x, &inp) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if inp.re() <= 0.0 {
                        *x = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (x, &s) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *x *= s * (T::one() - s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let (m, n) = g.dims2("softmax")?;
                let p = node.value.data();
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += g.data()[r * n + j] * p[r * n + j];
                    }
                    for j in 0..n {
                        ga[r * n + j] = p[r * n + j] * (g.data()[r * n + j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], ga)?);
            }
            Op::SoftmaxXent { logits, target } => {
                let z = self.value(*logits);
                let (m, n) = z.dims2("softmax_xent")?;
                let up = g.data()[0];
                let mut gz = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = &z.data()[r * n..(r + 1) * n];
                    let lse = row_lse(row);
                    let trow = &target[r * n..(r + 1) * n];
                    let mass: f64 = trow.iter().sum();
                    let mass = T::from_f64(mass);
                    for j in 0..n {
                        let p = (row[j] - lse).exp();
                        gz[r * n + j] = up * (mass * p - T::from_f64(trow[j]));
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![m, n], gz)?);
            }
            Op::Sum(a) => {
                let up = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), up));
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let mut ga = self.zeros_like(*a);
                    let n = g.shape()[1];
                    let dst = ga.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            dst[i * n + j] += g.data()[r * n + j];
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, n) = g.dims2("concat_cols")?;
                let n1 = self.shape(*a)[1];
                let n2 = n - n1;
                if self.ng(*a) {
                    let mut ga = Vec::with_capacity(m * n1);
                    for r in 0..m {
                        ga.extend_from_slice(&g.data()[r * n..r * n + n1]);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, n1], ga)?);
                }
                if self.ng(*b) {
                    let mut gb = Vec::with_capacity(m * n2);
                    for r in 0..m {
                        gb.extend_from_slice(&g.data()[r * n + n1..(r + 1) * n]);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![m, n2], gb)?);
                }
            }
            Op::RowDot(a, b) => {
                let (m, n) = self.value(*a).dims2("row_dot")?;
                for (src, dst) in [(*b, *a), (*a, *b)] {
                    if !self.ng(dst) {
                        continue;
                    }
                    let other = self.value(src).data();
                    let mut gd = vec![T::zero(); m * n];
                    for r in 0..m {
                        let up = g.data()[r];
                        for j in 0..n {
                            gd[r * n + j] = up * other[r * n + j];
                        }
                    }
                    self.accumulate(grads, dst, Tensor::new(vec![m, n], gd)?);
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
            Op::Gap(x) => {
                let [_, _, h, w] = dims4("gap", self.value(*x))?;
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for &up in g.data() {
                    let v = up * inv;
                    gx.extend(std::iter::repeat_n(v, hw));
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
            }
            Op::Conv2d { x, w, b } => {
                let [n, c, h, wd] = dims4("conv2d", self.value(*x))?;
                let [o, _, k, _] = dims4("conv2d", self.value(*w))?;
                let hw = h * wd;
                let ckk = c * k * k;
                let gd = g.data();
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); o];
                    for i in 0..n {
                        for (oc, slot) in gb.iter_mut().enumerate() {
                            for &v in &gd[(i * o + oc) * hw..(i * o + oc + 1) * hw] {
                                *slot += v;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(gb));
                }
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut cols = vec![T::zero(); ckk * hw];
                let mut gw = if self.ng(*w) { Some(vec![T::zero(); o * ckk]) } else { None };
                let mut gx = if self.ng(*x) { Some(vec![T::zero(); n * c * hw]) } else { None };
                for i in 0..n {
                    let gout = &gd[i * o * hw..(i + 1) * o * hw];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&xs[i * c * hw..(i + 1) * c * hw], c, h, wd, k, &mut cols);
                        // dW += G_i · colsᵀ
                        T::gemm(o, hw, ckk, gout, (hw, 1), &cols, (1, hw), gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = Wᵀ · G_i
                        T::gemm(ckk, o, hw, ws, (1, ckk), gout, (hw, 1), &mut cols, false);
                        col2im_add(&cols, c, h, wd, k, &mut gx[i * c * hw..(i + 1) * c * hw]);
                    }
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), gw)?);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.ng(*x) {
                    let mut gx = self.zeros_like(*x);
                    let dst = gx.data_mut();
                    for (&src, &up) in argmax.iter().zip(g.data()) {
                        dst[src] += up;
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}
