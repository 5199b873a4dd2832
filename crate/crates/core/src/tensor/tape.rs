use super::gemm::{gemm, Layout};
use super::{Tensor, TensorError};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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
    Relu(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Sum {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        scale: f64,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_block: usize,
        b_block: usize,
    },
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
        row: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        dim: usize,
        norms: Vec<(f64, f64, f64)>,
    },
    SoftmaxCe {
        x: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn np(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar_shape(s: &[usize]) -> bool {
    s.is_empty()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let value = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(value, op, needs_grad)
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, TensorError> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last [`Tape::backward`] root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = if sa == sb {
            sa.to_vec()
        } else if scalar_shape(sa) {
            sb.to_vec()
        } else if scalar_shape(sb) {
            sa.to_vec()
        } else {
            return Err(TensorError::shape(op, sa, sb));
        };
        let (da, db) = (self.data(a), self.data(b));
        let n = da.len().max(db.len());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, data, Op::Scale(a, factor), needs)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.out(shape, data, Op::Relu(a), needs)
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::row_major(k),
            self.data(b),
            Layout::row_major(n),
            0.0,
            &mut data,
            Layout::row_major(n),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![m, n], data, Op::MatMul(a, b), needs))
    }

    /// Adds `bias[D]` to every row of `x[.., D]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::shape("add_row_bias", sx, sb));
        }
        let d = sb[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.out(shape, data, Op::AddRowBias(x, bias), needs))
    }

    /// 2-D cross-correlation. `input` is `[C, H, W]` or `[N, C, H, W]`, `kernel` is
    /// `[O, C, kh, kw]`, optional `bias` is `[O]`. Output size is
    /// `⌊(H + 2·pad − kh)/stride⌋ + 1` per spatial axis; padding is zero.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let batched = si.len() == 4;
        let (n, c, h, w) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => return Err(TensorError::shape("conv2d", &si, &sk)),
        };
        if sk.len() != 4 || sk[1] != c || stride == 0 {
            return Err(TensorError::shape("conv2d", &si, &sk));
        }
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::shape("conv2d", &si, &sk));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::shape("conv2d bias", self.shape(b), &[o]));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.data(input), &geom);
        let (ckk, np, p) = (geom.ckk(), geom.np(), geom.ho * geom.wo);
        let mut tmp = vec![0.0; o * np];
        gemm(
            o,
            ckk,
            np,
            self.data(kernel),
            Layout::row_major(ckk),
            &cols,
            Layout::row_major(np),
            0.0,
            &mut tmp,
            Layout::row_major(np),
        );
        let mut data = vec![0.0; n * o * p];
        let bias_data = bias.map(|b| self.data(b));
        for oc in 0..o {
            let b = bias_data.map_or(0.0, |d| d[oc]);
            for img in 0..n {
                let src = &tmp[oc * np + img * p..oc * np + (img + 1) * p];
                let dst = &mut data[(img * o + oc) * p..(img * o + oc + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let shape = if batched {
            vec![n, o, geom.ho, geom.wo]
        } else {
            vec![o, geom.ho, geom.wo]
        };
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let cols = if self.needs(kernel) { cols } else { Vec::new() };
        Ok(self.out(
            shape,
            data,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis {
                axis,
                rank: s.len(),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let d = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], src);
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.out(
            shape,
            data,
            Op::Sum {
                x,
                outer,
                n,
                inner,
                scale,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let flat = self.reshape(x, &[n]).expect("same element count");
        self.reduce(flat, 0, false).expect("axis 0 of rank 1")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(TensorError::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.out(shape.to_vec(), data, Op::Reshape(x), needs))
    }

    /// Concatenation along `axis`; other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if axis >= sa.len() {
            return Err(TensorError::BadAxis {
                axis,
                rank: sa.len(),
            });
        }
        let same_elsewhere = sa.len() == sb.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !same_elsewhere {
            return Err(TensorError::shape("concat", &sa, &sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_block, b_block) = (sa[axis] * inner, sb[axis] * inner);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(outer * (a_block + b_block));
        for o in 0..outer {
            data.extend_from_slice(&da[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&db[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(
            shape,
            data,
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            },
            needs,
        ))
    }

    /// Gathers slices along axis 0 (repeats allowed).
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(TensorError::BadAxis { axis: 0, rank: 0 });
        }
        let row: usize = s[1..].iter().product();
        let d = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(TensorError::BadIndex { index: i, len: s[0] });
            }
            data.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let needs = self.needs(x);
        Ok(self.out(
            shape,
            data,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
                row,
            },
            needs,
        ))
    }

    /// Cosine similarity along the last axis, `a·b / (max(‖a‖,ε)·max(‖b‖,ε))` with
    /// ε = 1e-8. Rank-1 inputs give a scalar, `[N, D]` inputs give `[N]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-8;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.is_empty() || sa.len() > 2 || sa[sa.len() - 1] == 0 {
            return Err(TensorError::shape("cosine", &sa, &sb));
        }
        let dim = sa[sa.len() - 1];
        let (da, db) = (self.data(a), self.data(b));
        let rows = da.len() / dim;
        let mut data = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&da[r * dim..(r + 1) * dim], &db[r * dim..(r + 1) * dim]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(ra.iter().map(|x| x * x).sum());
            let nb = libm::sqrt(rb.iter().map(|x| x * x).sum());
            let c = dot / (na.max(EPS) * nb.max(EPS));
            data.push(c);
            norms.push((na, nb, c));
        }
        let shape = if sa.len() == 1 { Vec::new() } else { vec![rows] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::Cosine { a, b, dim, norms }, needs))
    }

    /// `−log softmax(scores)[target]` for a rank-1 score vector, stabilized by
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var, TensorError> {
        let s = self.shape(scores);
        if s.len() != 1 || s[0] == 0 {
            return Err(TensorError::shape("softmax_cross_entropy", s, &[]));
        }
        if target >= s[0] {
            return Err(TensorError::BadIndex {
                index: target,
                len: s[0],
            });
        }
        let x = self.data(scores);
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| libm::exp(v - m)).collect();
        let z: f64 = exps.iter().sum();
        let loss = m + libm::log(z) - x[target];
        let probs = exps.iter().map(|e| e / z).collect();
        let needs = self.needs(scores);
        Ok(self.out(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                x: scores,
                target,
                probs,
            },
            needs,
        ))
    }

    /// Inverted dropout with drop probability `rate`; `rate == 0` returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.out(shape, data, Op::Dropout { x, mask }, needs)
    }

    /// Reverse pass from a one-element root. Afterwards every leaf that requires
    /// a gradient holds d(root)/d(leaf) (zeros if unreachable).
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let numel = self.data(root).len();
        if numel != 1 {
            return Err(TensorError::NotScalar { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.data.len()]));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
            f(slot);
        };
        // Gradient of a broadcast-aware binary operand.
        fn reduce_to(dst: &mut [f64], contrib: impl Iterator<Item = f64>) {
            if dst.len() == 1 {
                dst[0] += contrib.sum::<f64>();
            } else {
                for (d, c) in dst.iter_mut().zip(contrib) {
                    *d += c;
                }
            }
        }
        let at = |d: &[f64], k: usize| if d.len() == 1 { d[0] } else { d[k] };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| reduce_to(d, g.iter().copied()));
                acc(*b, &mut |d| reduce_to(d, g.iter().copied()));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| reduce_to(d, g.iter().copied()));
                acc(*b, &mut |d| reduce_to(d, g.iter().map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |d| {
                    reduce_to(d, g.iter().enumerate().map(|(k, x)| x * at(db, k)))
                });
                acc(*b, &mut |d| {
                    reduce_to(d, g.iter().enumerate().map(|(k, x)| x * at(da, k)))
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |d| {
                for (d, x) in d.iter_mut().zip(g) {
                    *d += f * x;
                }
            }),
            Op::Relu(a) => {
                let x = &nodes[a.0].value.data;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].value.shape, &nodes[b.0].value.shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |d| {
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::row_major(n),
                        db,
                        Layout::transposed(n),
                        1.0,
                        d,
                        Layout::row_major(k),
                    )
                });
                acc(*b, &mut |d| {
                    gemm(
                        k,
                        m,
                        n,
                        da,
                        Layout::transposed(k),
                        g,
                        Layout::row_major(n),
                        1.0,
                        d,
                        Layout::row_major(n),
                    )
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let dim = d.len();
                    for (k, v) in g.iter().enumerate() {
                        d[k % dim] += v;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (ckk, np, p, o) = (geom.ckk(), geom.np(), geom.ho * geom.wo, geom.o);
                // [N, O, P] → [O, N·P]
                let mut dtmp = vec![0.0; o * np];
                for img in 0..geom.n {
                    for oc in 0..o {
                        let src = &g[(img * o + oc) * p..(img * o + oc + 1) * p];
                        dtmp[oc * np + img * p..oc * np + (img + 1) * p].copy_from_slice(src);
                    }
                }
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for oc in 0..o {
                            d[oc] += dtmp[oc * np..(oc + 1) * np].iter().sum::<f64>();
                        }
                    });
                }
                acc(*kernel, &mut |d| {
                    gemm(
                        o,
                        np,
                        ckk,
                        &dtmp,
                        Layout::row_major(np),
                        cols,
                        Layout::transposed(np),
                        1.0,
                        d,
                        Layout::row_major(ckk),
                    )
                });
                if nodes[input.0].needs_grad {
                    let mut dcols = vec![0.0; ckk * np];
                    gemm(
                        ckk,
                        o,
                        np,
                        &nodes[kernel.0].value.data,
                        Layout::transposed(ckk),
                        &dtmp,
                        Layout::row_major(np),
                        0.0,
                        &mut dcols,
                        Layout::row_major(np),
                    );
                    acc(*input, &mut |d| col2im(&dcols, geom, d));
                }
            }
            Op::Sum {
                x,
                outer,
                n,
                inner,
                scale,
            } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..*n {
                        let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += scale * sv;
                        }
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            } => {
                let stride = a_block + b_block;
                acc(*a, &mut |d| {
                    for o in 0..*outer {
                        add_into(
                            &mut d[o * a_block..(o + 1) * a_block],
                            &g[o * stride..o * stride + a_block],
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for o in 0..*outer {
                        add_into(
                            &mut d[o * b_block..(o + 1) * b_block],
                            &g[o * stride + a_block..(o + 1) * stride],
                        );
                    }
                });
            }
            Op::IndexSelect { x, indices, row } => acc(*x, &mut |d| {
                for (k, &src) in indices.iter().enumerate() {
                    add_into(&mut d[src * row..(src + 1) * row], &g[k * row..(k + 1) * row]);
                }
            }),
            Op::Cosine { a, b, dim, norms } => {
                const EPS: f64 = 1e-8;
                let (da, db) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                let dim = *dim;
                // d/da = b/(na·nb) − c·a/na² (the second term only where ‖a‖ > ε).
                let grad_of = |this: &[f64], other: &[f64], first: bool, d: &mut [f64]| {
                    for (r, &(na, nb, c)) in norms.iter().enumerate() {
                        let (n_this, n_other) = if first { (na, nb) } else { (nb, na) };
                        let denom = n_this.max(EPS) * n_other.max(EPS);
                        let self_term = if n_this > EPS { c / (n_this * n_this) } else { 0.0 };
                        for k in r * dim..(r + 1) * dim {
                            d[k] += g[r] * (other[k] / denom - self_term * this[k]);
                        }
                    }
                };
                acc(*a, &mut |d| grad_of(da, db, true, d));
                acc(*b, &mut |d| grad_of(db, da, false, d));
            }
            Op::SoftmaxCe { x, target, probs } => acc(*x, &mut |d| {
                for (k, p) in probs.iter().enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    d[k] += g[0] * (p - onehot);
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * mask[k];
                }
            }),
        }
    }
}

/// Unfolds `[N, C, H, W]` into `[C·kh·kw, N·ho·wo]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (np, p) = (g.np(), g.ho * g.wo);
    let mut cols = vec![0.0; g.ckk() * np];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * np..(r + 1) * np];
                for img in 0..g.n {
                    let plane = &x[(img * g.c + c) * g.h * g.w..(img * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut row[img * p + oy * g.wo..img * p + (oy + 1) * g.wo];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[N, C, H, W]`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (np, p) = (g.np(), g.ho * g.wo);
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * np..(r + 1) * np];
                for img in 0..g.n {
                    let base = (img * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[base + iy as usize * g.w + ix as usize] +=
                                    row[img * p + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
