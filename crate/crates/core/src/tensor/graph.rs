use super::kernels::{broadcast_index_map, broadcast_shape, col2im, im2col, Window};
use super::{gemm, pairwise_sum, Element, MatRef, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch norm, used by the caller
/// to update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, win: Window },
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Softmax(Var),
    Sum { x: Var, axis: Option<usize>, scale: T },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Embedding { table: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    AvgPool { x: Var, win: Window },
    GlobalAvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
}

/// Tape of recorded operations.
///
/// Node ids are assigned in creation order, so the reverse id order is a
/// valid reverse topological order and every node is visited once.
pub struct Graph<T: Element = f32> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    // ----- forward ops -------------------------------------------------

    /// 2-D matrix product `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("rank-2 operands expected, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims {ka} vs {kb} ({sa:?} x {sb:?})")));
        }
        let (ac, bc) = (sa[1], sb[1]);
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let aref = if ta { MatRef::transposed(av, ac) } else { MatRef::row_major(av, ac) };
        let bref = if tb { MatRef::transposed(bv, bc) } else { MatRef::row_major(bv, bc) };
        let mut out = vec![T::zero(); m * n];
        gemm(m, ka, n, aref, bref, T::zero(), &mut out);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, req))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// NCHW convolution without bias; `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("NCHW input and OIHW weight expected, got {sx:?}, {sw:?}")));
        }
        if stride == 0 {
            return Err(TensorError::Attribute { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, ci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c != ci {
            return Err(shape_err("conv2d", format!("input channels {c} vs weight channels {ci}")));
        }
        let win = Window { kh, kw, stride, pad };
        let (oh, ow) = win
            .out_hw(h, wd)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")))?;
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let mut out = vec![T::zero(); n * o * ohw];
        let mut cols = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        for i in 0..n {
            let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let colm: &[T] = if win.is_pointwise() {
                img
            } else {
                im2col(img, c, h, wd, win, oh, ow, &mut cols);
                &cols
            };
            gemm(
                o,
                ckk,
                ohw,
                MatRef::row_major(wv, ckk),
                MatRef::row_major(colm, ohw),
                T::zero(),
                &mut out[i * o * ohw..(i + 1) * o * ohw],
            );
        }
        let req = self.req(&[x, w]);
        Ok(self.push(Tensor::new(vec![n, o, oh, ow], out)?, Op::Conv2d { x, w, win }, req))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.values[x.0].data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("shape preserved");
        let req = self.req(&[x]);
        self.push(out, Op::Relu(x), req)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.values[x.0].data().iter().map(|&v| gelu_fwd(v)).collect(),
        )
        .expect("shape preserved");
        let req = self.req(&[x]);
        self.push(out, Op::Gelu(x), req)
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let f = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if f == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{f}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::Attribute { op: "layer_norm", detail: format!("eps {eps} <= 0") });
        }
        let eps = T::from_f64_lossy(eps);
        let rows = sx.iter().product::<usize>() / f;
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let fl = T::from_usize(f).unwrap();
        let mut xhat = vec![T::zero(); rows * f];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * f];
        for r in 0..rows {
            let row = &xv[r * f..(r + 1) * f];
            let mean = row.iter().copied().sum::<T>() / fl;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / fl;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let xh = (row[j] - mean) * rs;
                xhat[r * f + j] = xh;
                out[r * f + j] = xh * g[j] + b[j];
            }
        }
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(sx, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, req))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), TensorError> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("need [N, C, ...], got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let s: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", format!("gamma/beta must be [{c}]")));
        }
        Ok((n, c, s))
    }

    /// Batch norm over channel axis 1 using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>), TensorError> {
        let (n, c, s) = self.bn_layout(x, gamma, beta)?;
        let m = n * s;
        if m < 2 {
            return Err(TensorError::Attribute {
                op: "batch_norm",
                detail: "training mode needs at least two values per channel".into(),
            });
        }
        let eps = T::from_f64_lossy(eps);
        let ml = T::from_usize(m).unwrap();
        let xv = self.values[x.0].data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                acc += xv[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
            }
            let mu = acc / ml;
            let mut sq = T::zero();
            for i in 0..n {
                sq += xv[(i * c + ch) * s..(i * c + ch + 1) * s]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = sq / ml;
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * ml / (ml - T::one())).collect(),
        };
        let v = self.bn_apply(x, gamma, beta, &mean, rstd, true, n, c, s)?;
        Ok((v, stats))
    }

    /// Batch norm with frozen running statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, c, s) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", format!("running stats must have {c} channels")));
        }
        let eps = T::from_f64_lossy(eps);
        let rstd = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, rstd, false, n, c, s)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        s: usize,
    ) -> Result<Var, TensorError> {
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    let xh = (xv[k] - mean[ch]) * rstd[ch];
                    xhat[k] = xh;
                    out[k] = xh * g[ch] + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, req))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    /// Entries equal to `-inf` receive exactly zero probability.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let f = *sx.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        if f == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let xv = self.values[x.0].data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, dst) in xv.chunks(f).zip(out.chunks_mut(f)) {
            softmax_row(row, dst);
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, Op::Softmax(x), req))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool, op: &'static str) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let xv = self.values[x.0].data();
        match axis {
            None => {
                if xv.is_empty() {
                    return Err(TensorError::EmptyAxis { op });
                }
                let scale = if mean { T::one() / T::from_usize(xv.len()).unwrap() } else { T::one() };
                let v = pairwise_sum(xv) * scale;
                let req = self.req(&[x]);
                Ok(self.push(Tensor::scalar(v), Op::Sum { x, axis, scale }, req))
            }
            Some(ax) => {
                if ax >= sx.len() {
                    return Err(TensorError::Attribute { op, detail: format!("axis {ax} for rank {}", sx.len()) });
                }
                let (outer, len, inner) = split_axis(&sx, ax);
                if len == 0 {
                    return Err(TensorError::EmptyAxis { op });
                }
                let scale = if mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                let mut out = vec![T::zero(); outer * inner];
                let mut lane = vec![T::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        for (l, v) in lane.iter_mut().enumerate() {
                            *v = xv[(o * len + l) * inner + i];
                        }
                        out[o * inner + i] = pairwise_sum(&lane) * scale;
                    }
                }
                let mut shape = sx.clone();
                shape.remove(ax);
                let req = self.req(&[x]);
                Ok(self.push(Tensor::new(shape, out)?, Op::Sum { x, axis, scale }, req))
            }
        }
    }

    /// Sum over one axis (removed from the shape) or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, false, "sum")
    }

    /// Mean over one axis (removed from the shape) or over everything.
    /// Uses pairwise summation.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, axis, true, "mean")
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool), TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index_map(&sa, &shape);
            let ib = broadcast_index_map(&sb, &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        Ok((Tensor::new(shape, data)?, self.req(&[a, b])))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, req) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, req))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, req) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let t = Tensor::new(self.shape(x).to_vec(), self.values[x.0].data().iter().map(|&v| v * c).collect())
            .expect("shape preserved");
        let req = self.req(&[x]);
        self.push(t, Op::Scale { x, c }, req)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        if av.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mse" });
        }
        let sq: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).collect();
        let v = pairwise_sum(&sq) / T::from_usize(sq.len()).unwrap();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, req))
    }

    /// Softmax cross-entropy of `[N, C]` logits against class indices,
    /// optionally class-weighted: `sum_i w[y_i] * nll_i / sum_i w[y_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[T]>) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("cross_entropy", format!("logits {sl:?} vs {} targets", targets.len())));
        }
        let (n, c) = (sl[0], sl[1]);
        if n == 0 || c == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Attribute { op: "cross_entropy", detail: format!("target {t} >= {c} classes") });
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(shape_err("cross_entropy", format!("{} class weights for {c} classes", w.len())));
            }
        }
        let lv = self.values[logits.0].data();
        let mut probs = vec![T::zero(); n * c];
        let mut weights: Vec<T> = targets
            .iter()
            .map(|&t| class_weights.map_or(T::one(), |w| w[t]))
            .collect();
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(TensorError::Attribute { op: "cross_entropy", detail: "class weights sum to zero".into() });
        }
        for w in weights.iter_mut() {
            *w = *w / total;
        }
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            terms.push(weights[i] * (lse - row[targets[i]]));
        }
        let loss = pairwise_sum(&terms);
        let req = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs },
            req,
        ))
    }

    /// Gather rows of a `[V, d]` table.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table must be rank 2, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding_lookup", format!("index {bad} >= table rows {v}")));
        }
        let tv = self.values[table.0].data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let req = self.req(&[table]);
        Ok(self.push(Tensor::new(vec![idx.len(), d], out)?, Op::Embedding { table, idx: idx.to_vec() }, req))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Attribute { op: "concat", detail: format!("axis {axis} for rank {}", first.len()) });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.values[x.0].data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let req = self.req(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, req))
    }

    /// `x[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start > end || end > sx[axis] {
            return Err(shape_err("slice", format!("range {start}..{end} on axis {axis} of {sx:?}")));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.values[x.0].data();
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = sx;
        shape[axis] = w;
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, req))
    }

    /// Average pooling over `k x k` windows with stride `s`, no padding.
    pub fn avg_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("avg_pool", format!("NCHW expected, got {sx:?}")));
        }
        let win = Window { kh: k, kw: k, stride: s, pad: 0 };
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = win.out_hw(h, w).filter(|_| k > 0).ok_or_else(|| shape_err("avg_pool", format!("window {k} on {h}x{w}")))?;
        let xv = self.values[x.0].data();
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += src[(oy * s + ky) * w + ox * s + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool { x, win }, req))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("NCHW expected, got {sx:?}")));
        }
        let s = sx[2] * sx[3];
        if s == 0 {
            return Err(TensorError::EmptyAxis { op: "global_avg_pool" });
        }
        let inv = T::one() / T::from_usize(s).unwrap();
        let out: Vec<T> = self.values[x.0].data().chunks(s).map(|ch| pairwise_sum(ch) * inv).collect();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![sx[0], sx[1]], out)?, Op::GlobalAvgPool(x), req))
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool(&mut self, x: Var, k: usize, s: usize, pad: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("max_pool", format!("NCHW expected, got {sx:?}")));
        }
        if k == 0 || pad >= k {
            return Err(TensorError::Attribute { op: "max_pool", detail: format!("kernel {k}, pad {pad}") });
        }
        let win = Window { kh: k, kw: k, stride: s, pad };
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = win.out_hw(h, w).ok_or_else(|| shape_err("max_pool", format!("window {k} on {h}x{w}")))?;
        let xv = self.values[x.0].data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if at == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool { x, argmax }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.values[x.0].clone().reshape(shape)?;
        let req = self.req(&[x]);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// leaf created with [`Graph::param`] that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, zero-initialized on first use.
    fn gbuf<'g>(grads: &'g mut [Option<Vec<T>>], values: &[Tensor<T>], v: Var) -> &'g mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); values[v.0].numel()])
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let req = &self.requires;
        let out = &values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (ac, bc) = (sa[1], sb[1]);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if ta { sa[0] } else { sa[1] };
                let av = values[a.0].data();
                let bv = values[b.0].data();
                if req[a.0] {
                    let da = Self::gbuf(grads, values, a);
                    if !ta {
                        let bt = if tb { MatRef::row_major(bv, bc) } else { MatRef::transposed(bv, bc) };
                        gemm(m, n, k, MatRef::row_major(g, n), bt, T::one(), da);
                    } else {
                        let opb = if tb { MatRef::transposed(bv, bc) } else { MatRef::row_major(bv, bc) };
                        gemm(k, n, m, opb, MatRef::transposed(g, n), T::one(), da);
                    }
                }
                if req[b.0] {
                    let db = Self::gbuf(grads, values, b);
                    if !tb {
                        let at = if ta { MatRef::row_major(av, ac) } else { MatRef::transposed(av, ac) };
                        gemm(k, m, n, at, MatRef::row_major(g, n), T::one(), db);
                    } else {
                        let opa = if ta { MatRef::transposed(av, ac) } else { MatRef::row_major(av, ac) };
                        gemm(n, m, k, MatRef::transposed(g, n), opa, T::one(), db);
                    }
                }
            }
            Op::Conv2d { x, w, win } => {
                let (x, w, win) = (*x, *w, *win);
                let sx = values[x.0].shape();
                let sw = values[w.0].shape();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let o = sw[0];
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ckk = c * win.kh * win.kw;
                let ohw = oh * ow;
                let xv = values[x.0].data();
                let wv = values[w.0].data();
                let mut cols = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
                let mut dcols = vec![T::zero(); ckk * ohw];
                if req[w.0] {
                    let dw = Self::gbuf(grads, values, w);
                    for img in 0..n {
                        let xi = &xv[img * c * h * wd..(img + 1) * c * h * wd];
                        let colm: &[T] = if win.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, c, h, wd, win, oh, ow, &mut cols);
                            &cols
                        };
                        let gi = &g[img * o * ohw..(img + 1) * o * ohw];
                        gemm(o, ohw, ckk, MatRef::row_major(gi, ohw), MatRef::transposed(colm, ohw), T::one(), dw);
                    }
                }
                if req[x.0] {
                    let dx = Self::gbuf(grads, values, x);
                    for img in 0..n {
                        let gi = &g[img * o * ohw..(img + 1) * o * ohw];
                        let dxi = &mut dx[img * c * h * wd..(img + 1) * c * h * wd];
                        if win.is_pointwise() {
                            gemm(ckk, o, ohw, MatRef::transposed(wv, ckk), MatRef::row_major(gi, ohw), T::one(), dxi);
                        } else {
                            gemm(ckk, o, ohw, MatRef::transposed(wv, ckk), MatRef::row_major(gi, ohw), T::zero(), &mut dcols);
                            col2im(&dcols, c, h, wd, win, oh, ow, dxi);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = values[x.0].data();
                let dx = Self::gbuf(grads, values, *x);
                for ((d, &v), &gg) in dx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *d += gg;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = values[x.0].data();
                let dx = Self::gbuf(grads, values, *x);
                for ((d, &v), &gg) in dx.iter_mut().zip(xv).zip(g) {
                    *d += gg * gelu_grad(v);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let f = values[gamma.0].numel();
                let fl = T::from_usize(f).unwrap();
                let gv = values[gamma.0].data();
                if req[gamma.0] {
                    let dg = Self::gbuf(grads, values, *gamma);
                    for (r, gr) in g.chunks(f).enumerate() {
                        for j in 0..f {
                            dg[j] += gr[j] * xhat[r * f + j];
                        }
                    }
                }
                if req[beta.0] {
                    let db = Self::gbuf(grads, values, *beta);
                    for gr in g.chunks(f) {
                        for j in 0..f {
                            db[j] += gr[j];
                        }
                    }
                }
                if req[x.0] {
                    let dx = Self::gbuf(grads, values, *x);
                    let mut dxh = vec![T::zero(); f];
                    for (r, gr) in g.chunks(f).enumerate() {
                        let xh = &xhat[r * f..(r + 1) * f];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..f {
                            dxh[j] = gr[j] * gv[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xh[j];
                        }
                        let k = rstd[r] / fl;
                        for j in 0..f {
                            dx[r * f + j] += k * (fl * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let sx = values[x.0].shape();
                let (n, c) = (sx[0], sx[1]);
                let s: usize = sx[2..].iter().product();
                let gv = values[gamma.0].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * s;
                        for k in base..base + s {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if req[gamma.0] {
                    let dg = Self::gbuf(grads, values, *gamma);
                    for ch in 0..c {
                        dg[ch] += sum_gx[ch];
                    }
                }
                if req[beta.0] {
                    let db = Self::gbuf(grads, values, *beta);
                    for ch in 0..c {
                        db[ch] += sum_g[ch];
                    }
                }
                if req[x.0] {
                    let dx = Self::gbuf(grads, values, *x);
                    let ml = T::from_usize(n * s).unwrap();
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * s;
                            let gm = gv[ch];
                            if *train {
                                let k = rstd[ch] / ml;
                                for idx in base..base + s {
                                    dx[idx] += k * gm * (ml * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                                }
                            } else {
                                for idx in base..base + s {
                                    dx[idx] += g[idx] * gm * rstd[ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let f = *out.shape().last().unwrap();
                let yv = out.data();
                let dx = Self::gbuf(grads, values, *x);
                for ((y, gr), d) in yv.chunks(f).zip(g.chunks(f)).zip(dx.chunks_mut(f)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..f {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Sum { x, axis, scale } => {
                let sx = values[x.0].shape().to_vec();
                let dx = Self::gbuf(grads, values, *x);
                match axis {
                    None => {
                        let v = g[0] * *scale;
                        for d in dx.iter_mut() {
                            *d += v;
                        }
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(&sx, *ax);
                        for o in 0..outer {
                            for l in 0..len {
                                for k in 0..inner {
                                    dx[(o * len + l) * inner + k] += g[o * inner + k] * *scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let shape = out.shape().to_vec();
                for v in [*a, *b] {
                    if !req[v.0] {
                        continue;
                    }
                    let sv = values[v.0].shape().to_vec();
                    let d = Self::gbuf(grads, values, v);
                    if sv == shape {
                        for (d, &gg) in d.iter_mut().zip(g) {
                            *d += gg;
                        }
                    } else {
                        for (&j, &gg) in broadcast_index_map(&sv, &shape).iter().zip(g) {
                            d[j] += gg;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let shape = out.shape().to_vec();
                let (a, b) = (*a, *b);
                let ia = broadcast_index_map(values[a.0].shape(), &shape);
                let ib = broadcast_index_map(values[b.0].shape(), &shape);
                let av = values[a.0].data();
                let bv = values[b.0].data();
                if req[a.0] {
                    let da = Self::gbuf(grads, values, a);
                    for k in 0..g.len() {
                        da[ia[k]] += g[k] * bv[ib[k]];
                    }
                }
                if req[b.0] {
                    let db = Self::gbuf(grads, values, b);
                    for k in 0..g.len() {
                        db[ib[k]] += g[k] * av[ia[k]];
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = Self::gbuf(grads, values, *x);
                for (d, &gg) in dx.iter_mut().zip(g) {
                    *d += gg * *c;
                }
            }
            Op::Mse { a, b } => {
                let av = values[a.0].data();
                let bv = values[b.0].data();
                let k = g[0] * T::from_f64_lossy(2.0) / T::from_usize(av.len()).unwrap();
                if req[a.0] {
                    let da = Self::gbuf(grads, values, *a);
                    for j in 0..av.len() {
                        da[j] += k * (av[j] - bv[j]);
                    }
                }
                if req[b.0] {
                    let db = Self::gbuf(grads, values, *b);
                    for j in 0..av.len() {
                        db[j] -= k * (av[j] - bv[j]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = values[logits.0].shape()[1];
                let dl = Self::gbuf(grads, values, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    let k = g[0] * weights[i];
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[i * c + j] += k * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Embedding { table, idx } => {
                let d = values[table.0].shape()[1];
                let dt = Self::gbuf(grads, values, *table);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = out.shape().to_vec();
                let (outer, _, inner) = split_axis(&shape, *axis);
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &x in xs {
                    let len = values[x.0].shape()[*axis] * inner;
                    if req[x.0] {
                        let dx = Self::gbuf(grads, values, x);
                        for o in 0..outer {
                            for j in 0..len {
                                dx[o * len + j] += g[o * total + off + j];
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = values[x.0].shape().to_vec();
                let (outer, len, inner) = split_axis(&sx, *axis);
                let w = out.shape()[*axis];
                let dx = Self::gbuf(grads, values, *x);
                for o in 0..outer {
                    for j in 0..w * inner {
                        dx[(o * len + start) * inner + j] += g[o * w * inner + j];
                    }
                }
            }
            Op::AvgPool { x, win } => {
                let sx = values[x.0].shape().to_vec();
                let (h, w) = (sx[2], sx[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let inv = T::one() / T::from_usize(win.kh * win.kw).unwrap();
                let dx = Self::gbuf(grads, values, *x);
                for p in 0..sx[0] * sx[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gg = g[(p * oh + oy) * ow + ox] * inv;
                            for ky in 0..win.kh {
                                for kx in 0..win.kw {
                                    dx[p * h * w + (oy * win.stride + ky) * w + ox * win.stride + kx] += gg;
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let sx = values[x.0].shape();
                let s = sx[2] * sx[3];
                let inv = T::one() / T::from_usize(s).unwrap();
                let dx = Self::gbuf(grads, values, *x);
                for (p, &gg) in g.iter().enumerate() {
                    for d in &mut dx[p * s..(p + 1) * s] {
                        *d += gg * inv;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = Self::gbuf(grads, values, *x);
                for (&at, &gg) in argmax.iter().zip(g) {
                    dx[at] += gg;
                }
            }
            Op::Reshape(x) => {
                let dx = Self::gbuf(grads, values, *x);
                for (d, &gg) in dx.iter_mut().zip(g) {
                    *d += gg;
                }
            }
        }
    }
}

fn softmax_row<T: Element>(row: &[T], dst: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        // every entry masked: no mass anywhere
        dst.fill(T::zero());
        return;
    }
    let mut total = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - mx).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t64(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![4], vec![1e30, -1e30, 3e29, 1e30]).unwrap());
        let y = g.softmax(x).unwrap();
        let s: f32 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(g.value(y).data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(x), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i3 = g.input(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.input(t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains('3') && err.contains('4'), "{err}");
    }

    #[test]
    fn conv_stem_output_is_56() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 224, 224]));
        let w = g.param(Tensor::zeros(&[4, 3, 7, 7]));
        let y = g.conv2d(x, w, 2, 3).unwrap();
        let p = g.max_pool(y, 3, 2, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 4, 56, 56]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[3], &[0.3, -1.0, 2.0]));
        let l = g.mse(x, x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_and_non_scalar_fail() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let l = g.sum(x, None).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn masked_softmax_columns_are_exactly_zero() {
        let mut g = Graph::<f32>::new();
        let s = g.input(Tensor::new(vec![2, 3], vec![0.5, 1.0, 2.0, -1.0, 0.0, 3.0]).unwrap());
        let m = g.input(Tensor::new(vec![1, 3], vec![0.0, f32::NEG_INFINITY, 0.0]).unwrap());
        let z = g.add(s, m).unwrap();
        let p = g.softmax(z).unwrap();
        let v = g.value(p).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
    }

    #[test]
    fn cross_entropy_weighting() {
        // equal logits: nll = ln 2 for every row regardless of weights
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::zeros(&[3, 2]));
        let w = [1.0, 3.0];
        let loss = g.cross_entropy(l, &[0, 1, 1], Some(&w)).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        g.backward(loss).unwrap();
        // row 0 weight 1/7, rows 1..2 weight 3/7
        let gr = g.grad(l).unwrap();
        assert!((gr[0] - (-0.5 / 7.0)).abs() < 1e-12);
        assert!((gr[3] - (-1.5 / 7.0)).abs() < 1e-12);
    }
}
