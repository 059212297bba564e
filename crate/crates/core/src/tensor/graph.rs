use super::{strides, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_CLAMP: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<T> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MeanPool { a: Var, keep: Vec<bool>, counts: Vec<usize> },
    L2Normalize { a: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, scored: Vec<bool>, probs: Vec<T>, count: usize },
    Log { a: Var },
    Exp { a: Var },
    Sum { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are created in topological order, so the
/// backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` laid against `out`, zero on broadcast axes.
fn aligned_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output index with the matching offsets into two strided inputs.
fn zip_index(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o + j, base_a + j * ia, base_b + j * ib);
        }
        o += inner;
        let mut advanced = false;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                advanced = true;
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
        if !advanced {
            return;
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + T::of(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product. `a: [.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with identical batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let bsz: usize = batch_a.iter().product();
        let mut out = vec![T::zero(); bsz * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            T::gemm(bsz * m, k, n, av, k as isize, 1, bv, n as isize, 1, T::zero(), &mut out);
        } else {
            if &sb[..sb.len() - 2] != batch_a {
                return Err(shape_err("matmul", &sa, &sb));
            }
            for i in 0..bsz {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::MatMul { a, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sa == sb {
            for i in 0..n {
                out[i] = if mul { av[i] * bv[i] } else { av[i] + bv[i] };
            }
        } else {
            let (stra, strb) = (aligned_strides(&sa, &out_shape), aligned_strides(&sb, &out_shape));
            zip_index(&out_shape, &stra, &strb, |o, ia, ib| {
                out[o] = if mul { av[ia] * bv[ib] } else { av[ia] + bv[ib] };
            });
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor { shape: out_shape, data: out }, op, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", false)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", true)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// Axis permutation; `perm[i]` names the input axis placed at output axis `i`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("transpose", &sa, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let in_str = strides(&sa);
        let perm_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
        let zero = vec![0; sa.len()];
        let av = self.value(a).data();
        let mut out = vec![T::zero(); av.len()];
        zip_index(&out_shape, &perm_str, &zero, |o, ia, _| out[o] = av[ia]);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            Op::Permute { a, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.transpose(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, end]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        let av = self.value(a).data();
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&av[base..base + width * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = width;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::Slice { a, axis, start }, rg))
    }

    /// Softmax over the last axis. `mask` is additive (0 or -inf) and must
    /// broadcast against `a`; a row whose every entry is masked is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut x = self.value(a).data().to_vec();
        if let Some(m) = mask {
            match broadcast_shape(&sa, m.shape()) {
                Some(s) if s == sa => {}
                _ => return Err(shape_err("softmax", &sa, m.shape())),
            }
            let sm = aligned_strides(m.shape(), &sa);
            let zero = vec![0; sa.len()];
            let mv = m.data();
            zip_index(&sa, &zero, &sm, |o, _, im| x[o] = x[o] + mv[im]);
        }
        let d = *sa.last().ok_or_else(|| shape_err("softmax", &sa, &[]))?;
        if d > 0 {
            for (r, row) in x.chunks_mut(d).enumerate() {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                if max == T::neg_infinity() {
                    return Err(TensorError::FullyMaskedRow { row: r });
                }
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: sa, data: x }, Op::Softmax { a }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| shape_err("layer_norm", &sa, &[]))?;
        let mut out = self.value(a).data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d.max(1));
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        if d > 0 {
            for row in out.chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let r = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: sa, data: out }, Op::LayerNorm { a, rstd }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Row lookup into `table: [V, D]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &st, ids_shape));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Mean over axis -2 of `a: [.., n, D]`, counting only rows with `keep = true`.
    /// `keep` is laid out as `[.., n]`; `None` keeps every row.
    pub fn mean_pool(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(shape_err("mean_pool", &sa, &[]));
        }
        let (n, d) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let groups: usize = sa[..sa.len() - 2].iter().product();
        let keep = match keep {
            Some(k) if k.len() == groups * n => k.to_vec(),
            Some(k) => return Err(shape_err("mean_pool", &sa, &[k.len()])),
            None => vec![true; groups * n],
        };
        let av = self.value(a).data();
        let mut out = vec![T::zero(); groups * d];
        let mut counts = Vec::with_capacity(groups);
        for g in 0..groups {
            let c = keep[g * n..(g + 1) * n].iter().filter(|&&k| k).count();
            if c == 0 {
                return Err(TensorError::EmptyPool { group: g });
            }
            let dst = &mut out[g * d..(g + 1) * d];
            for r in 0..n {
                if keep[g * n + r] {
                    let row = &av[(g * n + r) * d..(g * n + r + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(row) {
                        *o = *o + x;
                    }
                }
            }
            let inv = T::one() / T::of(c as f64);
            for o in dst.iter_mut() {
                *o = *o * inv;
            }
            counts.push(c);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(d);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::MeanPool { a, keep, counts }, rg))
    }

    /// Scales the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| shape_err("l2_normalize", &sa, &[]))?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::new();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(NORM_FLOOR));
                for v in row.iter_mut() {
                    *v = *v / n;
                }
                norms.push(n);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: sa, data: out }, Op::L2Normalize { a, norms }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [.., V]` rows against `targets`,
    /// averaged over rows where `scored` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scored: Option<&[bool]>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let v = *sl.last().ok_or_else(|| shape_err("cross_entropy", &sl, &[]))?;
        let rows = if v == 0 { 0 } else { self.value(logits).len() / v };
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        let scored = match scored {
            Some(s) if s.len() == rows => s.to_vec(),
            Some(s) => return Err(shape_err("cross_entropy", &sl, &[s.len()])),
            None => vec![true; rows],
        };
        let count = scored.iter().filter(|&&s| s).count();
        if count == 0 {
            return Err(TensorError::NoScoredPosition);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                s = s + *p;
            }
            for p in probs[r * v..(r + 1) * v].iter_mut() {
                *p = *p / s;
            }
            if scored[r] {
                total = total + (s.ln() + max - row[t]);
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scored,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn log(&mut self, a: Var) -> Var {
        let lo = T::of(LOG_CLAMP);
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| x.max(lo).ln()).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Log { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| x.exp()).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Exp { a }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    // ----------------------------------------------------------- backward

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Reverse sweep from a single-element `loss`. Gradients are kept on
    /// leaves only; intermediate buffers are released as the sweep passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &gy);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, gy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let bsz: usize = sa[..sa.len() - 2].iter().product();
                let shared = sb.len() == 2;
                if self.rg(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let ga = self.acc(*a).expect("requires grad");
                    if shared {
                        // dA = dY B^T
                        T::gemm(bsz * m, n, k, gy, n as isize, 1, &bv, 1, n as isize, T::one(), ga);
                    } else {
                        for t in 0..bsz {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gy[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                &bv[t * k * n..(t + 1) * k * n],
                                1,
                                n as isize,
                                T::one(),
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data().to_vec();
                    let gb = self.acc(*b).expect("requires grad");
                    if shared {
                        // dB = A^T dY
                        T::gemm(k, bsz * m, n, &av, 1, k as isize, gy, n as isize, 1, T::one(), gb);
                    } else {
                        for t in 0..bsz {
                            T::gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                1,
                                k as isize,
                                &gy[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                T::one(),
                                &mut gb[t * k * n..(t + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(op, Op::Mul { .. });
                let out_shape = self.nodes[i].value.shape().to_vec();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let st = self.shape(this).to_vec();
                    let so = self.shape(other).to_vec();
                    let ov = if is_mul {
                        Some(self.value(other).data().to_vec())
                    } else {
                        None
                    };
                    let (s_this, s_other) = (aligned_strides(&st, &out_shape), aligned_strides(&so, &out_shape));
                    let g = self.acc(this).expect("requires grad");
                    if st == out_shape && so == out_shape {
                        match &ov {
                            Some(ov) => g.iter_mut().zip(gy).zip(ov).for_each(|((g, &dy), &o)| *g = *g + dy * o),
                            None => g.iter_mut().zip(gy).for_each(|(g, &dy)| *g = *g + dy),
                        }
                    } else {
                        zip_index(&out_shape, &s_this, &s_other, |o, it, io| {
                            let d = match &ov {
                                Some(ov) => gy[o] * ov[io],
                                None => gy[o],
                            };
                            g[it] = g[it] + d;
                        });
                    }
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, &dy)| *g = *g + dy * c);
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let sa = self.shape(*a).to_vec();
                let in_str = strides(&sa);
                let perm_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
                let zero = vec![0; sa.len()];
                if let Some(g) = self.acc(*a) {
                    zip_index(&out_shape, &perm_str, &zero, |o, ia, _| g[ia] = g[ia] + gy[o]);
                }
            }
            Op::Reshape { a } => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, &dy)| *g = *g + dy);
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if let Some(g) = self.acc(p) {
                        for o in 0..outer {
                            let src = &gy[o * total + offset..o * total + offset + len];
                            g[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a).to_vec();
                let width = self.nodes[i].value.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (axis_len, start) = (sa[*axis], *start);
                if let Some(g) = self.acc(*a) {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &gy[o * width * inner..(o + 1) * width * inner];
                        g[base..base + width * inner].iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().expect("rank >= 1");
                if let Some(g) = self.acc(*a) {
                    if d > 0 {
                        for ((gr, yr), dyr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                            let dot = yr.iter().zip(dyr).map(|(&y, &dy)| y * dy).sum::<T>();
                            for ((g, &y), &dy) in gr.iter_mut().zip(yr).zip(dyr) {
                                *g = *g + y * (dy - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().expect("rank >= 1");
                let inv_d = T::one() / T::of(d as f64);
                if let Some(g) = self.acc(*a) {
                    if d > 0 {
                        for (((gr, yr), dyr), &r) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)).zip(rstd) {
                            let mean_dy = dyr.iter().copied().sum::<T>() * inv_d;
                            let mean_dyy = yr.iter().zip(dyr).map(|(&y, &dy)| y * dy).sum::<T>() * inv_d;
                            for ((g, &y), &dy) in gr.iter_mut().zip(yr).zip(dyr) {
                                *g = *g + r * (dy - mean_dy - y * mean_dyy);
                            }
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data().to_vec();
                if let Some(g) = self.acc(*a) {
                    for ((g, &x), &dy) in g.iter_mut().zip(&x).zip(gy) {
                        *g = *g + dy * gelu_parts(x).1;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gy[r * d..(r + 1) * d])
                            .for_each(|(g, &dy)| *g = *g + dy);
                    }
                }
            }
            Op::MeanPool { a, keep, counts } => {
                let sa = self.shape(*a).to_vec();
                let (n, d) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                if let Some(g) = self.acc(*a) {
                    for (gi, &c) in counts.iter().enumerate() {
                        let inv = T::one() / T::of(c as f64);
                        for r in 0..n {
                            if keep[gi * n + r] {
                                let base = (gi * n + r) * d;
                                for j in 0..d {
                                    g[base + j] = g[base + j] + gy[gi * d + j] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().expect("rank >= 1");
                if let Some(g) = self.acc(*a) {
                    if d > 0 {
                        for (((gr, yr), dyr), &n) in g.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)).zip(norms) {
                            let dot = yr.iter().zip(dyr).map(|(&y, &dy)| y * dy).sum::<T>();
                            for ((g, &y), &dy) in gr.iter_mut().zip(yr).zip(dyr) {
                                *g = *g + (dy - y * dot) / n;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scored,
                probs,
                count,
            } => {
                let v = *self.shape(*logits).last().expect("rank >= 1");
                let scale = gy[0] / T::of(*count as f64);
                if let Some(g) = self.acc(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if !scored[r] {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[r * v + j] = g[r * v + j] + scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Log { a } => {
                let x = self.value(*a).data().to_vec();
                let lo = T::of(LOG_CLAMP);
                if let Some(g) = self.acc(*a) {
                    for ((g, &x), &dy) in g.iter_mut().zip(&x).zip(gy) {
                        if x > lo {
                            *g = *g + dy / x;
                        }
                    }
                }
            }
            Op::Exp { a } => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(g) = self.acc(*a) {
                    for ((g, &y), &dy) in g.iter_mut().zip(&y).zip(gy) {
                        *g = *g + dy * y;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().for_each(|g| *g = *g + gy[0]);
                }
            }
        }
    }
}
