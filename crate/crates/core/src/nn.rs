//! Parameter storage and the small set of layers the models are built from.

use rand::Rng;

use crate::tensor::{Graph, Real, Result, Tensor, Var};

/// Which part of the model a parameter belongs to. Freezing and
/// optimizer masks work per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Vision,
    PretrainHead,
    Resampler,
    DecoderSelf,
    CrossAttention,
    Gate,
    Projection,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Vision,
        Group::PretrainHead,
        Group::Resampler,
        Group::DecoderSelf,
        Group::CrossAttention,
        Group::Gate,
        Group::Projection,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Standard normal via Box-Muller; keeps the rng stream platform independent.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        Self { params }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, group: Group, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal(rng) * std)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: Group, shape: &[usize], v: f64) -> ParamId {
        self.add(name, group, Tensor::full(shape.to_vec(), T::of(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// CRC32 over the little-endian bytes of every parameter in `group`.
    pub fn checksum(&self, group: Group) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize()
    }

    /// Places every parameter on the graph; frozen ones do not track gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone(), !p.frozen)).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, group: Group, din: usize, dout: usize, rng: &mut R) -> Self {
        let std = 1.0 / (din as f64).sqrt();
        Self {
            w: store.add_normal(format!("{name}.w"), group, &[din, dout], std, rng),
            b: store.add_const(format!("{name}.b"), group, &[dout], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: Group, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), group, &[dim], 1.0),
            bias: store.add_const(format!("{name}.bias"), group, &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, p.var(self.gain))?;
        g.add(s, p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, group: Group, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        self.down.forward(g, p, h)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOut {
    pub out: Var,
    /// `[B, H, Sq, Sk]` attention weights.
    pub probs: Var,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, q_dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), group, kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), group, kv_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, q_dim, rng),
            heads,
        }
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let r = g.reshape(x, &[b, n, self.heads, d / self.heads])?;
        g.transpose(r, &[0, 2, 1, 3])
    }

    /// `xq: [B, Sq, Dq]`, `xkv: [B, Sk, Dkv]`; `mask` is additive and
    /// broadcasts to `[B, H, Sq, Sk]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, xq: Var, xkv: Var, mask: Option<&Tensor<T>>) -> Result<AttentionOut> {
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let (b, sq, d) = {
            let s = g.shape(q);
            (s[0], s[1], s[2])
        };
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / ((d / self.heads) as f64).sqrt()));
        let probs = g.softmax(scores, mask)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, sq, d])?;
        let out = self.o.forward(g, p, ctx)?;
        Ok(AttentionOut { out, probs })
    }
}

/// Additive mask `[Sq, Sk]` hiding future keys.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = T::neg_infinity();
        }
    }
    m
}

/// Additive mask `[B, 1, 1, Sk]` from per-key validity flags laid out `[B, Sk]`.
pub fn key_mask<T: Real>(valid: &[bool], batch: usize) -> Tensor<T> {
    let sk = valid.len() / batch.max(1);
    let data = valid
        .iter()
        .map(|&v| if v { T::zero() } else { T::neg_infinity() })
        .collect();
    Tensor::new(vec![batch, 1, 1, sk], data).expect("valid length is batch * keys")
}

/// Broadcasts a `[R, D]` parameter to `[B, R, D]`.
pub fn expand_batch<T: Real>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let mut shape = vec![batch];
    shape.extend_from_slice(&s);
    let zeros = g.constant(Tensor::zeros(shape));
    g.add(zeros, x)
}
