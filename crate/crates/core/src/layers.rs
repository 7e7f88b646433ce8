//! Hand-written forward and backward passes for the closed set of layers the
//! text encoder is built from.
//!
//! Every layer's `backward` returns the gradient with respect to its input.
//! Parameter gradients are only produced when the caller passes a gradient
//! holder; frozen passes hand in `None` and the parameters receive nothing.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_in_place, DualTensor, Tensor};

pub trait Layer {
    type Cache;
    /// Holder for parameter gradients, shaped like the layer's parameters.
    type Grads;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, grad_output: &Tensor, grads: Option<&mut Self::Grads>) -> Result<Tensor>;
}

/// Runs `layer` forward on `input.value`, then backpropagates `upstream`
/// (∂objective/∂output) and accumulates the result into `input.grad`.
/// The layer's own parameters are treated as frozen. Returns the forward output.
pub fn layer_forward_backward<L: Layer>(layer: &L, input: &mut DualTensor, upstream: &Tensor) -> Result<Tensor> {
    let (out, cache) = layer.forward(&input.value)?;
    if upstream.shape() != out.shape() {
        return Err(Error::dim(format!("upstream gradient {:?} vs output {:?}", upstream.shape(), out.shape())));
    }
    let grad_in = layer.backward(&cache, upstream, None)?;
    input.accumulate(&grad_in)?;
    Ok(out)
}

fn expect_matrix(x: &Tensor, width: usize, what: &str) -> Result<()> {
    if x.rank() != 2 || x.cols() != width {
        return Err(Error::dim(format!("{what}: expected [n×{width}], got {:?}", x.shape())));
    }
    Ok(())
}

/// `y = x·W + b` with `W` stored as `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[1] {
            return Err(Error::dim(format!("linear weight {:?} with bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Layer for Linear {
    type Cache = Tensor;
    type Grads = Linear;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        expect_matrix(input, self.in_dim(), "linear input")?;
        let mut out = matmul(input, &self.weight)?;
        let b = self.bias.data();
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok((out, input.clone()))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, grads: Option<&mut Linear>) -> Result<Tensor> {
        expect_matrix(grad_output, self.out_dim(), "linear upstream")?;
        if let Some(g) = grads {
            g.weight.add_assign(&matmul_at(input, grad_output)?)?;
            let bias = g.bias.data_mut();
            for i in 0..grad_output.rows() {
                for (b, d) in bias.iter_mut().zip(grad_output.row(i)) {
                    *b += d;
                }
            }
        }
        matmul_bt(grad_output, &self.weight)
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(gamma: Tensor, beta: Tensor) -> Result<Self> {
        if gamma.rank() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::dim(format!("layer norm γ {:?}, β {:?}", gamma.shape(), beta.shape())));
        }
        Ok(Self { gamma, beta })
    }

    pub fn identity(width: usize) -> Self {
        Self { gamma: Tensor::from_fn(&[width], |_| 1.0), beta: Tensor::zeros(&[width]) }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: Tensor::zeros(&[self.width()]), beta: Tensor::zeros(&[self.width()]) }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl Layer for LayerNorm {
    type Cache = LayerNormCache;
    type Grads = LayerNorm;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        let d = self.width();
        expect_matrix(input, d, "layer norm input")?;
        let n = input.rows();
        let mut normalized = Tensor::zeros(&[n, d]);
        let mut out = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = input.row(i);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(r);
            let xhat = normalized.row_mut(i);
            for (h, v) in xhat.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let xhat = normalized.row(i).to_vec();
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = self.gamma.data()[j] * xhat[j] + self.beta.data()[j];
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    fn backward(
        &self,
        cache: &LayerNormCache,
        grad_output: &Tensor,
        mut grads: Option<&mut LayerNorm>,
    ) -> Result<Tensor> {
        let d = self.width();
        expect_matrix(grad_output, d, "layer norm upstream")?;
        let n = grad_output.rows();
        let mut dx = Tensor::zeros(&[n, d]);
        let gamma = self.gamma.data();
        for i in 0..n {
            let dy = grad_output.row(i);
            let xhat = cache.normalized.row(i);
            if let Some(g) = grads.as_deref_mut() {
                for (j, gv) in g.gamma.data_mut().iter_mut().enumerate() {
                    *gv += dy[j] * xhat[j];
                }
                for (bv, d) in g.beta.data_mut().iter_mut().zip(dy) {
                    *bv += d;
                }
            }
            let dxhat: Vec<f32> = dy.iter().zip(gamma).map(|(a, b)| a * b).collect();
            let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
            let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
            let r = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = r * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        Ok(dx)
    }
}

/// Tanh-approximated GELU, applied pointwise.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Gelu;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f32) -> f32 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl Layer for Gelu {
    type Cache = Tensor;
    type Grads = ();

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = Tensor::from_parts(input.shape().to_vec(), input.data().iter().map(|&v| gelu(v)).collect());
        Ok((out, input.clone()))
    }

    fn backward(&self, input: &Tensor, grad_output: &Tensor, _grads: Option<&mut ()>) -> Result<Tensor> {
        if input.shape() != grad_output.shape() {
            return Err(Error::dim("gelu upstream shape"));
        }
        let data = input.data().iter().zip(grad_output.data()).map(|(&x, &g)| g * gelu_derivative(x)).collect();
        Ok(Tensor::from_parts(input.shape().to_vec(), data))
    }
}

/// Multi-head self-attention with a causal mask: position `i` attends to `0..=i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    /// Fused query/key/value projection, `[d × 3d]`.
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Tensor,
    qkv: Tensor,
    /// One `[n × n]` row-stochastic matrix per head.
    weights: Vec<Tensor>,
    context: Tensor,
}

impl MultiHeadAttention {
    pub fn new(qkv: Linear, out: Linear, heads: usize) -> Result<Self> {
        let d = qkv.in_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("width {d} not divisible into {heads} heads")));
        }
        if qkv.out_dim() != 3 * d || out.in_dim() != d || out.out_dim() != d {
            return Err(Error::dim("attention projections do not match width"));
        }
        Ok(Self { qkv, out, heads })
    }

    pub fn width(&self) -> usize {
        self.qkv.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self { qkv: self.qkv.zeros_like(), out: self.out.zeros_like(), heads: self.heads }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.qkv.params();
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.qkv.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

impl Layer for MultiHeadAttention {
    type Cache = AttentionCache;
    type Grads = MultiHeadAttention;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let d = self.width();
        expect_matrix(input, d, "attention input")?;
        let n = input.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qkv, _) = self.qkv.forward(input)?;
        let mut context = Tensor::zeros(&[n, d]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut w = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let q = &qkv.row(i)[qo..qo + dh];
                let row = w.row_mut(i);
                for j in 0..=i {
                    let k = &qkv.row(j)[ko..ko + dh];
                    row[j] = scale * crate::tensor::dot(q, k);
                }
                softmax_in_place(&mut row[..=i]);
            }
            for i in 0..n {
                let a = w.row(i).to_vec();
                let ctx = &mut context.row_mut(i)[qo..qo + dh];
                for (j, &aij) in a.iter().enumerate().take(i + 1) {
                    let v = &qkv.row(j)[vo..vo + dh];
                    for (c, vv) in ctx.iter_mut().zip(v) {
                        *c += aij * vv;
                    }
                }
            }
            weights.push(w);
        }
        let (out, _) = self.out.forward(&context)?;
        Ok((out, AttentionCache { input: input.clone(), qkv, weights, context }))
    }

    fn backward(
        &self,
        cache: &AttentionCache,
        grad_output: &Tensor,
        grads: Option<&mut MultiHeadAttention>,
    ) -> Result<Tensor> {
        let d = self.width();
        expect_matrix(grad_output, d, "attention upstream")?;
        let n = grad_output.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (mut qkv_grads, mut out_grads) = match grads {
            Some(g) => (Some(&mut g.qkv), Some(&mut g.out)),
            None => (None, None),
        };
        let dcontext = self.out.backward(&cache.context, grad_output, out_grads.take())?;
        let qkv = &cache.qkv;
        let mut dqkv = Tensor::zeros(&[n, 3 * d]);
        for (h, w) in cache.weights.iter().enumerate() {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let dctx = &dcontext.row(i)[qo..qo + dh];
                let a = w.row(i);
                // ∂/∂A[i, j] = dctx · v_j, and ∂/∂v_j += A[i, j] · dctx
                let mut da = vec![0.0f32; i + 1];
                for j in 0..=i {
                    let v = &qkv.row(j)[vo..vo + dh];
                    da[j] = crate::tensor::dot(dctx, v);
                    let dv = &mut dqkv.row_mut(j)[vo..vo + dh];
                    for (g, c) in dv.iter_mut().zip(dctx) {
                        *g += a[j] * c;
                    }
                }
                let weighted: f32 = (0..=i).map(|j| da[j] * a[j]).sum();
                let q = qkv.row(i)[qo..qo + dh].to_vec();
                for j in 0..=i {
                    let ds = a[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = qkv.row(j)[ko..ko + dh].to_vec();
                    let dq = &mut dqkv.row_mut(i)[qo..qo + dh];
                    for (g, kv) in dq.iter_mut().zip(&k) {
                        *g += ds * kv;
                    }
                    let dk = &mut dqkv.row_mut(j)[ko..ko + dh];
                    for (g, qv) in dk.iter_mut().zip(&q) {
                        *g += ds * qv;
                    }
                }
            }
        }
        self.qkv.backward(&cache.input, &dqkv, qkv_grads.take())
    }
}

/// Pre-norm residual block: `h = x + attn(ln1(x))`, `y = h + fc2(gelu(fc1(ln2(h))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Number of parameter tensors in one block, in serialization order.
pub const BLOCK_PARAM_TENSORS: usize = 12;

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    fc1: Tensor,
    act: Tensor,
    fc2: Tensor,
}

impl TransformerBlock {
    pub fn width(&self) -> usize {
        self.ln1.width()
    }

    /// Expansion of the feed-forward hidden layer relative to the width.
    pub const MLP_RATIO: usize = 4;

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    /// Shapes of the parameter tensors for a block of width `d`, in serialization order.
    pub fn param_shapes(d: usize) -> [Vec<usize>; BLOCK_PARAM_TENSORS] {
        let h = Self::MLP_RATIO * d;
        [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }

    /// Assembles a block from tensors in [`Self::param_shapes`] order.
    pub fn from_params(params: Vec<Tensor>, heads: usize) -> Result<Self> {
        if params.len() != BLOCK_PARAM_TENSORS {
            return Err(Error::dim(format!("block needs {BLOCK_PARAM_TENSORS} tensors, got {}", params.len())));
        }
        let d = params[0].len();
        for (i, (p, s)) in params.iter().zip(Self::param_shapes(d)).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::dim(format!("block tensor {i}: expected {s:?}, got {:?}", p.shape())));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked above");
        let ln1 = LayerNorm::new(next(), next())?;
        let qkv = Linear::new(next(), next())?;
        let out = Linear::new(next(), next())?;
        let attn = MultiHeadAttention::new(qkv, out, heads)?;
        let ln2 = LayerNorm::new(next(), next())?;
        let fc1 = Linear::new(next(), next())?;
        let fc2 = Linear::new(next(), next())?;
        Ok(Self { ln1, attn, ln2, fc1, fc2 })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
}

impl Layer for TransformerBlock {
    type Cache = BlockCache;
    type Grads = TransformerBlock;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (a, ln1) = self.ln1.forward(input)?;
        let (a, attn) = self.attn.forward(&a)?;
        let h = input.add(&a)?;
        let (b, ln2) = self.ln2.forward(&h)?;
        let (b, fc1) = self.fc1.forward(&b)?;
        let (b, act) = Gelu.forward(&b)?;
        let (b, fc2) = self.fc2.forward(&b)?;
        let out = h.add(&b)?;
        Ok((out, BlockCache { ln1, attn, ln2, fc1, act, fc2 }))
    }

    fn backward(
        &self,
        cache: &BlockCache,
        grad_output: &Tensor,
        grads: Option<&mut TransformerBlock>,
    ) -> Result<Tensor> {
        let (mut g_ln1, mut g_attn, mut g_ln2, mut g_fc1, mut g_fc2) = match grads {
            Some(g) => (Some(&mut g.ln1), Some(&mut g.attn), Some(&mut g.ln2), Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None, None, None, None),
        };
        let db = self.fc2.backward(&cache.fc2, grad_output, g_fc2.take())?;
        let db = Gelu.backward(&cache.act, &db, None)?;
        let db = self.fc1.backward(&cache.fc1, &db, g_fc1.take())?;
        let db = self.ln2.backward(&cache.ln2, &db, g_ln2.take())?;
        let mut dh = grad_output.add(&db)?;
        let da = self.attn.backward(&cache.attn, &dh, g_attn.take())?;
        let da = self.ln1.backward(&cache.ln1, &da, g_ln1.take())?;
        dh.add_assign(&da)?;
        Ok(dh)
    }
}

/// Builds the encoder input sequence `[prompt rows][class token rows] + positions`.
///
/// The lookup table holds `c` token embeddings per class; the prompt rows are
/// the layer input, so backward returns the gradient for the prompt rows only.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLookup<'a> {
    /// `[k × c × d]` class token table.
    pub table: &'a Tensor,
    pub class: usize,
    /// `[S × d]` positional embeddings.
    pub positional: &'a Tensor,
}

/// Gradients for the lookup's own tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub table: Tensor,
    pub positional: Tensor,
}

impl<'a> EmbeddingLookup<'a> {
    fn class_rows(&self) -> Result<(usize, usize, usize)> {
        let s = self.table.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("class token table must be [k×c×d], got {s:?}")));
        }
        if self.class >= s[0] {
            return Err(Error::dim(format!("class {} out of {}", self.class, s[0])));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Sequence for an optional prompt block.
    pub fn assemble(&self, prompt: Option<&Tensor>) -> Result<Tensor> {
        let (_, c, d) = self.class_rows()?;
        let p = match prompt {
            Some(t) => {
                expect_matrix(t, d, "prompt rows")?;
                t.rows()
            }
            None => 0,
        };
        let n = p + c;
        if n > self.positional.rows() {
            return Err(Error::config(format!(
                "sequence of {n} tokens exceeds maximum length {}",
                self.positional.rows()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        if let Some(t) = prompt {
            data.extend_from_slice(t.data());
        }
        let start = self.class * c * d;
        data.extend_from_slice(&self.table.data()[start..start + c * d]);
        for (i, v) in data.iter_mut().enumerate() {
            *v += self.positional.data()[i];
        }
        Ok(Tensor::from_parts(vec![n, d], data))
    }

    /// Distributes a sequence gradient back to the prompt rows and, when
    /// requested, to this class's table rows and the positional rows used.
    pub fn backward_sequence(
        &self,
        prompt_len: usize,
        grad_sequence: &Tensor,
        grads: Option<&mut EmbeddingGrads>,
    ) -> Result<Option<Tensor>> {
        let (_, c, d) = self.class_rows()?;
        expect_matrix(grad_sequence, d, "sequence gradient")?;
        if grad_sequence.rows() != prompt_len + c {
            return Err(Error::dim("sequence gradient length"));
        }
        if let Some(g) = grads {
            for (pv, gv) in g.positional.data_mut().iter_mut().zip(grad_sequence.data()) {
                *pv += gv;
            }
            let start = self.class * c * d;
            let tail = &grad_sequence.data()[prompt_len * d..];
            for (tv, gv) in g.table.data_mut()[start..start + c * d].iter_mut().zip(tail) {
                *tv += gv;
            }
        }
        if prompt_len == 0 {
            Ok(None)
        } else {
            Ok(Some(grad_sequence.slice_rows(0, prompt_len)?))
        }
    }
}

impl Layer for EmbeddingLookup<'_> {
    type Cache = usize;
    type Grads = EmbeddingGrads;

    fn forward(&self, input: &Tensor) -> Result<(Tensor, usize)> {
        Ok((self.assemble(Some(input))?, input.rows()))
    }

    fn backward(&self, prompt_len: &usize, grad_output: &Tensor, grads: Option<&mut EmbeddingGrads>) -> Result<Tensor> {
        self.backward_sequence(*prompt_len, grad_output, grads)?
            .ok_or_else(|| Error::dim("embedding lookup without prompt rows"))
    }
}
