//! Shared learned-layer building blocks.
//!
//! Each layer struct owns its parameter tensors, `bind`s them into a graph
//! as leaves for a forward pass, and copies gradients back out with
//! `take_grads` after `backward`. Checkpointing walks the same named
//! parameter lists.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Named parameter visitation, used by the optimizer and checkpoints.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

pub fn collect<'a, P: Params + ?Sized>(p: &'a P) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn collect_mut<'a, P: Params + ?Sized>(p: &'a mut P) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |name, t| out.push((name, t)));
    out
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

// ── linear ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Tensor::randn(vec![d_in, d_out], std, rng),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    /// All-zero weights and bias; AdaLN condition projections start here.
    pub fn zeroed(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![d_in, d_out]),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LinearNodes {
        LinearNodes {
            w: g.leaf(&self.w),
            b: g.leaf(&self.b),
        }
    }

    pub fn apply(&self, g: &mut Graph, n: &LinearNodes, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, n.w)?;
        g.add_row_broadcast(y, n.b)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &LinearNodes) {
        self.w.grad = Some(g.grad(n.w).to_vec());
        self.b.grad = Some(g.grad(n.b).to_vec());
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

// ── layer norm ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

pub struct LayerNormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(vec![d], 1.0),
            bias: Tensor::zeros(vec![d]),
            eps: 1e-5,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LayerNormNodes {
        LayerNormNodes {
            gain: g.leaf(&self.gain),
            bias: g.leaf(&self.bias),
        }
    }

    pub fn apply(&self, g: &mut Graph, n: &LayerNormNodes, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, n.gain, n.bias, self.eps)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &LayerNormNodes) {
        self.gain.grad = Some(g.grad(n.gain).to_vec());
        self.bias.grad = Some(g.grad(n.bias).to_vec());
    }
}

impl Params for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Plain normalization without learned gain/bias (gain 1, bias 0), the
/// kernel inside AdaLN.
pub fn plain_layer_norm(g: &mut Graph, x: NodeId, d: usize) -> Result<NodeId> {
    let gain = g.leaf(&Tensor::full(vec![d], 1.0));
    let bias = g.leaf(&Tensor::zeros(vec![d]));
    g.layer_norm(x, gain, bias, 1e-5)
}

// ── multi-head self-attention ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttentionNodes {
    pub wq: LinearNodes,
    pub wk: LinearNodes,
    pub wv: LinearNodes,
    pub wo: LinearNodes,
}

impl Attention {
    pub fn new(width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(width % heads == 0, "width must divide by heads");
        Attention {
            wq: Linear::new(width, width, rng),
            wk: Linear::new(width, width, rng),
            wv: Linear::new(width, width, rng),
            wo: Linear::new(width, width, rng),
            heads,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionNodes {
        AttentionNodes {
            wq: self.wq.bind(g),
            wk: self.wk.bind(g),
            wv: self.wv.bind(g),
            wo: self.wo.bind(g),
        }
    }

    /// Full (unmasked) self-attention over the rows of `x`.
    pub fn apply(&self, g: &mut Graph, n: &AttentionNodes, x: NodeId) -> Result<NodeId> {
        let width = g.shape(x)[1];
        let dh = width / self.heads;
        let q = self.wq.apply(g, &n.wq, x)?;
        let k = self.wk.apply(g, &n.wk, x)?;
        let v = self.wv.apply(g, &n.wv, x)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(scaled, 1)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        self.wo.apply(g, &n.wo, merged)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &AttentionNodes) {
        self.wq.take_grads(g, &n.wq);
        self.wk.take_grads(g, &n.wk);
        self.wv.take_grads(g, &n.wv);
        self.wo.take_grads(g, &n.wo);
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&join(prefix, "q"), f);
        self.wk.visit(&join(prefix, "k"), f);
        self.wv.visit(&join(prefix, "v"), f);
        self.wo.visit(&join(prefix, "o"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.wq.visit_mut(&join(prefix, "q"), f);
        self.wk.visit_mut(&join(prefix, "k"), f);
        self.wv.visit_mut(&join(prefix, "v"), f);
        self.wo.visit_mut(&join(prefix, "o"), f);
    }
}

// ── feed-forward ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

pub struct FeedForwardNodes {
    pub w1: LinearNodes,
    pub w2: LinearNodes,
}

impl FeedForward {
    pub fn new(width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: Linear::new(width, hidden, rng),
            w2: Linear::new(hidden, width, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> FeedForwardNodes {
        FeedForwardNodes {
            w1: self.w1.bind(g),
            w2: self.w2.bind(g),
        }
    }

    pub fn apply(&self, g: &mut Graph, n: &FeedForwardNodes, x: NodeId) -> Result<NodeId> {
        let h = self.w1.apply(g, &n.w1, x)?;
        let h = g.gelu(h);
        self.w2.apply(g, &n.w2, h)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &FeedForwardNodes) {
        self.w1.take_grads(g, &n.w1);
        self.w2.take_grads(g, &n.w2);
    }
}

impl Params for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.w1.visit(&join(prefix, "w1"), f);
        self.w2.visit(&join(prefix, "w2"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.w1.visit_mut(&join(prefix, "w1"), f);
        self.w2.visit_mut(&join(prefix, "w2"), f);
    }
}

// ── plain pre-norm transformer block ────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub attn: Attention,
    pub ln2: LayerNormParams,
    pub ff: FeedForward,
}

pub struct EncoderBlockNodes {
    pub ln1: LayerNormNodes,
    pub attn: AttentionNodes,
    pub ln2: LayerNormNodes,
    pub ff: FeedForwardNodes,
}

impl EncoderBlock {
    pub fn new(width: usize, heads: usize, ff_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            ln1: LayerNormParams::new(width),
            attn: Attention::new(width, heads, rng),
            ln2: LayerNormParams::new(width),
            ff: FeedForward::new(width, ff_hidden, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderBlockNodes {
        EncoderBlockNodes {
            ln1: self.ln1.bind(g),
            attn: self.attn.bind(g),
            ln2: self.ln2.bind(g),
            ff: self.ff.bind(g),
        }
    }

    pub fn apply(&self, g: &mut Graph, n: &EncoderBlockNodes, x: NodeId) -> Result<NodeId> {
        let normed = self.ln1.apply(g, &n.ln1, x)?;
        let a = self.attn.apply(g, &n.attn, normed)?;
        let x = g.add(x, a)?;
        let normed = self.ln2.apply(g, &n.ln2, x)?;
        let h = self.ff.apply(g, &n.ff, normed)?;
        g.add(x, h)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &EncoderBlockNodes) {
        self.ln1.take_grads(g, &n.ln1);
        self.attn.take_grads(g, &n.attn);
        self.ln2.take_grads(g, &n.ln2);
        self.ff.take_grads(g, &n.ff);
    }
}

impl Params for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}
