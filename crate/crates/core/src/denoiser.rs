//! Conditional denoising transformer for the discrete diffusion stage.
//!
//! Maps (corrupted token grid, timestep, speech embedding) to per-position
//! logits over the M clean tokens. Conditioning enters through adaptive
//! layer normalization: per-channel scale and shift are linear functions
//! of projection(speech embedding) + timestep embedding, zero-initialized
//! so an untrained network reduces to its unconditional plain-norm form.

use crate::diffusion::{
    diffusion_loss_graph, forward_sample, reverse_sample, DiffusionLossConfig, SamplerStart,
    TransitionSchedule,
};
use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId};
use crate::nn::{
    collect_mut, join, plain_layer_norm, Attention, AttentionNodes, FeedForward,
    FeedForwardNodes, LayerNormParams, LayerNormNodes, Linear, LinearNodes, Params,
};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::vq::TokenGrid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── AdaLN ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdaLn {
    pub scale_proj: Linear,
    pub shift_proj: Linear,
}

pub struct AdaLnNodes {
    pub scale: LinearNodes,
    pub shift: LinearNodes,
}

impl AdaLn {
    /// Projections start at zero, so at construction this is exactly a
    /// plain layer norm regardless of the condition.
    pub fn new(width: usize) -> Self {
        AdaLn {
            scale_proj: Linear::zeroed(width, width),
            shift_proj: Linear::zeroed(width, width),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> AdaLnNodes {
        AdaLnNodes {
            scale: self.scale_proj.bind(g),
            shift: self.shift_proj.bind(g),
        }
    }

    /// `layer_norm(h) * (1 + s) + b` with `(s, b)` linear in `cond` (`[1, width]`).
    pub fn apply(&self, g: &mut Graph, n: &AdaLnNodes, h: NodeId, cond: NodeId) -> Result<NodeId> {
        let width = g.shape(h)[1];
        let normed = plain_layer_norm(g, h, width)?;
        let s = self.scale_proj.apply(g, &n.scale, cond)?;
        let s = g.reshape(s, vec![width])?;
        let s1 = g.add_scalar(s, 1.0);
        let b = self.shift_proj.apply(g, &n.shift, cond)?;
        let b = g.reshape(b, vec![width])?;
        let scaled = g.mul_row_broadcast(normed, s1)?;
        g.add_row_broadcast(scaled, b)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &AdaLnNodes) {
        self.scale_proj.take_grads(g, &n.scale);
        self.shift_proj.take_grads(g, &n.shift);
    }
}

impl Params for AdaLn {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.scale_proj.visit(&join(prefix, "scale"), f);
        self.shift_proj.visit(&join(prefix, "shift"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.scale_proj.visit_mut(&join(prefix, "scale"), f);
        self.shift_proj.visit_mut(&join(prefix, "shift"), f);
    }
}

// ── denoiser blocks ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserBlock {
    pub adaln1: AdaLn,
    pub attn: Attention,
    pub adaln2: AdaLn,
    pub ff: FeedForward,
    /// Additive-after-attention condition injection (config variant).
    pub cond_add: Option<Linear>,
}

pub struct DenoiserBlockNodes {
    pub adaln1: AdaLnNodes,
    pub attn: AttentionNodes,
    pub adaln2: AdaLnNodes,
    pub ff: FeedForwardNodes,
    pub cond_add: Option<LinearNodes>,
}

impl DenoiserBlock {
    fn apply(
        &self,
        g: &mut Graph,
        n: &DenoiserBlockNodes,
        h: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let width = g.shape(h)[1];
        let a = self.adaln1.apply(g, &n.adaln1, h, cond)?;
        let mut at = self.attn.apply(g, &n.attn, a)?;
        if let (Some(layer), Some(nodes)) = (&self.cond_add, &n.cond_add) {
            let add = layer.apply(g, nodes, cond)?;
            let add = g.reshape(add, vec![width])?;
            at = g.add_row_broadcast(at, add)?;
        }
        let h = g.add(h, at)?;
        let a2 = self.adaln2.apply(g, &n.adaln2, h, cond)?;
        let f = self.ff.apply(g, &n.ff, a2)?;
        g.add(h, f)
    }
}

impl Params for DenoiserBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.adaln1.visit(&join(prefix, "adaln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.adaln2.visit(&join(prefix, "adaln2"), f);
        self.ff.visit(&join(prefix, "ff"), f);
        if let Some(l) = &self.cond_add {
            l.visit(&join(prefix, "cond_add"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.adaln1.visit_mut(&join(prefix, "adaln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.adaln2.visit_mut(&join(prefix, "adaln2"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
        if let Some(l) = &mut self.cond_add {
            l.visit_mut(&join(prefix, "cond_add"), f);
        }
    }
}

// ── denoiser ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub m: usize,
    pub n_positions: usize,
    pub t_steps: usize,
    pub d_emb: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub additive_condition_variant: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            m: 64,
            n_positions: 16,
            t_steps: 100,
            d_emb: 32,
            width: 64,
            heads: 4,
            blocks: 4,
            ff_mult: 4,
            additive_condition_variant: false,
        }
    }
}

pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    /// M+1 rows: clean tokens plus [MASK].
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub t_emb: Tensor,
    pub cond_proj: Linear,
    pub blocks: Vec<DenoiserBlock>,
    pub ln_f: LayerNormParams,
    pub head: Linear,
}

pub struct DenoiserNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub t_emb: NodeId,
    pub cond_proj: LinearNodes,
    pub blocks: Vec<DenoiserBlockNodes>,
    pub ln_f: LayerNormNodes,
    pub head: LinearNodes,
}

impl DenoiserParams {
    pub fn new(cfg: DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let tok_emb = Tensor::randn(vec![cfg.m + 1, cfg.width], 0.02, rng);
        let pos_emb = Tensor::randn(vec![cfg.n_positions, cfg.width], 0.02, rng);
        let t_emb = Tensor::randn(vec![cfg.t_steps, cfg.width], 0.02, rng);
        let cond_proj = Linear::new(cfg.d_emb, cfg.width, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| DenoiserBlock {
                adaln1: AdaLn::new(cfg.width),
                attn: Attention::new(cfg.width, cfg.heads, rng),
                adaln2: AdaLn::new(cfg.width),
                ff: FeedForward::new(cfg.width, cfg.width * cfg.ff_mult, rng),
                cond_add: if cfg.additive_condition_variant {
                    Some(Linear::zeroed(cfg.width, cfg.width))
                } else {
                    None
                },
            })
            .collect();
        let ln_f = LayerNormParams::new(cfg.width);
        let head = Linear::new(cfg.width, cfg.m, rng);
        DenoiserParams {
            cfg,
            tok_emb,
            pos_emb,
            t_emb,
            cond_proj,
            blocks,
            ln_f,
            head,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> DenoiserNodes {
        DenoiserNodes {
            tok_emb: g.leaf(&self.tok_emb),
            pos_emb: g.leaf(&self.pos_emb),
            t_emb: g.leaf(&self.t_emb),
            cond_proj: self.cond_proj.bind(g),
            blocks: self
                .blocks
                .iter()
                .map(|b| DenoiserBlockNodes {
                    adaln1: b.adaln1.bind(g),
                    attn: b.attn.bind(g),
                    adaln2: b.adaln2.bind(g),
                    ff: b.ff.bind(g),
                    cond_add: b.cond_add.as_ref().map(|l| l.bind(g)),
                })
                .collect(),
            ln_f: self.ln_f.bind(g),
            head: self.head.bind(g),
        }
    }

    /// Combined condition: projection of the speech embedding plus the
    /// timestep embedding row; recomputed per (y, t).
    fn condition(
        &self,
        g: &mut Graph,
        n: &DenoiserNodes,
        y: &[f64],
        t: usize,
    ) -> Result<NodeId> {
        let y_node = g.leaf_from(vec![1, self.cfg.d_emb], y.to_vec())?;
        let proj = self.cond_proj.apply(g, &n.cond_proj, y_node)?;
        let t_row = g.gather_rows(n.t_emb, &[t - 1])?;
        g.add(proj, t_row)
    }

    /// Per-position logits over the M clean tokens, with bound parameters.
    pub fn logits_with(
        &self,
        g: &mut Graph,
        n: &DenoiserNodes,
        k_t: &TokenGrid,
        t: usize,
        y: &[f64],
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        if t < 1 || t > cfg.t_steps {
            return Err(StaError::invalid(
                "denoise_logits",
                format!("t = {} outside [1,{}]", t, cfg.t_steps),
            ));
        }
        if k_t.len() != cfg.n_positions {
            return Err(StaError::shape(
                "denoise_logits",
                format!("grid has {} positions, model expects {}", k_t.len(), cfg.n_positions),
            ));
        }
        k_t.validate(cfg.m, true)?;
        if y.len() != cfg.d_emb {
            return Err(StaError::shape(
                "denoise_logits",
                format!("embedding dim {} vs configured {}", y.len(), cfg.d_emb),
            ));
        }
        let cond = self.condition(g, n, y, t)?;
        let tok = g.gather_rows(n.tok_emb, &k_t.tokens)?;
        let mut h = g.add(tok, n.pos_emb)?;
        for (block, bn) in self.blocks.iter().zip(&n.blocks) {
            h = block.apply(g, bn, h, cond)?;
        }
        let h = self.ln_f.apply(g, &n.ln_f, h)?;
        self.head.apply(g, &n.head, h)
    }

    /// Plain forward pass; returns `N*M` logits row-major.
    pub fn denoise_logits(&self, k_t: &TokenGrid, t: usize, y: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let n = self.bind(&mut g);
        let out = self.logits_with(&mut g, &n, k_t, t, y)?;
        Ok(g.values(out).to_vec())
    }

    pub fn take_grads(&mut self, g: &Graph, n: &DenoiserNodes) {
        self.tok_emb.grad = Some(g.grad(n.tok_emb).to_vec());
        self.pos_emb.grad = Some(g.grad(n.pos_emb).to_vec());
        self.t_emb.grad = Some(g.grad(n.t_emb).to_vec());
        self.cond_proj.take_grads(g, &n.cond_proj);
        for (block, bn) in self.blocks.iter_mut().zip(&n.blocks) {
            block.adaln1.take_grads(g, &bn.adaln1);
            block.attn.take_grads(g, &bn.attn);
            block.adaln2.take_grads(g, &bn.adaln2);
            block.ff.take_grads(g, &bn.ff);
            if let (Some(l), Some(ln)) = (&mut block.cond_add, &bn.cond_add) {
                l.take_grads(g, ln);
            }
        }
        self.ln_f.take_grads(g, &n.ln_f);
        self.head.take_grads(g, &n.head);
    }

    /// Draw a token grid conditioned on the speech embedding, starting
    /// from all-[MASK] (or random tokens) and resampling every position
    /// each step.
    pub fn sample(
        &self,
        y: &[f64],
        schedule: &TransitionSchedule,
        rng: &mut ChaCha8Rng,
        start: SamplerStart,
    ) -> Result<TokenGrid> {
        if schedule.m != self.cfg.m || schedule.t_steps != self.cfg.t_steps {
            return Err(StaError::invalid(
                "sample",
                format!(
                    "schedule (M={}, T={}) does not match model (M={}, T={})",
                    schedule.m, schedule.t_steps, self.cfg.m, self.cfg.t_steps
                ),
            ));
        }
        reverse_sample(
            self.cfg.n_positions,
            |grid, t| self.denoise_logits(grid, t, y),
            schedule,
            rng,
            start,
        )
    }
}

impl Params for DenoiserParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "tok_emb"), &self.tok_emb);
        f(join(prefix, "pos_emb"), &self.pos_emb);
        f(join(prefix, "t_emb"), &self.t_emb);
        self.cond_proj.visit(&join(prefix, "cond_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i)), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "tok_emb"), &mut self.tok_emb);
        f(join(prefix, "pos_emb"), &mut self.pos_emb);
        f(join(prefix, "t_emb"), &mut self.t_emb);
        self.cond_proj.visit_mut(&join(prefix, "cond_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i)), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

// ── training ────────────────────────────────────────────────────────

pub struct DiffusionTrainer {
    pub params: DenoiserParams,
    pub opt: OptimizerState,
    pub schedule: TransitionSchedule,
    pub loss_cfg: DiffusionLossConfig,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub iters_done: u64,
}

impl DiffusionTrainer {
    /// One pass over (clean grid, speech embedding) pairs: per sample a
    /// uniform timestep is drawn, the grid is corrupted through the
    /// forward chain, and the variational loss is minimized. Linear
    /// warmup, then constant learning rate.
    pub fn train_epoch(
        &mut self,
        corpus: &[(TokenGrid, Vec<f64>)],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if corpus.is_empty() {
            return Err(StaError::invalid("train_denoiser_epoch", "empty corpus"));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            total += self.train_batch(corpus, chunk, rng)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    fn train_batch(
        &mut self,
        corpus: &[(TokenGrid, Vec<f64>)],
        idx: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = self.params.bind(&mut g);
        let mut terms = Vec::with_capacity(idx.len());
        for &i in idx {
            let (k0, y) = &corpus[i];
            let t = rng.random_range(1..=self.schedule.t_steps);
            let k_t = forward_sample(k0, t, &self.schedule, rng)?;
            let logits = self.params.logits_with(&mut g, &nodes, &k_t, t, y)?;
            terms.push(diffusion_loss_graph(
                &mut g,
                logits,
                k0,
                &k_t,
                t,
                &self.schedule,
                &self.loss_cfg,
            )?);
        }
        let mut acc = terms[0];
        for &term in &terms[1..] {
            acc = g.add(acc, term)?;
        }
        let loss = g.scale(acc, 1.0 / idx.len() as f64);
        let value = g.value_scalar(loss);
        if !value.is_finite() {
            return Err(StaError::non_finite(
                "train_denoiser_epoch",
                format!("batch loss = {}", value),
            ));
        }
        g.backward(loss)?;
        self.params.take_grads(&g, &nodes);

        self.iters_done += 1;
        self.opt.config.lr = if self.iters_done <= self.warmup_iters {
            self.base_lr * self.iters_done as f64 / self.warmup_iters.max(1) as f64
        } else {
            self.base_lr
        };
        let mut named = collect_mut(&mut self.params);
        let mut refs: Vec<(&str, &mut Tensor)> = named
            .iter_mut()
            .map(|(n, t)| (n.as_str(), &mut **t))
            .collect();
        self.opt.step(&mut refs)?;
        Ok(value)
    }

    /// Loss on held-out pairs with fixed per-sample corruption (stable
    /// across epochs, so dev losses are comparable).
    pub fn eval_loss(&self, corpus: &[(TokenGrid, Vec<f64>)], eval_seed: u64) -> Result<f64> {
        if corpus.is_empty() {
            return Err(StaError::invalid("eval_loss", "empty corpus"));
        }
        let mut total = 0.0;
        for (i, (k0, y)) in corpus.iter().enumerate() {
            let mut rng = crate::rng::derive_rng(eval_seed, "diffusion-dev", &[i as u64]);
            let t = rng.random_range(1..=self.schedule.t_steps);
            let k_t = forward_sample(k0, t, &self.schedule, &mut rng)?;
            let mut g = Graph::new();
            let nodes = self.params.bind(&mut g);
            let logits = self.params.logits_with(&mut g, &nodes, &k_t, t, y)?;
            let loss = diffusion_loss_graph(&mut g, logits, k0, &k_t, t, &self.schedule, &self.loss_cfg)?;
            total += g.value_scalar(loss);
        }
        Ok(total / corpus.len() as f64)
    }
}
