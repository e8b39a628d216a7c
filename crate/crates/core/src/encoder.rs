//! First pipeline stage: align caption frame sequences with frozen teacher
//! image embeddings through a mini-batch contrastive loss.
//!
//! The speech side is a 1-D conv stack over frames, a learnable CLS token
//! prepended to the sequence, transformer blocks, and a projection to the
//! embedding space. The teacher is a frozen deterministic image embedder.

use crate::data::{render, SceneSpec, CaptionSequence, D_FRAME, N_SCENE_COMBOS};
use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId, PAD};
use crate::nn::{collect_mut, join, EncoderBlock, EncoderBlockNodes, LayerNormParams, LayerNormNodes, Linear, LinearNodes, Params};
use crate::optim::OptimizerState;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── frozen teacher ──────────────────────────────────────────────────

/// Frozen deterministic image embedder: recovers the scene attributes of a
/// rendered image by nearest-reference lookup, then projects their one-hot
/// encoding through a fixed random matrix.
pub struct TeacherEmbedder {
    pub d_emb: usize,
    projection: Tensor,
    references: Vec<Vec<f64>>,
}

const ATTR_ONEHOT_DIM: usize = 3 + 4 + 2 + 9;

impl TeacherEmbedder {
    pub fn new(d_emb: usize) -> Self {
        // fixed stream: the teacher is identical in every run
        let mut rng = crate::rng::derive_rng(0x5445_4143, "teacher-projection", &[]);
        let mut projection = Tensor::randn(vec![ATTR_ONEHOT_DIM, d_emb], 1.0, &mut rng);
        if d_emb >= ATTR_ONEHOT_DIM {
            // Gram-Schmidt: a random orthonormal basis keeps the attribute
            // directions from interfering with each other
            for i in 0..ATTR_ONEHOT_DIM {
                for j in 0..i {
                    let dot: f64 = (0..d_emb)
                        .map(|k| projection.values[i * d_emb + k] * projection.values[j * d_emb + k])
                        .sum();
                    for k in 0..d_emb {
                        let vj = projection.values[j * d_emb + k];
                        projection.values[i * d_emb + k] -= dot * vj;
                    }
                }
                let norm: f64 = (0..d_emb)
                    .map(|k| projection.values[i * d_emb + k].powi(2))
                    .sum::<f64>()
                    .sqrt();
                for k in 0..d_emb {
                    projection.values[i * d_emb + k] /= norm;
                }
            }
        }
        let references = (0..N_SCENE_COMBOS)
            .map(|i| render(&SceneSpec::from_index(i).unwrap()))
            .collect();
        TeacherEmbedder {
            d_emb,
            projection,
            references,
        }
    }

    pub fn embed_spec(&self, spec: &SceneSpec) -> Vec<f64> {
        let hot = [
            spec.shape as usize,
            3 + spec.color as usize,
            7 + spec.size as usize,
            9 + spec.position as usize,
        ];
        let mut v = vec![0.0; self.d_emb];
        for &row in &hot {
            for j in 0..self.d_emb {
                v[j] += self.projection.values[row * self.d_emb + j];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    /// Deterministic image embedding via exact nearest-reference lookup.
    pub fn embed_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.references[0].len() {
            return Err(StaError::shape(
                "embed_image_teacher",
                format!(
                    "image has {} values, corpus format has {}",
                    image.len(),
                    self.references[0].len()
                ),
            ));
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, r) in self.references.iter().enumerate() {
            let d: f64 = r.iter().zip(image).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        Ok(self.embed_spec(&SceneSpec::from_index(best)?))
    }

    /// Stable checksum of the frozen projection, for freeze audits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.projection.numel() * 8);
        for v in &self.projection.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

// ── 1-D convolution over frames ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv1dNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl Conv1d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let patch = kernel * in_c;
        Conv1d {
            weight: Tensor::randn(vec![patch, out_c], 1.0 / (patch as f64).sqrt(), rng),
            bias: Tensor::zeros(vec![out_c]),
            in_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn bind(&self, g: &mut Graph) -> Conv1dNodes {
        Conv1dNodes {
            w: g.leaf(&self.weight),
            b: g.leaf(&self.bias),
        }
    }

    /// Input `[L, in_c]`; the index map is built per length, captions vary.
    pub fn apply(&self, g: &mut Graph, n: &Conv1dNodes, x: NodeId) -> Result<NodeId> {
        let len = g.shape(x)[0];
        if len + 2 * self.pad < self.kernel {
            return Err(StaError::shape(
                "conv1d",
                format!("sequence of {} frames shorter than kernel {}", len, self.kernel),
            ));
        }
        let out_len = self.out_len(len);
        let mut map = Vec::with_capacity(out_len * self.kernel * self.in_c);
        for o in 0..out_len {
            for k in 0..self.kernel {
                let i = (o * self.stride + k) as isize - self.pad as isize;
                for c in 0..self.in_c {
                    if i >= 0 && (i as usize) < len {
                        map.push(i as usize * self.in_c + c);
                    } else {
                        map.push(PAD);
                    }
                }
            }
        }
        let cols = g.gather_flat(x, &map, vec![out_len, self.kernel * self.in_c])?;
        let y = g.matmul(cols, n.w)?;
        g.add_row_broadcast(y, n.b)
    }

    pub fn take_grads(&mut self, g: &Graph, n: &Conv1dNodes) {
        self.weight.grad = Some(g.grad(n.w).to_vec());
        self.bias.grad = Some(g.grad(n.b).to_vec());
    }
}

impl Params for Conv1d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w"), &self.weight);
        f(join(prefix, "b"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w"), &mut self.weight);
        f(join(prefix, "b"), &mut self.bias);
    }
}

// ── speech encoder ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub d_emb: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub conv_hidden: usize,
    pub init_inv_tau: f64,
    pub max_inv_tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_emb: 32,
            width: 64,
            heads: 4,
            blocks: 2,
            ff_mult: 4,
            conv_hidden: 32,
            init_inv_tau: 10.0,
            max_inv_tau: 100.0,
        }
    }
}

pub struct SpeechEncoderParams {
    pub cfg: EncoderConfig,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub cls: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNormParams,
    pub proj: Linear,
    /// log(1/τ); τ is the learnable contrastive temperature.
    pub logit_scale: Tensor,
}

pub struct SpeechEncoderNodes {
    pub conv1: Conv1dNodes,
    pub conv2: Conv1dNodes,
    pub cls: NodeId,
    pub blocks: Vec<EncoderBlockNodes>,
    pub ln_f: LayerNormNodes,
    pub proj: LinearNodes,
    pub logit_scale: NodeId,
}

impl SpeechEncoderParams {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        // stride 2 overall: caption symbols span 4-10 frames, so finer
        // temporal resolution keeps adjacent words separable
        let conv1 = Conv1d::new(D_FRAME, cfg.conv_hidden, 5, 2, 2, rng);
        let conv2 = Conv1d::new(cfg.conv_hidden, cfg.width, 5, 1, 2, rng);
        let cls = Tensor::randn(vec![1, cfg.width], 0.02, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| EncoderBlock::new(cfg.width, cfg.heads, cfg.width * cfg.ff_mult, rng))
            .collect();
        let ln_f = LayerNormParams::new(cfg.width);
        let proj = Linear::new(cfg.width, cfg.d_emb, rng);
        let logit_scale = Tensor::scalar(cfg.init_inv_tau.ln());
        SpeechEncoderParams {
            cfg,
            conv1,
            conv2,
            cls,
            blocks,
            ln_f,
            proj,
            logit_scale,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> SpeechEncoderNodes {
        SpeechEncoderNodes {
            conv1: self.conv1.bind(g),
            conv2: self.conv2.bind(g),
            cls: g.leaf(&self.cls),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            ln_f: self.ln_f.bind(g),
            proj: self.proj.bind(g),
            logit_scale: g.leaf(&self.logit_scale),
        }
    }

    /// Embed one caption with already-bound parameters; the output is the
    /// transformer state at the CLS position, projected and L2-normalized.
    pub fn embed_with(
        &self,
        g: &mut Graph,
        n: &SpeechEncoderNodes,
        caption: &CaptionSequence,
    ) -> Result<NodeId> {
        if caption.is_empty() {
            return Err(StaError::invalid("embed_caption", "caption has no frames"));
        }
        let x = g.leaf_from(vec![caption.len(), D_FRAME], caption.frames.clone())?;
        let h = self.conv1.apply(g, &n.conv1, x)?;
        let h = g.gelu(h);
        let h = self.conv2.apply(g, &n.conv2, h)?;
        let h = g.gelu(h);
        let mut h = g.concat_rows(&[n.cls, h])?;
        for (block, bn) in self.blocks.iter().zip(&n.blocks) {
            h = block.apply(g, bn, h)?;
        }
        let h = self.ln_f.apply(g, &n.ln_f, h)?;
        let cls_state = g.slice_rows(h, 0, 1)?;
        let emb = self.proj.apply(g, &n.proj, cls_state)?;
        g.l2_normalize_rows(emb)
    }

    /// Convenience single-caption embedding against frozen parameters.
    pub fn embed_caption(&self, caption: &CaptionSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let n = self.bind(&mut g);
        let emb = self.embed_with(&mut g, &n, caption)?;
        Ok(g.values(emb).to_vec())
    }

    pub fn take_grads(&mut self, g: &Graph, n: &SpeechEncoderNodes) {
        self.conv1.take_grads(g, &n.conv1);
        self.conv2.take_grads(g, &n.conv2);
        self.cls.grad = Some(g.grad(n.cls).to_vec());
        for (block, bn) in self.blocks.iter_mut().zip(&n.blocks) {
            block.take_grads(g, bn);
        }
        self.ln_f.take_grads(g, &n.ln_f);
        self.proj.take_grads(g, &n.proj);
        self.logit_scale.grad = Some(g.grad(n.logit_scale).to_vec());
    }

    /// Inverse temperature currently in use.
    pub fn inv_tau(&self) -> f64 {
        self.logit_scale.values[0].exp()
    }

    fn clamp_temperature(&mut self) {
        let max = self.cfg.max_inv_tau.ln();
        if self.logit_scale.values[0] > max {
            self.logit_scale.values[0] = max;
        }
    }
}

impl Params for SpeechEncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        f(join(prefix, "cls"), &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", i)), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "logit_scale"), &self.logit_scale);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        f(join(prefix, "cls"), &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", i)), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(join(prefix, "logit_scale"), &mut self.logit_scale);
    }
}

// ── contrastive loss ────────────────────────────────────────────────

/// Symmetric InfoNCE on the graph: cross-entropy over similarity rows
/// (speech→image) and columns (image→speech), averaged. `inv_tau` is a
/// 1-element node so the temperature can be learned.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    speech: NodeId,
    image: NodeId,
    inv_tau: NodeId,
) -> Result<NodeId> {
    let b = g.shape(speech)[0];
    if g.shape(image)[0] != b {
        return Err(StaError::shape(
            "contrastive_loss",
            format!("batch sizes differ: {} vs {}", b, g.shape(image)[0]),
        ));
    }
    if b < 2 {
        return Err(StaError::invalid(
            "contrastive_loss",
            "batch must hold at least 2 pairs",
        ));
    }
    let image_t = g.transpose(image)?;
    let sim = g.matmul(speech, image_t)?;
    let scale = g.exp(inv_tau);
    let scaled = g.mul_scalar_node(sim, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let row_loss = g.cross_entropy(scaled, &targets)?;
    let scaled_t = g.transpose(scaled)?;
    let col_loss = g.cross_entropy(scaled_t, &targets)?;
    let total = g.add(row_loss, col_loss)?;
    Ok(g.scale(total, 0.5))
}

/// Plain-value symmetric InfoNCE at fixed temperature τ.
pub fn contrastive_loss(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(StaError::invalid(
            "contrastive_loss",
            format!("temperature {} must be > 0", tau),
        ));
    }
    if x.len() != y.len() {
        return Err(StaError::shape(
            "contrastive_loss",
            format!("batch sizes differ: {} vs {}", x.len(), y.len()),
        ));
    }
    let b = x.len();
    if b < 2 {
        return Err(StaError::invalid(
            "contrastive_loss",
            "batch must hold at least 2 pairs",
        ));
    }
    let d = x[0].len();
    let mut g = Graph::new();
    let xn = g.leaf_from(vec![b, d], x.concat())?;
    let yn = g.leaf_from(vec![b, d], y.concat())?;
    let inv_tau = g.scalar_leaf((1.0 / tau).ln());
    let loss = contrastive_loss_graph(&mut g, yn, xn, inv_tau)?;
    Ok(g.value_scalar(loss))
}

// ── training ────────────────────────────────────────────────────────

/// A caption paired with its teacher image embedding. `group` identifies
/// captions of the same underlying image so batching can keep them apart
/// (two captions of one image would otherwise be false negatives).
pub struct TrainPair {
    pub caption: CaptionSequence,
    pub image_embedding: Vec<f64>,
    pub group: usize,
}

/// Shuffle, then pack indices into batches with pairwise-distinct groups.
fn grouped_batches(
    pairs: &[TrainPair],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let cap = batch_size.max(2);
    let mut batches: Vec<(Vec<usize>, std::collections::BTreeSet<usize>)> = Vec::new();
    for idx in order {
        let group = pairs[idx].group;
        match batches
            .iter_mut()
            .find(|(members, groups)| members.len() < cap && !groups.contains(&group))
        {
            Some((members, groups)) => {
                members.push(idx);
                groups.insert(group);
            }
            None => {
                let mut groups = std::collections::BTreeSet::new();
                groups.insert(group);
                batches.push((vec![idx], groups));
            }
        }
    }
    batches.into_iter().map(|(members, _)| members).collect()
}

pub struct EncoderTrainer {
    pub params: SpeechEncoderParams,
    pub opt: OptimizerState,
}

impl EncoderTrainer {
    pub fn new(params: SpeechEncoderParams, opt: OptimizerState) -> Self {
        EncoderTrainer { params, opt }
    }

    /// One pass over the pairs with deterministic shuffling; returns the
    /// mean batch loss. Remainder batches smaller than 2 are skipped.
    pub fn train_epoch(
        &mut self,
        pairs: &[TrainPair],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if pairs.len() < 2 {
            return Err(StaError::invalid(
                "train_encoder_epoch",
                "need at least 2 pairs",
            ));
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in grouped_batches(pairs, batch_size, rng) {
            if chunk.len() < 2 {
                continue;
            }
            let loss = self.train_batch(pairs, &chunk)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    fn train_batch(&mut self, pairs: &[TrainPair], idx: &[usize]) -> Result<f64> {
        let d = self.params.cfg.d_emb;
        let mut g = Graph::new();
        let nodes = self.params.bind(&mut g);
        let mut embs = Vec::with_capacity(idx.len());
        for &i in idx {
            embs.push(self.params.embed_with(&mut g, &nodes, &pairs[i].caption)?);
        }
        let speech = g.concat_rows(&embs)?;
        let teacher: Vec<f64> = idx
            .iter()
            .flat_map(|&i| pairs[i].image_embedding.iter().cloned())
            .collect();
        let image = g.leaf_from(vec![idx.len(), d], teacher)?;
        let loss = contrastive_loss_graph(&mut g, speech, image, nodes.logit_scale)?;
        let value = g.value_scalar(loss);
        g.backward(loss)?;
        self.params.take_grads(&g, &nodes);
        let mut named = collect_mut(&mut self.params);
        let mut refs: Vec<(&str, &mut Tensor)> = named
            .iter_mut()
            .map(|(n, t)| (n.as_str(), &mut **t))
            .collect();
        self.opt.step(&mut refs)?;
        self.params.clamp_temperature();
        Ok(value)
    }

    /// Mean contrastive loss without updates (dev evaluation); batches are
    /// grouped the same way as training, from a fixed stream so the value
    /// is comparable across epochs.
    pub fn eval_loss(&self, pairs: &[TrainPair], batch_size: usize) -> Result<f64> {
        let d = self.params.cfg.d_emb;
        let mut fixed = crate::rng::derive_rng(0x4445_5643, "encoder-eval-batches", &[]);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in grouped_batches(pairs, batch_size, &mut fixed) {
            let chunk = &chunk[..];
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let nodes = self.params.bind(&mut g);
            let mut embs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                embs.push(self.params.embed_with(&mut g, &nodes, &pairs[i].caption)?);
            }
            let speech = g.concat_rows(&embs)?;
            let teacher: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| pairs[i].image_embedding.iter().cloned())
                .collect();
            let image = g.leaf_from(vec![chunk.len(), d], teacher)?;
            let loss = contrastive_loss_graph(&mut g, speech, image, nodes.logit_scale)?;
            total += g.value_scalar(loss);
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_caption, Language};
    use crate::gradcheck::finite_difference_check;
    use crate::optim::AdamWConfig;
    use rand::SeedableRng;

    fn caption(seed: u64) -> CaptionSequence {
        let spec = SceneSpec::from_index((seed as usize * 31) % N_SCENE_COMBOS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synthesize_caption(&spec, Language::A, 0, &mut rng)
    }

    #[test]
    fn embedding_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SpeechEncoderParams::new(EncoderConfig::default(), &mut rng);
        for seed in 0..5 {
            let emb = params.embed_caption(&caption(seed)).unwrap();
            let norm: f64 = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_captions_embed_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SpeechEncoderParams::new(EncoderConfig::default(), &mut rng);
        let c = caption(3);
        let mut g = Graph::new();
        let n = params.bind(&mut g);
        let a = params.embed_with(&mut g, &n, &c).unwrap();
        let b = params.embed_with(&mut g, &n, &c).unwrap();
        assert_eq!(g.values(a), g.values(b));
    }

    #[test]
    fn teacher_is_deterministic_and_injective_on_attributes() {
        let teacher = TeacherEmbedder::new(32);
        let a = SceneSpec::from_index(7).unwrap();
        let img = render(&a);
        let e1 = teacher.embed_image(&img).unwrap();
        let e2 = teacher.embed_image(&img).unwrap();
        assert_eq!(e1, e2);
        let b = SceneSpec::from_index(180).unwrap();
        let e3 = teacher.embed_image(&render(&b)).unwrap();
        let cos: f64 = e1.iter().zip(&e3).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0 - 1e-6);
        // embeddings come back normalized
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn teacher_checksum_is_stable() {
        let t1 = TeacherEmbedder::new(32);
        let t2 = TeacherEmbedder::new(32);
        assert_eq!(t1.checksum(), t2.checksum());
    }

    #[test]
    fn teacher_attribute_directions_are_orthonormal_when_room_allows() {
        let t = TeacherEmbedder::new(32);
        // scenes sharing no attribute embed orthogonally
        let a = SceneSpec {
            shape: crate::data::SceneShape::Circle,
            color: crate::data::SceneColor::Red,
            size: crate::data::SceneSize::Small,
            position: 0,
        };
        let b = SceneSpec {
            shape: crate::data::SceneShape::Square,
            color: crate::data::SceneColor::Blue,
            size: crate::data::SceneSize::Large,
            position: 8,
        };
        let ea = t.embed_spec(&a);
        let eb = t.embed_spec(&b);
        let cos: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        assert!(cos.abs() < 1e-10, "cos = {}", cos);
        // sharing exactly one attribute gives cosine 1/4
        let c = SceneSpec { shape: a.shape, ..b };
        let ec = t.embed_spec(&c);
        let cos_ac: f64 = ea.iter().zip(&ec).map(|(x, y)| x * y).sum();
        assert!((cos_ac - 0.25).abs() < 1e-10, "cos = {}", cos_ac);
    }

    #[test]
    fn grouped_batches_keep_groups_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let teacher = TeacherEmbedder::new(8);
        let mut pairs = Vec::new();
        for i in 0..30usize {
            let spec = SceneSpec::from_index(i % 10).unwrap();
            let mut crng = ChaCha8Rng::seed_from_u64(i as u64);
            pairs.push(TrainPair {
                caption: synthesize_caption(&spec, Language::A, 0, &mut crng),
                image_embedding: teacher.embed_spec(&spec),
                group: i % 10,
            });
        }
        let batches = grouped_batches(&pairs, 8, &mut rng);
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, 30);
        for batch in &batches {
            let mut groups: Vec<usize> = batch.iter().map(|&i| pairs[i].group).collect();
            let before = groups.len();
            groups.sort_unstable();
            groups.dedup();
            assert_eq!(groups.len(), before, "duplicate group within a batch");
        }
    }

    #[test]
    fn contrastive_loss_identity_pairs_closed_form() {
        // B=2 with identical matched pairs and orthogonal cross pairs at
        // τ=1: each direction contributes ln(1 + e^{-1})
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let y = x.clone();
        let loss = contrastive_loss(&x, &y, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{} vs {}", loss, expect);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn contrastive_loss_all_identical_is_ln_b() {
        let e = vec![0.6, 0.8];
        let x = vec![e.clone(), e.clone(), e.clone(), e.clone()];
        let loss = contrastive_loss(&x, &x, 0.7).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_separated_pairs_sharp_temperature() {
        let x = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let loss = contrastive_loss(&x, &x, 0.01).unwrap();
        assert!(loss < 1e-6, "loss = {}", loss);
    }

    #[test]
    fn contrastive_loss_rejects_bad_temperature_and_tiny_batch() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(contrastive_loss(&x, &x, 0.0).is_err());
        assert!(contrastive_loss(&x, &x, -1.0).is_err());
        let one = vec![vec![1.0, 0.0]];
        assert!(contrastive_loss(&one, &one, 1.0).is_err());
    }

    #[test]
    fn contrastive_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        };
        let x: Vec<Vec<f64>> = (0..5).map(|_| mk(&mut rng)).collect();
        let y: Vec<Vec<f64>> = (0..5).map(|_| mk(&mut rng)).collect();
        let base = contrastive_loss(&x, &y, 0.3).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<Vec<f64>> = perm.iter().map(|&i| y[i].clone()).collect();
        let permuted = contrastive_loss(&xp, &yp, 0.3).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_nonnegative_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let b = rng.random_range(2..7);
            let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.into_iter().map(|x| x / n).collect()
            };
            let x: Vec<Vec<f64>> = (0..b).map(|_| mk(&mut rng)).collect();
            let y: Vec<Vec<f64>> = (0..b).map(|_| mk(&mut rng)).collect();
            let loss = contrastive_loss(&x, &y, 0.5).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn contrastive_gradient_wrt_speech_passes_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = 4;
        let d = 6;
        let image = Tensor::randn(vec![b, d], 1.0, &mut rng);
        let speech = Tensor::randn(vec![b, d], 1.0, &mut rng);
        let err = finite_difference_check(
            |g, sid| {
                // normalize inside the graph so the check covers the full path
                let s = g.l2_normalize_rows(sid)?;
                let img = g.leaf(&image);
                let img = g.l2_normalize_rows(img)?;
                let inv_tau = g.scalar_leaf(10.0f64.ln());
                contrastive_loss_graph(g, s, img, inv_tau)
            },
            &speech,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {}", err);
    }

    #[test]
    fn short_captions_embed_without_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SpeechEncoderParams::new(EncoderConfig::default(), &mut rng);
        let c = CaptionSequence {
            frames: vec![0.3; D_FRAME], // single frame
        };
        let emb = params.embed_caption(&c).unwrap();
        assert_eq!(emb.len(), 32);
    }

    #[test]
    fn epoch_training_reduces_loss_and_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let teacher = TeacherEmbedder::new(16);
            let cfg = EncoderConfig {
                d_emb: 16,
                width: 32,
                heads: 2,
                blocks: 1,
                conv_hidden: 16,
                ..EncoderConfig::default()
            };
            let params = SpeechEncoderParams::new(cfg, &mut rng);
            let opt = OptimizerState::new(AdamWConfig {
                lr: 1e-3,
                weight_decay: 1e-6,
                ..AdamWConfig::default()
            });
            let mut trainer = EncoderTrainer::new(params, opt);
            let mut pairs = Vec::new();
            for i in 0..40usize {
                let spec = SceneSpec::from_index((i * 5) % N_SCENE_COMBOS).unwrap();
                let mut crng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
                pairs.push(TrainPair {
                    caption: synthesize_caption(&spec, Language::A, (i % 2) as u32, &mut crng),
                    image_embedding: teacher.embed_spec(&spec),
                    group: spec.index(),
                });
            }
            let mut losses = Vec::new();
            for epoch in 0..4u64 {
                let mut erng = ChaCha8Rng::seed_from_u64(50 + epoch);
                losses.push(trainer.train_epoch(&pairs, 8, &mut erng).unwrap());
            }
            losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "training must be seed-deterministic");
        assert!(
            a.last().unwrap() < a.first().unwrap(),
            "loss should fall: {:?}",
            a
        );
    }

    #[test]
    fn temperature_stays_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = SpeechEncoderParams::new(EncoderConfig::default(), &mut rng);
        params.logit_scale.values[0] = 10.0; // way above the cap
        params.clamp_temperature();
        assert!(params.inv_tau() <= 100.0 + 1e-9);
    }
}
