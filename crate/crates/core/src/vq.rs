//! VQ autoencoder: images to discrete token grids and back.
//!
//! A strided conv stack maps an image to a latent grid, each latent is
//! snapped to its nearest codebook entry, and a transposed conv stack
//! decodes tokens back to pixels. Gradients cross the quantizer through
//! the straight-through pass.

use crate::conv::{ConvLayer, ConvLayerNodes, ConvShape};
use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId};
use crate::nn::{join, Params};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index reserved for the absorbing [MASK] state is `m` (one past the
/// last codebook entry); clean grids never contain it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains_mask(&self, m: usize) -> bool {
        self.tokens.iter().any(|&t| t >= m)
    }

    /// Every index within the declared alphabet (`m` allowed only when
    /// `allow_mask`).
    pub fn validate(&self, m: usize, allow_mask: bool) -> Result<()> {
        let limit = if allow_mask { m + 1 } else { m };
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= limit) {
            return Err(StaError::invalid(
                "TokenGrid::validate",
                format!("token {} outside alphabet [0,{})", bad, limit),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[m, d_code]` entry matrix.
    pub entries: Tensor,
}

impl Codebook {
    pub fn new(m: usize, d_code: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m < 2 {
            return Err(StaError::invalid("Codebook::new", "entry count must be >= 2"));
        }
        Ok(Codebook {
            entries: Tensor::randn(vec![m, d_code], 0.3, rng),
        })
    }

    pub fn m(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn d_code(&self) -> usize {
        self.entries.shape[1]
    }

    /// Returns an exactly-duplicated entry pair, if any (tolerance per element).
    pub fn duplicate_pair(&self, tol: f64) -> Option<(usize, usize)> {
        let (m, d) = (self.m(), self.d_code());
        for i in 0..m {
            for j in i + 1..m {
                let dup = (0..d).all(|k| {
                    (self.entries.values[i * d + k] - self.entries.values[j * d + k]).abs() <= tol
                });
                if dup {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

/// Nearest-entry assignment by Euclidean distance, ties to the lowest index.
pub fn quantize(latents: &Tensor, codebook: &Codebook) -> Result<(TokenGrid, Tensor)> {
    if codebook.m() == 0 {
        return Err(StaError::invalid("quantize", "empty codebook"));
    }
    if latents.shape.len() != 2 || latents.shape[1] != codebook.d_code() {
        return Err(StaError::shape(
            "quantize",
            format!(
                "latents {:?} vs codebook dim {}",
                latents.shape,
                codebook.d_code()
            ),
        ));
    }
    let n = latents.shape[0];
    let d = codebook.d_code();
    let mut tokens = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = &latents.values[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for e in 0..codebook.m() {
            let entry = &codebook.entries.values[e * d..(e + 1) * d];
            let dist: f64 = row
                .iter()
                .zip(entry)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = e;
            }
        }
        tokens.push(best);
        quantized.extend_from_slice(&codebook.entries.values[best * d..(best + 1) * d]);
    }
    Ok((
        TokenGrid { tokens },
        Tensor::from_vec(vec![n, d], quantized)?,
    ))
}

// ── codec configuration and parameters ──────────────────────────────

#[derive(Debug, Clone)]
pub struct VqConfig {
    pub image_size: usize,
    pub channels: usize,
    pub stride: usize,
    /// Per-layer conv kernel: 2 gives non-overlapping patches, 4 overlaps.
    pub kernel: usize,
    pub d_code: usize,
    pub m: usize,
    pub hidden: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            image_size: 16,
            channels: 3,
            stride: 2,
            kernel: 2,
            d_code: 16,
            m: 64,
            hidden: 32,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(StaError::invalid(
                "VqConfig",
                format!("stride {} must be a power of two >= 2", self.stride),
            ));
        }
        if self.image_size % self.stride != 0 {
            return Err(StaError::invalid(
                "VqConfig",
                format!(
                    "image size {} not divisible by required stride {}",
                    self.image_size, self.stride
                ),
            ));
        }
        if self.kernel != 2 && self.kernel != 4 {
            return Err(StaError::invalid(
                "VqConfig",
                format!("kernel {} must be 2 or 4", self.kernel),
            ));
        }
        if self.m < 2 {
            return Err(StaError::invalid("VqConfig", "codebook size must be >= 2"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

#[derive(Debug, Clone)]
pub struct VqCodecParams {
    pub cfg: VqConfig,
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
    pub codebook: Codebook,
}

impl VqCodecParams {
    pub fn new(cfg: VqConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let n_convs = cfg.stride.trailing_zeros() as usize;
        let pad = cfg.kernel / 2 - 1; // k=2 -> p=0, k=4 -> p=1; both halve
        let mut encoder = Vec::with_capacity(n_convs);
        let mut size = cfg.image_size;
        for i in 0..n_convs {
            let in_c = if i == 0 { cfg.channels } else { cfg.hidden };
            let out_c = if i == n_convs - 1 { cfg.d_code } else { cfg.hidden };
            let shape = ConvShape {
                in_h: size,
                in_w: size,
                in_c,
                kernel: cfg.kernel,
                stride: 2,
                pad,
            };
            encoder.push(ConvLayer::new(shape, out_c, false, rng));
            size /= 2;
        }
        let mut decoder = Vec::with_capacity(n_convs);
        for i in 0..n_convs {
            let in_c = if i == 0 { cfg.d_code } else { cfg.hidden };
            let out_c = if i == n_convs - 1 { cfg.channels } else { cfg.hidden };
            let shape = ConvShape {
                in_h: size,
                in_w: size,
                in_c,
                kernel: cfg.kernel,
                stride: 2,
                pad,
            };
            decoder.push(ConvLayer::new(shape, out_c, true, rng));
            size *= 2;
        }
        let codebook = Codebook::new(cfg.m, cfg.d_code, rng)?;
        Ok(VqCodecParams {
            cfg,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn encode_graph(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<ConvLayerNodes>)> {
        let mut nodes = Vec::new();
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            let ln = layer.bind(g);
            h = layer.apply(g, &ln, h)?;
            if i + 1 < self.encoder.len() {
                h = g.gelu(h);
            }
            nodes.push(ln);
        }
        Ok((h, nodes))
    }

    pub fn decode_graph(&self, g: &mut Graph, z: NodeId) -> Result<(NodeId, Vec<ConvLayerNodes>)> {
        let mut nodes = Vec::new();
        let mut h = z;
        for (i, layer) in self.decoder.iter().enumerate() {
            let ln = layer.bind(g);
            h = layer.apply(g, &ln, h)?;
            if i + 1 < self.decoder.len() {
                h = g.gelu(h);
            }
            nodes.push(ln);
        }
        Ok((h, nodes))
    }

    /// Image (`[H*W, C]` values in [0,1]) to continuous latent grid.
    pub fn encode_latents(&self, image: &[f64]) -> Result<Tensor> {
        let expect = self.cfg.image_size * self.cfg.image_size * self.cfg.channels;
        if image.len() != expect {
            return Err(StaError::shape(
                "encode_image",
                format!(
                    "image has {} values; expected {} ({}x{}x{}, extents must be divisible by stride {})",
                    image.len(),
                    expect,
                    self.cfg.image_size,
                    self.cfg.image_size,
                    self.cfg.channels,
                    self.cfg.stride
                ),
            ));
        }
        let mut g = Graph::new();
        let x = g.leaf_from(
            vec![self.cfg.image_size * self.cfg.image_size, self.cfg.channels],
            image.to_vec(),
        )?;
        let (z, _) = self.encode_graph(&mut g, x)?;
        Tensor::from_vec(g.shape(z).to_vec(), g.values(z).to_vec())
    }

    /// Image to token grid (deterministic for fixed params).
    pub fn encode_image(&self, image: &[f64]) -> Result<TokenGrid> {
        let latents = self.encode_latents(image)?;
        let (grid, _) = quantize(&latents, &self.codebook)?;
        Ok(grid)
    }

    /// Token grid to image values clamped to [0,1]. Rejects [MASK] tokens.
    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Vec<f64>> {
        if grid.len() != self.cfg.n_tokens() {
            return Err(StaError::shape(
                "decode_tokens",
                format!("grid has {} tokens, codec expects {}", grid.len(), self.cfg.n_tokens()),
            ));
        }
        if grid.contains_mask(self.cfg.m) {
            return Err(StaError::invalid(
                "decode_tokens",
                "grid contains the [MASK] index; sampling must fully resolve tokens first",
            ));
        }
        let d = self.cfg.d_code;
        let mut z = Vec::with_capacity(grid.len() * d);
        for &t in &grid.tokens {
            z.extend_from_slice(&self.codebook.entries.values[t * d..(t + 1) * d]);
        }
        let mut g = Graph::new();
        let zn = g.leaf_from(vec![grid.len(), d], z)?;
        let (img, _) = self.decode_graph(&mut g, zn)?;
        Ok(g.values(img).iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

impl Params for VqCodecParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("enc{}", i)), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("dec{}", i)), f);
        }
        f(join(prefix, "codebook"), &self.codebook.entries);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("enc{}", i)), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("dec{}", i)), f);
        }
        f(join(prefix, "codebook"), &mut self.codebook.entries);
    }
}

// ── training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct VqLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone)]
pub struct VqTrainConfig {
    pub commitment_weight: f64,
    pub dead_code_steps: u32,
    pub freeze_codebook: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            commitment_weight: 0.25,
            dead_code_steps: 100,
            freeze_codebook: false,
        }
    }
}

pub struct VqTrainer {
    pub params: VqCodecParams,
    pub opt: OptimizerState,
    pub train_cfg: VqTrainConfig,
    /// Consecutive steps each codebook entry has gone unused.
    pub unused_steps: Vec<u32>,
}

impl VqTrainer {
    pub fn new(params: VqCodecParams, opt: OptimizerState, train_cfg: VqTrainConfig) -> Self {
        let m = params.cfg.m;
        VqTrainer {
            params,
            opt,
            train_cfg,
            unused_steps: vec![0; m],
        }
    }

    /// One optimizer step on a batch of images. Returns the three loss
    /// terms (batch means). Gradients flow through the quantizer via the
    /// straight-through pass.
    pub fn step(&mut self, batch: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<VqLosses> {
        if batch.is_empty() {
            return Err(StaError::invalid("vq_train_step", "empty batch"));
        }
        let cfg = &self.params.cfg;
        let pixels = cfg.image_size * cfg.image_size;
        let mut g = Graph::new();
        let codebook_node = g.leaf(&self.params.codebook.entries);

        let mut rec_terms = Vec::new();
        let mut code_terms = Vec::new();
        let mut commit_terms = Vec::new();
        let mut enc_nodes_all = Vec::new();
        let mut dec_nodes_all = Vec::new();
        let mut used = vec![false; cfg.m];
        let mut batch_latents: Vec<Vec<f64>> = Vec::new();

        for image in batch {
            let x = g.leaf_from(vec![pixels, cfg.channels], image.clone())?;
            let (z_e, enc_nodes) = self.params.encode_graph(&mut g, x)?;
            let ze_vals = g.values(z_e).to_vec();
            let latents = Tensor::from_vec(g.shape(z_e).to_vec(), ze_vals.clone())?;
            let (grid, z_q) = quantize(&latents, &self.params.codebook)?;
            for &t in &grid.tokens {
                used[t] = true;
            }
            batch_latents.push(ze_vals.clone());

            // straight-through: forward takes z_q, gradient passes to z_e
            let delta: Vec<f64> = z_q
                .values
                .iter()
                .zip(&ze_vals)
                .map(|(q, e)| q - e)
                .collect();
            let delta_node = g.leaf_from(z_q.shape.clone(), delta)?;
            let z_st = g.add(z_e, delta_node)?;
            let (recon, dec_nodes) = self.params.decode_graph(&mut g, z_st)?;
            rec_terms.push(g.mse(recon, x)?);

            let selected = g.gather_rows(codebook_node, &grid.tokens)?;
            let ze_const = g.leaf_from(z_q.shape.clone(), ze_vals.clone())?;
            code_terms.push(g.mse(selected, ze_const)?);

            let zq_const = g.leaf_from(z_q.shape.clone(), z_q.values.clone())?;
            commit_terms.push(g.mse(z_e, zq_const)?);

            enc_nodes_all.push(enc_nodes);
            dec_nodes_all.push(dec_nodes);
        }

        let rec = mean_of(&mut g, &rec_terms)?;
        let code = mean_of(&mut g, &code_terms)?;
        let commit = mean_of(&mut g, &commit_terms)?;
        let losses = VqLosses {
            reconstruction: g.value_scalar(rec),
            codebook: g.value_scalar(code),
            commitment: g.value_scalar(commit),
        };
        if !losses.reconstruction.is_finite()
            || !losses.codebook.is_finite()
            || !losses.commitment.is_finite()
        {
            return Err(StaError::non_finite(
                "vq_train_step",
                format!("{:?}", losses),
            ));
        }

        let commit_scaled = g.scale(commit, self.train_cfg.commitment_weight);
        let partial = g.add(rec, code)?;
        let total = g.add(partial, commit_scaled)?;
        g.backward(total)?;

        // accumulate conv grads over the per-sample bindings
        accumulate_conv_grads(&mut self.params.encoder, &g, &enc_nodes_all);
        accumulate_conv_grads(&mut self.params.decoder, &g, &dec_nodes_all);
        self.params.codebook.entries.grad = Some(g.grad(codebook_node).to_vec());

        let freeze = self.train_cfg.freeze_codebook;
        let mut named: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, l) in self.params.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("enc{}", i), &mut |n, t| named.push((n, t)));
        }
        for (i, l) in self.params.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("dec{}", i), &mut |n, t| named.push((n, t)));
        }
        if !freeze {
            named.push(("codebook".to_string(), &mut self.params.codebook.entries));
        }
        let mut refs: Vec<(&str, &mut Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        self.opt.step(&mut refs)?;

        if !freeze {
            self.reinit_dead_codes(&used, &batch_latents, rng);
        }
        Ok(losses)
    }

    /// Entries unused for `dead_code_steps` consecutive steps are re-seeded
    /// to a random encoder output from the current batch.
    fn reinit_dead_codes(&mut self, used: &[bool], batch_latents: &[Vec<f64>], rng: &mut ChaCha8Rng) {
        let d = self.params.cfg.d_code;
        for e in 0..self.params.cfg.m {
            if used[e] {
                self.unused_steps[e] = 0;
                continue;
            }
            self.unused_steps[e] += 1;
            if self.unused_steps[e] >= self.train_cfg.dead_code_steps {
                let sample = &batch_latents[rng.random_range(0..batch_latents.len())];
                let n_rows = sample.len() / d;
                let row = rng.random_range(0..n_rows);
                for k in 0..d {
                    // small jitter keeps re-seeded entries distinct
                    let jitter = 1e-4 * crate::tensor::gaussian(rng);
                    self.params.codebook.entries.values[e * d + k] = sample[row * d + k] + jitter;
                }
                self.unused_steps[e] = 0;
            }
        }
    }
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(terms.len());
    for &t in terms {
        rows.push(g.reshape(t, vec![1, 1])?);
    }
    let stacked = g.concat_rows(&rows)?;
    Ok(g.mean(stacked))
}

fn accumulate_conv_grads(layers: &mut [ConvLayer], g: &Graph, bindings: &[Vec<ConvLayerNodes>]) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let mut wg = vec![0.0; layer.weight.numel()];
        let mut bg = vec![0.0; layer.bias.numel()];
        for sample in bindings {
            for (dst, src) in wg.iter_mut().zip(g.grad(sample[i].w)) {
                *dst += src;
            }
            for (dst, src) in bg.iter_mut().zip(g.grad(sample[i].b)) {
                *dst += src;
            }
        }
        layer.weight.grad = Some(wg);
        layer.bias.grad = Some(bg);
    }
}
