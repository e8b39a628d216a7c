//! Mask-and-replace categorical diffusion over token grids.
//!
//! Each token has M+1 states; state M is an absorbing [MASK]. At step t a
//! non-mask token keeps its value with probability α_t + β_t, moves to any
//! other non-mask state with β_t each, and masks with γ_t, so
//! α_t + M·β_t + γ_t = 1. Cumulative products admit the same closed form,
//! which is what the forward marginal, posterior, loss, and sampler use.

use crate::error::{Result, StaError};
use crate::graph::{Graph, NodeId};
use crate::vq::TokenGrid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── schedule ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum ScheduleSpec {
    /// Cumulative mask probability γ̄ and replace mass M·β̄ both rise
    /// linearly to the given endpoints at t = T.
    LinearCumulative {
        gamma_bar_end: f64,
        beta_bar_m_end: f64,
    },
    /// Explicit per-step keep/mask probabilities; β_t is derived.
    PerStep { alpha: Vec<f64>, gamma: Vec<f64> },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::LinearCumulative {
            gamma_bar_end: 0.99,
            beta_bar_m_end: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSchedule {
    pub t_steps: usize,
    pub m: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub gamma_bar: Vec<f64>,
}

/// Build a schedule for `t_steps` steps over an M-entry codebook.
pub fn build_schedule(t_steps: usize, m: usize, spec: &ScheduleSpec) -> Result<TransitionSchedule> {
    if t_steps < 1 {
        return Err(StaError::invalid("build_schedule", "T must be >= 1"));
    }
    if m < 1 {
        return Err(StaError::invalid("build_schedule", "M must be >= 1"));
    }
    let (alpha, gamma) = match spec {
        ScheduleSpec::LinearCumulative {
            gamma_bar_end,
            beta_bar_m_end,
        } => {
            if !(0.0..=1.0).contains(gamma_bar_end)
                || !(0.0..=1.0).contains(beta_bar_m_end)
                || gamma_bar_end + beta_bar_m_end > 1.0
            {
                return Err(StaError::invalid(
                    "build_schedule",
                    format!(
                        "cumulative endpoints γ̄={} M·β̄={} invalid",
                        gamma_bar_end, beta_bar_m_end
                    ),
                ));
            }
            let mut alpha = Vec::with_capacity(t_steps);
            let mut gamma = Vec::with_capacity(t_steps);
            let mut prev_abar = 1.0f64;
            let mut prev_keep = 1.0f64; // Π (1-γ_s)
            for t in 1..=t_steps {
                let frac = t as f64 / t_steps as f64;
                let gbar = gamma_bar_end * frac;
                let bbar_m = beta_bar_m_end * frac;
                let abar = 1.0 - gbar - bbar_m;
                let a = if prev_abar > 0.0 { abar / prev_abar } else { 0.0 };
                let keep = 1.0 - gbar;
                let gnow = 1.0 - keep / prev_keep;
                alpha.push(a);
                gamma.push(gnow);
                prev_abar = abar;
                prev_keep = keep;
            }
            (alpha, gamma)
        }
        ScheduleSpec::PerStep { alpha, gamma } => {
            if alpha.len() != t_steps || gamma.len() != t_steps {
                return Err(StaError::invalid(
                    "build_schedule",
                    format!(
                        "per-step spec lengths {}/{} do not match T={}",
                        alpha.len(),
                        gamma.len(),
                        t_steps
                    ),
                ));
            }
            (alpha.clone(), gamma.clone())
        }
    };

    let mut beta = Vec::with_capacity(t_steps);
    let mut gamma_adj = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let (a, gnow) = (alpha[t], gamma[t]);
        if !(0.0..=1.0).contains(&a) {
            return Err(StaError::invalid(
                "build_schedule",
                format!("alpha_{} = {} outside [0,1]", t + 1, a),
            ));
        }
        if !(0.0..=1.0).contains(&gnow) {
            return Err(StaError::invalid(
                "build_schedule",
                format!("gamma_{} = {} outside [0,1]", t + 1, gnow),
            ));
        }
        let b = (1.0 - a - gnow) / m as f64;
        if b < 0.0 {
            return Err(StaError::invalid(
                "build_schedule",
                format!("beta_{} = {} negative (alpha+gamma > 1)", t + 1, b),
            ));
        }
        beta.push(b);
        // re-derive gamma so alpha + M*beta + gamma == 1 holds bit-exactly
        gamma_adj.push(1.0 - (a + m as f64 * b));
    }

    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut beta_bar = Vec::with_capacity(t_steps);
    let mut gamma_bar = Vec::with_capacity(t_steps);
    let mut abar = 1.0f64;
    let mut keep = 1.0f64;
    for t in 0..t_steps {
        abar *= alpha[t];
        keep *= 1.0 - gamma_adj[t];
        let gbar = 1.0 - keep;
        alpha_bar.push(abar);
        gamma_bar.push(gbar);
        beta_bar.push((1.0 - abar - gbar) / m as f64);
    }

    let schedule = TransitionSchedule {
        t_steps,
        m,
        alpha,
        beta,
        gamma: gamma_adj,
        alpha_bar,
        beta_bar,
        gamma_bar,
    };
    schedule.check_invariants()?;
    Ok(schedule)
}

impl TransitionSchedule {
    pub fn mask_index(&self) -> usize {
        self.m
    }

    pub fn check_invariants(&self) -> Result<()> {
        for t in 0..self.t_steps {
            let s = self.alpha[t] + self.m as f64 * self.beta[t] + self.gamma[t];
            if s != 1.0 {
                return Err(StaError::invalid(
                    "TransitionSchedule",
                    format!("alpha+M*beta+gamma = {} != 1 at t={}", s, t + 1),
                ));
            }
            for (name, v) in [
                ("alpha", self.alpha[t]),
                ("beta", self.beta[t]),
                ("gamma", self.gamma[t]),
                ("alpha_bar", self.alpha_bar[t]),
                ("beta_bar", self.beta_bar[t]),
                ("gamma_bar", self.gamma_bar[t]),
            ] {
                if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return Err(StaError::invalid(
                        "TransitionSchedule",
                        format!("{}_{} = {} outside [0,1]", name, t + 1, v),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Transition row Q_t(i -> ·) over the M+1 states.
    pub fn transition_row(&self, state: usize, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if state > self.m {
            return Err(StaError::invalid(
                "transition_row",
                format!("state {} outside alphabet [0,{}]", state, self.m),
            ));
        }
        Ok((0..=self.m).map(|to| self.transition_prob(state, to, t)).collect())
    }

    /// Single entry Q_t(from -> to), O(1).
    #[inline]
    pub fn transition_prob(&self, from: usize, to: usize, t: usize) -> f64 {
        let idx = t - 1;
        if from == self.m {
            return if to == self.m { 1.0 } else { 0.0 }; // [MASK] absorbs
        }
        if to == self.m {
            self.gamma[idx]
        } else if to == from {
            self.alpha[idx] + self.beta[idx]
        } else {
            self.beta[idx]
        }
    }

    /// Cumulative row Q̄_t(k0 -> ·) from the closed form; t = 0 is the
    /// identity.
    pub fn cumulative_row(&self, k0: usize, t: usize) -> Result<Vec<f64>> {
        if t > self.t_steps {
            return Err(StaError::invalid(
                "cumulative_row",
                format!("t = {} outside [0,{}]", t, self.t_steps),
            ));
        }
        if k0 >= self.m {
            return Err(StaError::invalid(
                "cumulative_row",
                format!("k0 = {} must be a non-mask state < {}", k0, self.m),
            ));
        }
        let mut row = vec![0.0; self.m + 1];
        if t == 0 {
            row[k0] = 1.0;
            return Ok(row);
        }
        let idx = t - 1;
        for (j, r) in row.iter_mut().enumerate().take(self.m) {
            *r = if j == k0 {
                self.alpha_bar[idx] + self.beta_bar[idx]
            } else {
                self.beta_bar[idx]
            };
        }
        row[self.m] = self.gamma_bar[idx];
        Ok(row)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(StaError::invalid(
                "schedule",
                format!("t = {} outside [1,{}]", t, self.t_steps),
            ));
        }
        Ok(())
    }
}

// ── categorical fields ──────────────────────────────────────────────

/// Per-position probability rows over the M+1 token states.
#[derive(Debug, Clone)]
pub struct CategoricalField {
    pub states: usize,
    pub rows: Vec<f64>,
}

impl CategoricalField {
    pub fn positions(&self) -> usize {
        self.rows.len() / self.states
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.states..(i + 1) * self.states]
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.positions() {
            let row = self.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(StaError::invalid(
                    "CategoricalField",
                    format!("negative probability at position {}", i),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(StaError::invalid(
                    "CategoricalField",
                    format!("row {} sums to {}", i, s),
                ));
            }
        }
        Ok(())
    }
}

/// Per-token distribution after `t` forward steps from a mask-free grid.
pub fn forward_marginal(
    k0: &TokenGrid,
    t: usize,
    schedule: &TransitionSchedule,
) -> Result<CategoricalField> {
    schedule.check_t(t)?;
    k0.validate(schedule.m, false)?;
    let states = schedule.m + 1;
    let mut rows = Vec::with_capacity(k0.len() * states);
    for &c in &k0.tokens {
        rows.extend_from_slice(&schedule.cumulative_row(c, t)?);
    }
    Ok(CategoricalField { states, rows })
}

/// One categorical draw per position from the forward marginal.
pub fn forward_sample(
    k0: &TokenGrid,
    t: usize,
    schedule: &TransitionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TokenGrid> {
    let field = forward_marginal(k0, t, schedule)?;
    let mut tokens = Vec::with_capacity(k0.len());
    for i in 0..field.positions() {
        tokens.push(sample_categorical(field.row(i), rng));
    }
    Ok(TokenGrid { tokens })
}

pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Posterior row q(k_{t-1} = · | k_t, k0) ∝ Q_t(· -> k_t) · Q̄_{t-1}(k0 -> ·).
fn posterior_row(
    k_t: usize,
    k0: usize,
    t: usize,
    schedule: &TransitionSchedule,
) -> Result<Vec<f64>> {
    let states = schedule.m + 1;
    let prior = schedule.cumulative_row(k0, t - 1)?;
    let mut row = vec![0.0; states];
    let mut norm = 0.0;
    for j in 0..states {
        row[j] = schedule.transition_prob(j, k_t, t) * prior[j];
        norm += row[j];
    }
    if norm <= 0.0 {
        return Err(StaError::invalid(
            "posterior",
            format!("zero normalizer for (k_t={}, k0={}, t={})", k_t, k0, t),
        ));
    }
    for r in row.iter_mut() {
        *r /= norm;
    }
    Ok(row)
}

/// Posterior over states at t-1 for every position.
pub fn posterior(
    k_t: &TokenGrid,
    k0: &TokenGrid,
    t: usize,
    schedule: &TransitionSchedule,
) -> Result<CategoricalField> {
    schedule.check_t(t)?;
    if k_t.len() != k0.len() {
        return Err(StaError::shape(
            "posterior",
            format!("k_t has {} positions, k0 has {}", k_t.len(), k0.len()),
        ));
    }
    k_t.validate(schedule.m, true)?;
    k0.validate(schedule.m, false)?;
    let states = schedule.m + 1;
    let mut rows = Vec::with_capacity(k_t.len() * states);
    for i in 0..k_t.len() {
        let row = posterior_row(k_t.tokens[i], k0.tokens[i], t, schedule).map_err(|e| {
            StaError::invalid("posterior", format!("position {}: {}", i, e))
        })?;
        rows.extend_from_slice(&row);
    }
    Ok(CategoricalField { states, rows })
}

// ── training loss ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct DiffusionLossConfig {
    /// Weight of the auxiliary clean-token cross-entropy term.
    pub lambda: f64,
}

impl Default for DiffusionLossConfig {
    fn default() -> Self {
        DiffusionLossConfig { lambda: 0.001 }
    }
}

/// Variational loss for the x0-parameterized reverse model, on the graph.
///
/// `logits` is an `[N, M]` node of clean-token logits. For t >= 2 the loss
/// is KL[q(k_{t-1}|k_t,k0) || p(k_{t-1}|k_t)] summed over positions, where
/// p is built by marginalizing the posterior over the predicted k0; the
/// t = 1 term is the direct negative log-likelihood of k0. The auxiliary
/// term λ·cross_entropy(logits, k0) is always added.
pub fn diffusion_loss_graph(
    g: &mut Graph,
    logits: NodeId,
    k0: &TokenGrid,
    k_t: &TokenGrid,
    t: usize,
    schedule: &TransitionSchedule,
    cfg: &DiffusionLossConfig,
) -> Result<NodeId> {
    if cfg.lambda < 0.0 {
        return Err(StaError::invalid("diffusion_loss", "lambda must be >= 0"));
    }
    schedule.check_t(t)?;
    let m = schedule.m;
    let n = k0.len();
    let shape = g.shape(logits);
    if shape != [n, m] {
        return Err(StaError::shape(
            "diffusion_loss",
            format!("logits {:?}, expected [{}, {}]", shape, n, m),
        ));
    }
    k0.validate(m, false)?;
    k_t.validate(m, true)?;

    let aux = g.cross_entropy(logits, &k0.tokens)?;

    let vlb = if t == 1 {
        // -Σ log p(k0 | k_1) = N · cross_entropy
        g.scale(aux, n as f64)
    } else {
        let probs = g.softmax(logits, 1)?;
        let states = m + 1;
        let mut terms: Vec<NodeId> = Vec::new();
        let mut const_part = 0.0;
        // reverse-composition matrices depend only on the observed token;
        // positions sharing one (mostly [MASK]) share the leaf
        let mut rnode_cache: std::collections::BTreeMap<usize, NodeId> =
            std::collections::BTreeMap::new();
        for i in 0..n {
            let token = k_t.tokens[i];
            let rnode = match rnode_cache.get(&token) {
                Some(&id) => id,
                None => {
                    // row c is q(· | k_t[i], k0=c)
                    let mut rmat = Vec::with_capacity(m * states);
                    for c in 0..m {
                        rmat.extend_from_slice(&posterior_row(token, c, t, schedule)?);
                    }
                    let id = g.leaf_from(vec![m, states], rmat)?;
                    rnode_cache.insert(token, id);
                    id
                }
            };
            let prow = g.slice_rows(probs, i, 1)?;
            let p_rev = g.matmul(prow, rnode)?; // [1, states]

            let q = posterior_row(k_t.tokens[i], k0.tokens[i], t, schedule)?;
            let support: Vec<usize> = (0..states).filter(|&j| q[j] > 0.0).collect();
            let weights: Vec<f64> = support.iter().map(|&j| q[j]).collect();
            const_part += weights.iter().map(|w| w * w.ln()).sum::<f64>();

            let gathered = g.gather_flat(p_rev, &support, vec![1, support.len()])?;
            let logp = g.log(gathered);
            let wnode = g.leaf_from(vec![1, support.len()], weights)?;
            let weighted = g.mul(logp, wnode)?;
            terms.push(g.sum(weighted));
        }
        let mut acc = terms[0];
        for &term in &terms[1..] {
            acc = g.add(acc, term)?;
        }
        let neg = g.scale(acc, -1.0);
        g.add_scalar(neg, const_part)
    };

    let aux_scaled = g.scale(aux, cfg.lambda);
    let total = g.add(vlb, aux_scaled)?;
    let value = g.value_scalar(total);
    if !value.is_finite() {
        return Err(StaError::non_finite(
            "diffusion_loss",
            format!("loss = {} at t = {}", value, t),
        ));
    }
    Ok(total)
}

/// Convenience scalar evaluation of the training loss from plain logits.
pub fn diffusion_training_loss(
    logits: &[f64],
    k0: &TokenGrid,
    k_t: &TokenGrid,
    t: usize,
    schedule: &TransitionSchedule,
    cfg: &DiffusionLossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.leaf_from(vec![k0.len(), schedule.m], logits.to_vec())?;
    let loss = diffusion_loss_graph(&mut g, l, k0, k_t, t, schedule, cfg)?;
    Ok(g.value_scalar(loss))
}

// ── reverse sampling ────────────────────────────────────────────────

/// How the reverse chain is initialized at t = T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerStart {
    AllMask,
    /// Uniformly random non-mask tokens.
    RandomTokens,
}

/// Run the reverse chain: at each step the denoiser's clean-token
/// distribution is composed with the posterior and every position is
/// resampled. Ends mask-free.
pub fn reverse_sample<F>(
    n_positions: usize,
    mut denoise: F,
    schedule: &TransitionSchedule,
    rng: &mut ChaCha8Rng,
    start: SamplerStart,
) -> Result<TokenGrid>
where
    F: FnMut(&TokenGrid, usize) -> Result<Vec<f64>>,
{
    let m = schedule.m;
    let states = m + 1;
    let mut grid = match start {
        SamplerStart::AllMask => TokenGrid {
            tokens: vec![m; n_positions],
        },
        SamplerStart::RandomTokens => TokenGrid {
            tokens: (0..n_positions).map(|_| rng.random_range(0..m)).collect(),
        },
    };

    for t in (1..=schedule.t_steps).rev() {
        let logits = denoise(&grid, t)?;
        if logits.len() != n_positions * m {
            return Err(StaError::shape(
                "reverse_sample",
                format!("denoiser returned {} logits, expected {}", logits.len(), n_positions * m),
            ));
        }
        // posterior rows q(· | token, c) reused across positions that
        // share the observed token
        let mut qcache: std::collections::BTreeMap<usize, Vec<f64>> =
            std::collections::BTreeMap::new();
        let mut next = Vec::with_capacity(n_positions);
        for i in 0..n_positions {
            let row = &logits[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= z;
            }
            let token = grid.tokens[i];
            if !qcache.contains_key(&token) {
                let mut flat = Vec::with_capacity(m * states);
                for c in 0..m {
                    flat.extend_from_slice(&posterior_row(token, c, t, schedule)?);
                }
                qcache.insert(token, flat);
            }
            let q = &qcache[&token];
            // p(k_{t-1} = j) = Σ_c p(k0 = c) q(j | k_t, c)
            let mut rev = vec![0.0; states];
            for (c, &pc) in probs.iter().enumerate() {
                if pc == 0.0 {
                    continue;
                }
                for j in 0..states {
                    rev[j] += pc * q[c * states + j];
                }
            }
            next.push(sample_categorical(&rev, rng));
        }
        grid = TokenGrid { tokens: next };
    }

    if grid.contains_mask(m) {
        return Err(StaError::invalid(
            "reverse_sample",
            "mask remaining at t = 0; schedule/model inconsistency",
        ));
    }
    Ok(grid)
}
