//! Masked-diffusion process math: forward noising, the reverse posterior,
//! discrete NELBO, the simplified Monte-Carlo loss, the any-order
//! autoregressive estimator it is equivalent to, and supervised pretraining
//! of the toy denoiser.
//!
//! Conventions shared by the whole workspace: the mask token is the last id
//! in the vocabulary, the prompt prefix is never noised, and the denoiser's
//! output distribution excludes the mask token (renormalized over clean
//! tokens), so a full unmask always terminates in a mask-free sequence.

use crate::autodiff::{AdamW, BoundParams, Graph, ParamMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, Transformer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs a clean token and a mask token, got size {size}"
            )));
        }
        Ok(Vocabulary { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The mask is always the last token id.
    pub fn mask_id(&self) -> u32 {
        (self.size - 1) as u32
    }

    pub fn clean_count(&self) -> usize {
        self.size - 1
    }

    pub fn is_clean(&self, tok: u32) -> bool {
        (tok as usize) < self.size - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSchedule {
    Linear,
}

impl NoiseSchedule {
    /// Survival probability of a clean token at time t.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("noise time {t} outside [0, 1]")));
        }
        match self {
            NoiseSchedule::Linear => Ok(1.0 - t),
        }
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("noise time {t} outside [0, 1]")));
        }
        match self {
            NoiseSchedule::Linear => Ok(-1.0),
        }
    }
}

/// A token sequence with an unnoised prompt prefix. The completion region
/// may contain mask tokens (a noisy or partially decoded state) or none
/// (clean data).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl MaskedSequence {
    pub fn new(tokens: Vec<u32>, prompt_len: usize, vocab: Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::invalid(format!(
                "prompt_len {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= vocab.size() {
                return Err(Error::invalid(format!(
                    "token {tok} at position {i} outside vocabulary of size {}",
                    vocab.size()
                )));
            }
            if i < prompt_len && tok == vocab.mask_id() {
                return Err(Error::invalid(format!(
                    "mask token inside the prompt at position {i}"
                )));
            }
        }
        Ok(MaskedSequence { tokens, prompt_len })
    }

    /// The fully masked starting state for decoding a completion.
    pub fn all_masked(prompt: &[u32], completion_len: usize, vocab: Vocabulary) -> Result<Self> {
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat(vocab.mask_id()).take(completion_len));
        MaskedSequence::new(tokens, prompt.len(), vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn completion_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn completion(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn masked_positions(&self, vocab: Vocabulary) -> Vec<usize> {
        (self.prompt_len..self.tokens.len())
            .filter(|&i| self.tokens[i] == vocab.mask_id())
            .collect()
    }

    pub fn is_mask_free(&self, vocab: Vocabulary) -> bool {
        self.tokens.iter().all(|&t| t != vocab.mask_id())
    }
}

/// Independently replaces each completion token of clean data with the mask
/// with probability 1 - alpha_t. One uniform draw per completion position,
/// left to right.
pub fn forward_noise(
    x0: &MaskedSequence,
    t: f64,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSequence> {
    let mask_prob = 1.0 - schedule.alpha(t)?;
    if !x0.is_mask_free(vocab) {
        return Err(Error::invalid(
            "forward noising expects clean data without mask tokens",
        ));
    }
    let mut tokens = x0.tokens.clone();
    for tok in tokens.iter_mut().skip(x0.prompt_len) {
        if rng.gen::<f64>() < mask_prob {
            *tok = vocab.mask_id();
        }
    }
    Ok(MaskedSequence {
        tokens,
        prompt_len: x0.prompt_len,
    })
}

/// Continues noising a partially masked state from time s to t >= s. Already
/// masked positions stay masked; surviving tokens are masked with probability
/// 1 - alpha_t / alpha_s, so the marginal at t is exactly 1 - alpha_t.
pub fn forward_noise_between(
    xs: &MaskedSequence,
    s: f64,
    t: f64,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSequence> {
    let alpha_s = schedule.alpha(s)?;
    let alpha_t = schedule.alpha(t)?;
    if s > t {
        return Err(Error::invalid(format!("times out of order: s {s} > t {t}")));
    }
    if alpha_s <= 0.0 {
        return Err(Error::invalid(format!(
            "cannot continue noising from alpha_s = 0 at s = {s}"
        )));
    }
    let mask_prob = 1.0 - alpha_t / alpha_s;
    let mut tokens = xs.tokens.clone();
    for tok in tokens.iter_mut().skip(xs.prompt_len) {
        if *tok != vocab.mask_id() && rng.gen::<f64>() < mask_prob {
            *tok = vocab.mask_id();
        }
    }
    Ok(MaskedSequence {
        tokens,
        prompt_len: xs.prompt_len,
    })
}

/// Reverse-posterior distribution at one position, over {x0 token, mask}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReversePosterior {
    pub p_x0: f64,
    pub p_mask: f64,
}

/// Transition distribution from time t back to s < t at a single position.
/// A non-mask token is carried over unchanged; a masked position reveals the
/// clean token with probability (alpha_s - alpha_t) / (1 - alpha_t).
pub fn reverse_posterior(
    xt_token: u32,
    x0_token: u32,
    s: f64,
    t: f64,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
) -> Result<ReversePosterior> {
    if s >= t {
        return Err(Error::invalid(format!(
            "reverse posterior needs s < t, got s {s}, t {t}"
        )));
    }
    if !vocab.is_clean(x0_token) {
        return Err(Error::invalid("x0 token must be a clean token"));
    }
    if xt_token != x0_token && xt_token != vocab.mask_id() {
        return Err(Error::invalid(
            "noisy token must be the clean token or the mask",
        ));
    }
    if xt_token == x0_token {
        return Ok(ReversePosterior {
            p_x0: 1.0,
            p_mask: 0.0,
        });
    }
    let alpha_s = schedule.alpha(s)?;
    let alpha_t = schedule.alpha(t)?;
    let denom = 1.0 - alpha_t;
    Ok(ReversePosterior {
        p_x0: (alpha_s - alpha_t) / denom,
        p_mask: (1.0 - alpha_s) / denom,
    })
}

/// A denoiser: given a (partially) masked state, produces log-probabilities
/// over clean tokens at every position, shape [L, m - 1]. The mask token is
/// excluded from the distribution by construction.
pub trait DenoiseModel {
    fn vocab(&self) -> Vocabulary;
    fn params(&self) -> &ParamMap;
    fn params_mut(&mut self) -> &mut ParamMap;
    fn log_mu_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state: &MaskedSequence,
    ) -> Result<Var>;

    fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, self.params())
    }
}

/// Evaluate a model's clean-token log-probabilities without keeping a graph.
pub fn log_mu_values(model: &dyn DenoiseModel, state: &MaskedSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let v = model.log_mu_bound(&mut g, &bound, state)?;
    Ok(g.value(v).clone())
}

impl DenoiseModel for Transformer {
    fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.config.vocab_size).expect("validated at construction")
    }

    fn params(&self) -> &ParamMap {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    fn log_mu_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state: &MaskedSequence,
    ) -> Result<Var> {
        if self.config.attention != AttentionKind::Bidirectional {
            return Err(Error::invalid("a causal transformer cannot denoise"));
        }
        let out = self.forward_bound(g, bound, &state.tokens)?;
        let clean = g.slice(out.logits, 1, 0, self.config.vocab_size - 1)?;
        g.log_softmax(clean)
    }
}

/// A denoiser indexed directly by the full noisy state: one logit row per
/// state, holding per-position logits over clean tokens. Exact enough to pair
/// with brute-force oracles, and differentiable through the same graph ops as
/// the transformer.
#[derive(Debug, Clone)]
pub struct TabularMdlm {
    pub seq_len: usize,
    vocab: Vocabulary,
    pub params: ParamMap,
}

impl TabularMdlm {
    const MAX_STATES: usize = 1 << 20;

    pub fn state_count(seq_len: usize, vocab: Vocabulary) -> Result<usize> {
        let mut n: usize = 1;
        for _ in 0..seq_len {
            n = n
                .checked_mul(vocab.size())
                .filter(|&n| n <= Self::MAX_STATES)
                .ok_or(Error::StateSpaceOverflow {
                    estimate: f64::INFINITY,
                    budget: Self::MAX_STATES as f64,
                })?;
        }
        Ok(n)
    }

    /// Uniform over clean tokens at every position of every state.
    pub fn uniform(seq_len: usize, vocab: Vocabulary) -> Result<Self> {
        let states = Self::state_count(seq_len, vocab)?;
        let mut params = ParamMap::new();
        params.insert(
            "table",
            Tensor::zeros(vec![states, seq_len * vocab.clean_count()]),
        );
        Ok(TabularMdlm {
            seq_len,
            vocab,
            params,
        })
    }

    /// Assigns probability ~1 to the tokens of `target` at every state.
    pub fn saturated_on(target: &[u32], vocab: Vocabulary) -> Result<Self> {
        let mut model = Self::uniform(target.len(), vocab)?;
        let states = Self::state_count(target.len(), vocab)?;
        let width = target.len() * vocab.clean_count();
        let table = model.params.get_mut("table");
        for state in 0..states {
            for (i, &tok) in target.iter().enumerate() {
                if !vocab.is_clean(tok) {
                    return Err(Error::invalid("saturation target must be clean tokens"));
                }
                table.data_mut()[state * width + i * vocab.clean_count() + tok as usize] = 60.0;
            }
        }
        Ok(model)
    }

    /// The Bayes-optimal denoiser of a given joint distribution over clean
    /// sequences: at each noisy state, log mu is the exact conditional
    /// marginal given the revealed positions. Sequences outside the joint's
    /// support get a -1e9 logit, which underflows to probability zero.
    pub fn from_joint(joint: &[(Vec<u32>, f64)], vocab: Vocabulary) -> Result<Self> {
        let seq_len = joint
            .first()
            .ok_or_else(|| Error::invalid("empty joint distribution"))?
            .0
            .len();
        let total: f64 = joint.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "joint distribution sums to {total}, expected 1"
            )));
        }
        for (seq, p) in joint {
            if seq.len() != seq_len || seq.iter().any(|&t| !vocab.is_clean(t)) || *p < 0.0 {
                return Err(Error::invalid("malformed joint distribution entry"));
            }
        }
        let mut model = Self::uniform(seq_len, vocab)?;
        let states = Self::state_count(seq_len, vocab)?;
        let m = vocab.size();
        let c = vocab.clean_count();
        let width = seq_len * c;
        let table = model.params.get_mut("table");
        for state in 0..states {
            let toks = decode_state(state, seq_len, m);
            // conditional marginals over clean tokens given revealed positions
            let mut marg = vec![0.0f64; width];
            let mut mass = 0.0;
            for (seq, p) in joint {
                let consistent = toks
                    .iter()
                    .zip(seq)
                    .all(|(&xt, &x0)| xt == vocab.mask_id() || xt == x0);
                if consistent {
                    mass += p;
                    for (i, &x0) in seq.iter().enumerate() {
                        marg[i * c + x0 as usize] += p;
                    }
                }
            }
            for (slot, v) in marg.iter().enumerate() {
                let logit = if mass > 0.0 && *v > 0.0 {
                    (v / mass).ln()
                } else {
                    -1e9
                };
                table.data_mut()[state * width + slot] = logit;
            }
        }
        Ok(model)
    }

    pub fn state_index(&self, tokens: &[u32]) -> Result<usize> {
        if tokens.len() != self.seq_len {
            return Err(Error::invalid(format!(
                "state length {} does not match table length {}",
                tokens.len(),
                self.seq_len
            )));
        }
        let mut idx = 0usize;
        for &t in tokens.iter().rev() {
            idx = idx * self.vocab.size() + t as usize;
        }
        Ok(idx)
    }
}

fn decode_state(mut idx: usize, seq_len: usize, m: usize) -> Vec<u32> {
    let mut toks = Vec::with_capacity(seq_len);
    for _ in 0..seq_len {
        toks.push((idx % m) as u32);
        idx /= m;
    }
    toks
}

impl DenoiseModel for TabularMdlm {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn params(&self) -> &ParamMap {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    fn log_mu_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state: &MaskedSequence,
    ) -> Result<Var> {
        let idx = self.state_index(&state.tokens)?;
        let row = g.gather(bound.var("table"), &[idx])?;
        let logits = g.reshape(row, vec![self.seq_len, self.vocab.clean_count()])?;
        g.log_softmax(logits)
    }
}

/// One sampled corruption of a clean sequence: the time and the noisy state.
/// Splitting the draw from the loss keeps the loss a deterministic function
/// of parameters, which finite-difference checks rely on.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: f64,
    pub state: MaskedSequence,
}

/// Samples t uniformly (resampling the measure-zero t = 0, which has a
/// singular weight) and corrupts x0.
pub fn draw_noise(
    x0: &MaskedSequence,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseDraw> {
    let mut t = rng.gen::<f64>();
    while t == 0.0 {
        t = rng.gen::<f64>();
    }
    let state = forward_noise(x0, t, schedule, vocab, rng)?;
    Ok(NoiseDraw { t, state })
}

/// The simplified diffusion loss for one noise draw:
/// (-alpha'_t / (1 - alpha_t)) * sum over masked positions of -log mu(x0_i);
/// weight 1/t under the linear schedule. Nonnegative, zero iff the model is
/// certain of every masked token.
pub fn simplified_loss_at(
    model: &dyn DenoiseModel,
    g: &mut Graph,
    bound: &BoundParams,
    x0: &MaskedSequence,
    draw: &NoiseDraw,
    schedule: NoiseSchedule,
) -> Result<Var> {
    let vocab = model.vocab();
    let masked = draw.state.masked_positions(vocab);
    if masked.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let weight = -schedule.alpha_prime(draw.t)? / (1.0 - schedule.alpha(draw.t)?);
    let log_mu = model.log_mu_bound(g, bound, &draw.state)?;
    let c = vocab.clean_count();
    let flat = g.reshape(log_mu, vec![x0.len() * c])?;
    let slots: Vec<usize> = masked
        .iter()
        .map(|&i| i * c + x0.tokens[i] as usize)
        .collect();
    let picked = g.gather(flat, &slots)?;
    let total = g.sum(picked)?;
    g.scale(total, -weight)
}

/// Draws one corruption and returns the differentiable loss with it.
pub fn simplified_mc_loss(
    model: &dyn DenoiseModel,
    g: &mut Graph,
    bound: &BoundParams,
    x0: &MaskedSequence,
    schedule: NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, NoiseDraw)> {
    let draw = draw_noise(x0, schedule, model.vocab(), rng)?;
    let loss = simplified_loss_at(model, g, bound, x0, &draw, schedule)?;
    Ok((loss, draw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NelboMode {
    MonteCarlo,
    Exhaustive,
}

#[derive(Debug, Clone, Copy)]
pub struct NelboBreakdown {
    pub recons: f64,
    pub diffusion: f64,
    pub prior: f64,
}

impl NelboBreakdown {
    pub fn total(&self) -> f64 {
        self.recons + self.diffusion + self.prior
    }
}

/// Sum over masked positions of -log mu(x0_i) for one mask pattern.
fn pattern_nll(
    model: &dyn DenoiseModel,
    x0: &MaskedSequence,
    pattern: &[bool],
) -> Result<f64> {
    let vocab = model.vocab();
    let mut tokens = x0.tokens.clone();
    for (k, &masked) in pattern.iter().enumerate() {
        if masked {
            tokens[x0.prompt_len + k] = vocab.mask_id();
        }
    }
    let state = MaskedSequence {
        tokens,
        prompt_len: x0.prompt_len,
    };
    let log_mu = log_mu_values(model, &state)?;
    let c = vocab.clean_count();
    let mut nll = 0.0;
    for (k, &masked) in pattern.iter().enumerate() {
        if masked {
            let i = x0.prompt_len + k;
            nll -= log_mu.data()[i * c + x0.tokens[i] as usize];
        }
    }
    Ok(nll)
}

/// E over the forward corruption at mask probability rho of the masked-token
/// NLL, either exactly (all 2^n patterns) or from one sample.
fn expected_masked_nll(
    model: &dyn DenoiseModel,
    x0: &MaskedSequence,
    rho: f64,
    mode: NelboMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = x0.completion_len();
    match mode {
        NelboMode::Exhaustive => {
            let mut acc = 0.0;
            for bits in 0..(1usize << n) {
                let pattern: Vec<bool> = (0..n).map(|k| bits >> k & 1 == 1).collect();
                let masked = pattern.iter().filter(|&&b| b).count();
                let weight = rho.powi(masked as i32) * (1.0 - rho).powi((n - masked) as i32);
                if weight > 0.0 {
                    acc += weight * pattern_nll(model, x0, &pattern)?;
                }
            }
            Ok(acc)
        }
        NelboMode::MonteCarlo => {
            let pattern: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < rho).collect();
            pattern_nll(model, x0, &pattern)
        }
    }
}

/// Discrete-time negative ELBO with T uniform steps: reconstruction at
/// t = 1/T, the diffusion sum over the remaining steps, and the prior term,
/// which is identically zero because the corruption at t = 1 is the all-mask
/// point mass the reverse process starts from.
pub fn nelbo_discrete(
    model: &dyn DenoiseModel,
    x0: &MaskedSequence,
    t_steps: usize,
    mode: NelboMode,
    schedule: NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<NelboBreakdown> {
    if t_steps == 0 {
        return Err(Error::invalid("nelbo needs at least one step"));
    }
    let vocab = model.vocab();
    if mode == NelboMode::Exhaustive && (x0.completion_len() > 6 || vocab.size() > 8) {
        return Err(Error::invalid(format!(
            "exhaustive nelbo limited to completion length 6 and vocab 8, got {} and {}",
            x0.completion_len(),
            vocab.size()
        )));
    }
    if !x0.is_mask_free(vocab) {
        return Err(Error::invalid("nelbo expects clean data"));
    }
    let time = |i: usize| i as f64 / t_steps as f64;

    let alpha_end = schedule.alpha(1.0)?;
    if alpha_end != 0.0 {
        return Err(Error::Domain {
            op: "nelbo_discrete",
            msg: format!("schedule does not absorb at t = 1 (alpha_1 = {alpha_end})"),
        });
    }
    let prior = 0.0;

    let t1 = time(1);
    let recons = expected_masked_nll(model, x0, 1.0 - schedule.alpha(t1)?, mode, rng)?;

    let mut diffusion = 0.0;
    for i in 2..=t_steps {
        let (s, t) = (time(i - 1), time(i));
        let (alpha_s, alpha_t) = (schedule.alpha(s)?, schedule.alpha(t)?);
        let coeff = (alpha_s - alpha_t) / (1.0 - alpha_t);
        diffusion += coeff * expected_masked_nll(model, x0, 1.0 - alpha_t, mode, rng)?;
    }

    Ok(NelboBreakdown {
        recons,
        diffusion,
        prior,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AoArmMode {
    Exhaustive,
    Sampled(usize),
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for tail in permutations(n - 1) {
        for slot in 0..n {
            let mut perm = tail.clone();
            perm.insert(slot, n - 1);
            out.push(perm);
        }
    }
    out
}

/// Expected negative log-likelihood of x0 under any-order autoregressive
/// decomposition: reveal completion positions one at a time in a (uniformly
/// random or exhaustively averaged) order, scoring each token with the
/// denoiser applied to the partially masked state.
pub fn aoarm_expected_nll(
    model: &dyn DenoiseModel,
    x0: &MaskedSequence,
    mode: AoArmMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let vocab = model.vocab();
    if !x0.is_mask_free(vocab) {
        return Err(Error::invalid("aoarm expects clean data"));
    }
    let n = x0.completion_len();
    let orders: Vec<Vec<usize>> = match mode {
        AoArmMode::Exhaustive => {
            if n > 6 {
                return Err(Error::invalid(format!(
                    "exhaustive order average limited to completion length 6, got {n}"
                )));
            }
            permutations(n)
        }
        AoArmMode::Sampled(count) => {
            if count == 0 {
                return Err(Error::invalid("sampled order average needs count >= 1"));
            }
            (0..count)
                .map(|_| {
                    let mut perm: Vec<usize> = (0..n).collect();
                    for k in (1..n).rev() {
                        perm.swap(k, rng.gen_range(0..=k));
                    }
                    perm
                })
                .collect()
        }
    };

    // states repeat heavily across orders; cache per-position target log-probs
    let mut cache: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let c = vocab.clean_count();
    let mut total = 0.0;
    for order in &orders {
        let mut state = x0.tokens.clone();
        for tok in state.iter_mut().skip(x0.prompt_len) {
            *tok = vocab.mask_id();
        }
        for &k in order {
            let i = x0.prompt_len + k;
            if !cache.contains_key(&state) {
                let seq = MaskedSequence {
                    tokens: state.clone(),
                    prompt_len: x0.prompt_len,
                };
                let log_mu = log_mu_values(model, &seq)?;
                let targets: Vec<f64> = (0..x0.len())
                    .map(|p| log_mu.data()[p * c + x0.tokens[p] as usize])
                    .collect();
                cache.insert(state.clone(), targets);
            }
            total -= cache[&state][i];
            state[i] = x0.tokens[i];
        }
    }
    Ok(total / orders.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Minimizes the simplified diffusion loss over a corpus with AdamW. Batches
/// are drawn with replacement from the corpus; fully deterministic given the
/// rng state.
pub fn pretrain_mdlm(
    model: &mut dyn DenoiseModel,
    corpus: &[MaskedSequence],
    cfg: &PretrainConfig,
    schedule: NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainMetrics> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty pretraining corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut opt = AdamW::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut batch_loss = g.scalar(0.0);
        for _ in 0..cfg.batch_size {
            let x0 = &corpus[rng.gen_range(0..corpus.len())];
            let (loss, _) = simplified_mc_loss(model, &mut g, &bound, x0, schedule, rng)?;
            batch_loss = g.add(batch_loss, loss)?;
        }
        let mean_loss = g.scale(batch_loss, 1.0 / cfg.batch_size as f64)?;
        let value = g.value(mean_loss).value();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("pretraining loss became {value}"),
            });
        }
        let grads = g.backward(mean_loss)?;
        let store = crate::autodiff::grads_for(&bound, &grads);
        opt.step_single(model.params_mut(), &store)?;
        losses.push(value);
    }
    Ok(PretrainMetrics { losses })
}

/// Corrupts each corpus sequence at noise level t, greedily denoises every
/// masked position in one shot, and reports token accuracy over the masked
/// positions.
pub fn greedy_reconstruction_accuracy(
    model: &dyn DenoiseModel,
    corpus: &[MaskedSequence],
    t: f64,
    schedule: NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let vocab = model.vocab();
    let c = vocab.clean_count();
    let mut correct = 0usize;
    let mut seen = 0usize;
    for x0 in corpus {
        let state = forward_noise(x0, t, schedule, vocab, rng)?;
        let masked = state.masked_positions(vocab);
        if masked.is_empty() {
            continue;
        }
        let log_mu = log_mu_values(model, &state)?;
        for &i in &masked {
            let row = &log_mu.data()[i * c..(i + 1) * c];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                .map(|(k, _)| k as u32)
                .expect("nonempty vocabulary");
            seen += 1;
            if argmax == x0.tokens[i] {
                correct += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::invalid(
            "no positions were masked; increase t or the corpus",
        ));
    }
    Ok(correct as f64 / seen as f64)
}
