//! The parallel-decoding loop: sliding candidate window over the leftmost
//! masked positions, selection by confidence threshold or by the planner's
//! independent Bernoulli draws, temperature-scaled token sampling, and a
//! replayable per-step trace.
//!
//! Termination: an empty Bernoulli selection leaves the state unchanged but
//! still costs a forward pass, so a collapsed planner would loop forever.
//! The step cap closes that hole: the final permitted step deterministically
//! unmasks everything that is left (selection and token probabilities all 1),
//! keeping every rollout's likelihood well defined.

use crate::autodiff::{BoundParams, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::mdlm::{DenoiseModel, MaskedSequence, TabularMdlm, Vocabulary};
use crate::model::{PlannerHead, Transformer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Heuristic,
    Planner,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Window size B: candidates are the leftmost B masked positions.
    pub block_size: usize,
    /// Confidence threshold for heuristic selection, in (0, 1].
    pub confidence_threshold: f64,
    /// Token-sampling temperature; 0 means greedy.
    pub temperature: f64,
    /// Unmask-probability multiplier applied to planner outputs.
    pub alpha: f64,
    /// Hard cap on decode steps; the last step force-unmasks.
    pub k_max: usize,
    pub mode: SelectionMode,
}

impl DecodeConfig {
    pub fn for_completion(completion_len: usize, mode: SelectionMode) -> Self {
        DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.9,
            temperature: 0.1,
            alpha: 1.0,
            k_max: 2 * completion_len.max(1),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be >= 1".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence_threshold {} outside (0, 1]",
                self.confidence_threshold
            )));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one decode step committed to, with everything the exact likelihood
/// needs to be recomputed later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeStepRecord {
    pub candidates: Vec<usize>,
    /// Effective per-candidate unmask probability: min(alpha * p, 1) in
    /// planner mode; 1 for selected and 0 for skipped candidates in the
    /// deterministic heuristic mode (and on forced steps).
    pub unmask_probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Sampling probability of each committed token at the configured
    /// temperature; 1 for greedy picks.
    pub token_probs: Vec<f64>,
    pub forced: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub prompt: Vec<u32>,
    pub completion_len: usize,
    pub steps: Vec<DecodeStepRecord>,
    pub final_tokens: Vec<u32>,
    /// Number of model forward passes: one per step, empty selections
    /// included.
    pub nfe: usize,
}

impl RolloutTrace {
    pub fn completion(&self) -> &[u32] {
        &self.final_tokens[self.prompt.len()..]
    }
}

/// Network outputs one decode step consumes, as graph nodes so the same code
/// path serves sampling (values) and likelihood recomputation (gradients).
pub struct PolicyOut {
    /// Clean-token log-probabilities [L, m-1] at temperature 1.
    pub log_mu: Var,
    /// Planner unmask probabilities [L], when the policy has a planner.
    pub unmask: Option<Var>,
}

/// A denoiser plus an optional unmasking planner, seen as one stochastic
/// decoding policy.
pub trait UnmaskPolicy {
    fn vocab(&self) -> Vocabulary;
    /// Binds every trainable parameter map, denoiser first.
    fn bind(&self, g: &mut Graph) -> Vec<BoundParams>;
    fn forward(
        &self,
        g: &mut Graph,
        binds: &[BoundParams],
        state: &MaskedSequence,
        time_cond: f64,
    ) -> Result<PolicyOut>;
}

/// The trained configuration: transformer denoiser, optionally with the
/// planner head riding on its hidden states.
pub struct JointPolicy<'a> {
    pub model: &'a Transformer,
    pub planner: Option<&'a PlannerHead>,
}

impl UnmaskPolicy for JointPolicy<'_> {
    fn vocab(&self) -> Vocabulary {
        DenoiseModel::vocab(self.model)
    }

    fn bind(&self, g: &mut Graph) -> Vec<BoundParams> {
        let mut binds = vec![DenoiseModel::bind(self.model, g)];
        if let Some(planner) = self.planner {
            binds.push(planner.bind(g));
        }
        binds
    }

    fn forward(
        &self,
        g: &mut Graph,
        binds: &[BoundParams],
        state: &MaskedSequence,
        time_cond: f64,
    ) -> Result<PolicyOut> {
        let out = self.model.forward_bound(g, &binds[0], &state.tokens)?;
        let vocab = self.vocab();
        let clean = g.slice(out.logits, 1, 0, vocab.clean_count())?;
        let log_mu = g.log_softmax(clean)?;
        let unmask = match self.planner {
            Some(planner) => {
                let masked: Vec<bool> = state
                    .tokens
                    .iter()
                    .map(|&t| t == vocab.mask_id())
                    .collect();
                Some(planner.forward_bound(
                    g,
                    &binds[1],
                    out.hidden,
                    out.tok_rows,
                    &masked,
                    time_cond,
                )?)
            }
            None => None,
        };
        Ok(PolicyOut { log_mu, unmask })
    }
}

/// A tabular denoiser with a constant unmask rate standing in for the
/// planner. Small enough for exact enumeration, and the constant rate makes
/// unmask-time distributions analytic.
pub struct TabularPolicy<'a> {
    pub model: &'a TabularMdlm,
    pub unmask_prob: f64,
}

impl UnmaskPolicy for TabularPolicy<'_> {
    fn vocab(&self) -> Vocabulary {
        self.model.vocab()
    }

    fn bind(&self, g: &mut Graph) -> Vec<BoundParams> {
        vec![DenoiseModel::bind(self.model, g)]
    }

    fn forward(
        &self,
        g: &mut Graph,
        binds: &[BoundParams],
        state: &MaskedSequence,
        _time_cond: f64,
    ) -> Result<PolicyOut> {
        if !(self.unmask_prob > 0.0 && self.unmask_prob < 1.0) {
            return Err(Error::invalid(format!(
                "constant unmask probability {} outside (0, 1)",
                self.unmask_prob
            )));
        }
        let log_mu = self.model.log_mu_bound(g, &binds[0], state)?;
        let unmask = g.constant(Tensor::full(vec![state.len()], self.unmask_prob));
        Ok(PolicyOut {
            log_mu,
            unmask: Some(unmask),
        })
    }
}

/// Evaluates a policy without keeping the graph, for sampling-side use.
pub fn policy_values(
    policy: &dyn UnmaskPolicy,
    state: &MaskedSequence,
    time_cond: f64,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut g = Graph::new();
    let binds = policy.bind(&mut g);
    let out = policy.forward(&mut g, &binds, state, time_cond)?;
    let log_mu = g.value(out.log_mu).clone();
    let unmask = out.unmask.map(|u| g.value(u).clone());
    Ok((log_mu, unmask))
}

/// The leftmost min(B, #masked) masked completion positions.
pub fn candidate_positions(
    state: &MaskedSequence,
    block_size: usize,
    vocab: Vocabulary,
) -> Result<Vec<usize>> {
    let mut masked = state.masked_positions(vocab);
    if masked.is_empty() {
        return Err(Error::invalid("no masked positions to decode"));
    }
    masked.truncate(block_size);
    Ok(masked)
}

/// Indices of candidates whose confidence strictly exceeds tau; if none
/// does, the single most confident candidate, so each step makes progress.
pub fn confidence_select(confidences: &[f64], tau: f64) -> Vec<usize> {
    let over: Vec<usize> = (0..confidences.len())
        .filter(|&i| confidences[i] > tau)
        .collect();
    if !over.is_empty() {
        return over;
    }
    let best = confidences
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite confidences"))
        .map(|(i, _)| i)
        .expect("nonempty candidate set");
    vec![best]
}

/// Independent Bernoulli selection over candidates with effective
/// probabilities min(alpha * p, 1). One uniform per candidate, in candidate
/// order. Returns (indices into the slice, effective probabilities).
pub fn planner_select(
    probs: &[f64],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<f64>) {
    let effective: Vec<f64> = probs.iter().map(|&p| (alpha * p).min(1.0)).collect();
    let selected = effective
        .iter()
        .enumerate()
        .filter(|(_, &p)| rng.gen::<f64>() < p)
        .map(|(i, _)| i)
        .collect();
    (selected, effective)
}

/// Max clean-token probability per position at temperature 1.
fn confidences_at(log_mu: &Tensor, positions: &[usize]) -> Vec<f64> {
    let c = log_mu.last_dim();
    positions
        .iter()
        .map(|&i| {
            log_mu.data()[i * c..(i + 1) * c]
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                .exp()
        })
        .collect()
}

/// Normalized temperature-scaled token probabilities for one position's
/// clean-token log-probabilities. Requires temperature > 0.
pub fn token_distribution(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&lp| lp / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|&w| w / total).collect()
}

/// Temperature-scaled sampling from one position's clean-token
/// log-probabilities. Greedy at temperature 0 (probability reported as 1).
/// One uniform per call, inverse-CDF over ascending token ids.
fn sample_token(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> (u32, f64) {
    if temperature == 0.0 {
        return (greedy_token(row), 1.0);
    }
    let probs = token_distribution(row, temperature);
    let mut u = rng.gen::<f64>();
    for (tok, &p) in probs.iter().enumerate() {
        if u < p || tok == probs.len() - 1 {
            return (tok as u32, p);
        }
        u -= p;
    }
    unreachable!("inverse cdf walked past the last token")
}

fn greedy_token(row: &[f64]) -> u32 {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
        .map(|(i, _)| i as u32)
        .expect("nonempty row")
}

/// Fraction of the completion still masked, the planner's time signal.
pub fn time_condition(state: &MaskedSequence, vocab: Vocabulary) -> f64 {
    state.masked_positions(vocab).len() as f64 / state.completion_len().max(1) as f64
}

/// One decode step: a single policy forward (one NFE), selection under the
/// configured mode, token commits, and the step record. Draw order per step:
/// selection uniforms for each candidate in ascending position order, then
/// one token uniform per selected position in ascending order.
pub fn decode_step(
    policy: &dyn UnmaskPolicy,
    state: &MaskedSequence,
    config: &DecodeConfig,
    step_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(MaskedSequence, DecodeStepRecord)> {
    config.validate()?;
    if step_index >= config.k_max {
        return Err(Error::invalid(format!(
            "step index {step_index} at or past the cap {}",
            config.k_max
        )));
    }
    let vocab = policy.vocab();
    let time_cond = time_condition(state, vocab);
    let (log_mu, unmask) = policy_values(policy, state, time_cond)?;
    if !log_mu.all_finite() || unmask.as_ref().is_some_and(|u| !u.all_finite()) {
        return Err(Error::Diverged {
            step: step_index,
            msg: "policy produced non-finite outputs".into(),
        });
    }
    let forced = step_index == config.k_max - 1;

    let (candidates, selected, unmask_probs) = if forced {
        // deterministic cleanup: every remaining mask, probability 1
        let all = state.masked_positions(vocab);
        if all.is_empty() {
            return Err(Error::invalid("no masked positions to decode"));
        }
        let probs = vec![1.0; all.len()];
        (all.clone(), all, probs)
    } else {
        let candidates = candidate_positions(state, config.block_size, vocab)?;
        match config.mode {
            SelectionMode::Heuristic => {
                let conf = confidences_at(&log_mu, &candidates);
                let chosen = confidence_select(&conf, config.confidence_threshold);
                let mut probs = vec![0.0; candidates.len()];
                for &i in &chosen {
                    probs[i] = 1.0;
                }
                let selected = chosen.iter().map(|&i| candidates[i]).collect();
                (candidates, selected, probs)
            }
            SelectionMode::Planner => {
                let unmask = unmask.as_ref().ok_or_else(|| {
                    Error::invalid("planner selection mode needs a policy with a planner")
                })?;
                let cand_probs: Vec<f64> =
                    candidates.iter().map(|&i| unmask.data()[i]).collect();
                let (chosen, effective) = planner_select(&cand_probs, config.alpha, rng);
                let selected = chosen.iter().map(|&i| candidates[i]).collect();
                (candidates, selected, effective)
            }
        }
    };

    let c = vocab.clean_count();
    let mut tokens = Vec::with_capacity(selected.len());
    let mut token_probs = Vec::with_capacity(selected.len());
    let mut next = state.clone();
    for &pos in &selected {
        let row = &log_mu.data()[pos * c..(pos + 1) * c];
        let (tok, prob) = if forced {
            (greedy_token(row), 1.0)
        } else {
            sample_token(row, config.temperature, rng)
        };
        next.tokens[pos] = tok;
        tokens.push(tok);
        token_probs.push(prob);
    }

    Ok((
        next,
        DecodeStepRecord {
            candidates,
            unmask_probs,
            selected,
            tokens,
            token_probs,
            forced,
        },
    ))
}

/// Decodes a full completion from the all-mask state. Terminates in at most
/// k_max steps; NFE equals the number of records.
pub fn rollout(
    policy: &dyn UnmaskPolicy,
    prompt: &[u32],
    completion_len: usize,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutTrace> {
    if completion_len == 0 {
        return Err(Error::invalid("rollout needs a nonempty completion"));
    }
    let vocab = policy.vocab();
    let mut state = MaskedSequence::all_masked(prompt, completion_len, vocab)?;
    let mut steps = Vec::new();
    while !state.is_mask_free(vocab) {
        let (next, record) = decode_step(policy, &state, config, steps.len(), rng)?;
        state = next;
        steps.push(record);
    }
    let nfe = steps.len();
    Ok(RolloutTrace {
        prompt: prompt.to_vec(),
        completion_len,
        steps,
        final_tokens: state.tokens,
        nfe,
    })
}

/// Re-applies a trace's records to the all-mask state, checking the step
/// structure as it goes, and verifies the final sequence matches.
pub fn replay(trace: &RolloutTrace, vocab: Vocabulary) -> Result<MaskedSequence> {
    let mut state = MaskedSequence::all_masked(&trace.prompt, trace.completion_len, vocab)?;
    for (k, record) in trace.steps.iter().enumerate() {
        let bad = |msg: String| Error::InconsistentTrace { step: k, msg };
        if record.selected.len() != record.tokens.len()
            || record.candidates.len() != record.unmask_probs.len()
            || record.tokens.len() != record.token_probs.len()
        {
            return Err(bad("mismatched record field lengths".into()));
        }
        for &pos in &record.selected {
            if !record.candidates.contains(&pos) {
                return Err(bad(format!("selected position {pos} not a candidate")));
            }
        }
        for (&pos, &tok) in record.selected.iter().zip(&record.tokens) {
            if pos < state.prompt_len || pos >= state.len() {
                return Err(bad(format!("position {pos} outside the completion")));
            }
            if state.tokens[pos] != vocab.mask_id() {
                return Err(bad(format!("position {pos} was already unmasked")));
            }
            if !vocab.is_clean(tok) {
                return Err(bad(format!("token {tok} is not a clean token")));
            }
            state.tokens[pos] = tok;
        }
    }
    if state.tokens != trace.final_tokens {
        return Err(Error::InconsistentTrace {
            step: trace.steps.len(),
            msg: "replayed sequence disagrees with the recorded final sequence".into(),
        });
    }
    Ok(state)
}
