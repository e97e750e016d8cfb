//! Exact rollout likelihoods. Every decode step factors into a selection
//! probability (the planner's Bernoulli product over the candidate window)
//! and a token probability (temperature-scaled softmax per committed
//! position); a rollout's log-likelihood is the sum over its steps. The
//! recomputation here is differentiable, which is what policy-gradient
//! training consumes, and a brute-force enumerator provides the normalization
//! and point-lookup oracles that pin the arithmetic down.

use crate::autodiff::{BoundParams, Graph, Tensor, Var, PROB_EPS};
use crate::decoding::{
    candidate_positions, token_distribution, DecodeConfig, DecodeStepRecord, RolloutTrace,
    SelectionMode, UnmaskPolicy,
};
use crate::error::{Error, Result};
use crate::mdlm::{MaskedSequence, Vocabulary};
use std::collections::{BTreeMap, HashMap};

/// One step's log-likelihood factors as graph nodes. `clamped` reports that
/// some probability underflowed the 1e-12 floor before its log was taken;
/// on-policy recomputation should never set it.
pub struct StepLikelihood {
    pub log_select: Var,
    pub log_token: Var,
    pub total: Var,
    pub clamped: bool,
}

/// Validates that a record is structurally consistent with the state it
/// claims to extend, then returns the state after applying it.
fn check_and_apply(
    prev: &MaskedSequence,
    record: &DecodeStepRecord,
    config: &DecodeConfig,
    step_index: usize,
    vocab: Vocabulary,
) -> Result<MaskedSequence> {
    let bad = |msg: String| Error::InconsistentTrace {
        step: step_index,
        msg,
    };
    if prev.is_mask_free(vocab) {
        return Err(bad("step applied to a mask-free sequence".into()));
    }
    if record.forced != (step_index + 1 == config.k_max) {
        return Err(bad(format!(
            "forced flag {} disagrees with step {} of cap {}",
            record.forced, step_index, config.k_max
        )));
    }
    let expected = if record.forced {
        prev.masked_positions(vocab)
    } else {
        candidate_positions(prev, config.block_size, vocab)?
    };
    if record.candidates != expected {
        return Err(bad(format!(
            "candidates {:?} disagree with recomputed {:?}",
            record.candidates, expected
        )));
    }
    if record.unmask_probs.len() != record.candidates.len()
        || record.tokens.len() != record.selected.len()
        || record.token_probs.len() != record.selected.len()
    {
        return Err(bad("mismatched record field lengths".into()));
    }
    if record.forced && record.selected != record.candidates {
        return Err(bad("forced step must select every remaining mask".into()));
    }
    let mut next = prev.clone();
    for (&pos, &tok) in record.selected.iter().zip(&record.tokens) {
        if !record.candidates.contains(&pos) {
            return Err(bad(format!("selected position {pos} not a candidate")));
        }
        if next.tokens[pos] != vocab.mask_id() {
            return Err(bad(format!("position {pos} was already unmasked")));
        }
        if !vocab.is_clean(tok) {
            return Err(bad(format!("token {tok} is not a clean token")));
        }
        next.tokens[pos] = tok;
    }
    Ok(next)
}

/// Differentiable log-likelihood of one recorded step under the current
/// parameters, recomputing the policy forward pass on the pre-step state.
pub fn step_log_likelihood(
    policy: &dyn UnmaskPolicy,
    g: &mut Graph,
    binds: &[BoundParams],
    prev: &MaskedSequence,
    record: &DecodeStepRecord,
    config: &DecodeConfig,
    step_index: usize,
) -> Result<StepLikelihood> {
    let vocab = policy.vocab();
    check_and_apply(prev, record, config, step_index, vocab)?;

    if record.forced {
        // the cap branch is a deterministic policy: probability 1 throughout
        let zero = g.scalar(0.0);
        return Ok(StepLikelihood {
            log_select: zero,
            log_token: zero,
            total: zero,
            clamped: false,
        });
    }

    let time_cond = crate::decoding::time_condition(prev, vocab);
    let out = policy.forward(g, binds, prev, time_cond)?;
    let mut clamped = false;
    let ln_eps = PROB_EPS.ln();

    let log_select = match config.mode {
        // threshold selection is deterministic: probability 1
        SelectionMode::Heuristic => g.scalar(0.0),
        SelectionMode::Planner => {
            let unmask = out
                .unmask
                .ok_or_else(|| Error::invalid("planner-mode likelihood needs a planner"))?;
            let cand = g.gather(unmask, &record.candidates)?;
            let scaled = g.scale(cand, config.alpha)?;
            // min(x, 1) = -max(-x, -1)
            let neg = g.scale(scaled, -1.0)?;
            let neg_one = g.constant(Tensor::full(vec![record.candidates.len()], -1.0));
            let clipped = g.emax(neg, neg_one)?;
            let effective = g.scale(clipped, -1.0)?;

            let selected_slots: Vec<usize> = record
                .candidates
                .iter()
                .enumerate()
                .filter(|&(_, &pos)| record.selected.contains(&pos))
                .map(|(slot, _)| slot)
                .collect();
            let skipped_slots: Vec<usize> = (0..record.candidates.len())
                .filter(|slot| !selected_slots.contains(slot))
                .collect();

            let mut parts: Vec<Var> = Vec::new();
            if !selected_slots.is_empty() {
                let p = g.gather(effective, &selected_slots)?;
                clamped |= g.value(p).data().iter().any(|&x| x < PROB_EPS);
                let eps = g.constant(Tensor::full(vec![selected_slots.len()], PROB_EPS));
                let safe = g.emax(p, eps)?;
                let lp = g.ln(safe)?;
                parts.push(g.sum(lp)?);
            }
            if !skipped_slots.is_empty() {
                let p = g.gather(effective, &skipped_slots)?;
                let ones = g.constant(Tensor::ones(vec![skipped_slots.len()]));
                let q = g.sub(ones, p)?;
                clamped |= g.value(q).data().iter().any(|&x| x < PROB_EPS);
                let eps = g.constant(Tensor::full(vec![skipped_slots.len()], PROB_EPS));
                let safe = g.emax(q, eps)?;
                let lq = g.ln(safe)?;
                parts.push(g.sum(lq)?);
            }
            match parts.len() {
                0 => g.scalar(0.0),
                1 => parts[0],
                _ => g.add(parts[0], parts[1])?,
            }
        }
    };

    let log_token = if record.selected.is_empty() {
        g.scalar(0.0)
    } else if config.temperature == 0.0 {
        // greedy commits have probability 1 when they match the argmax;
        // a mismatch means the parameters changed under the trace
        let values = g.value(out.log_mu).clone();
        let c = vocab.clean_count();
        let drifted = record
            .selected
            .iter()
            .zip(&record.tokens)
            .any(|(&pos, &tok)| {
                let row = &values.data()[pos * c..(pos + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                    .map(|(i, _)| i as u32)
                    .expect("nonempty row");
                best != tok
            });
        if drifted {
            clamped = true;
            g.scalar(ln_eps)
        } else {
            g.scalar(0.0)
        }
    } else {
        let rows = g.gather(out.log_mu, &record.selected)?;
        let sharpened = g.scale(rows, 1.0 / config.temperature)?;
        let log_probs = g.log_softmax(sharpened)?;
        let c = vocab.clean_count();
        let flat = g.reshape(log_probs, vec![record.selected.len() * c])?;
        let slots: Vec<usize> = record
            .tokens
            .iter()
            .enumerate()
            .map(|(j, &tok)| j * c + tok as usize)
            .collect();
        let picked = g.gather(flat, &slots)?;
        clamped |= g.value(picked).data().iter().any(|&lp| lp < ln_eps);
        let floor = g.constant(Tensor::full(vec![slots.len()], ln_eps));
        let safe = g.emax(picked, floor)?;
        g.sum(safe)?
    };

    let total = g.add(log_select, log_token)?;
    Ok(StepLikelihood {
        log_select,
        log_token,
        total,
        clamped,
    })
}

pub struct RolloutLikelihood {
    pub total: Var,
    pub steps: Vec<StepLikelihood>,
    pub clamped: bool,
}

/// Differentiable log-likelihood of a whole trace: the sum of its step
/// likelihoods, teacher-forced through the recorded intermediate states.
pub fn rollout_log_likelihood(
    policy: &dyn UnmaskPolicy,
    g: &mut Graph,
    binds: &[BoundParams],
    trace: &RolloutTrace,
    config: &DecodeConfig,
) -> Result<RolloutLikelihood> {
    let vocab = policy.vocab();
    let mut state = MaskedSequence::all_masked(&trace.prompt, trace.completion_len, vocab)?;
    let mut steps = Vec::with_capacity(trace.steps.len());
    let mut total = g.scalar(0.0);
    let mut clamped = false;
    for (k, record) in trace.steps.iter().enumerate() {
        let step = step_log_likelihood(policy, g, binds, &state, record, config, k)?;
        total = g.add(total, step.total)?;
        clamped |= step.clamped;
        state = check_and_apply(&state, record, config, k, vocab)?;
        steps.push(step);
    }
    if state.tokens != trace.final_tokens {
        return Err(Error::InconsistentTrace {
            step: trace.steps.len(),
            msg: "trace final sequence disagrees with its steps".into(),
        });
    }
    Ok(RolloutLikelihood {
        total,
        steps,
        clamped,
    })
}

/// The masked state each recorded step saw, validated while walking. Useful
/// when step likelihoods must be rebuilt one at a time on separate graphs.
pub fn trace_states(
    trace: &RolloutTrace,
    config: &DecodeConfig,
    vocab: Vocabulary,
) -> Result<Vec<MaskedSequence>> {
    let mut state = MaskedSequence::all_masked(&trace.prompt, trace.completion_len, vocab)?;
    let mut out = Vec::with_capacity(trace.steps.len());
    for (k, record) in trace.steps.iter().enumerate() {
        let next = check_and_apply(&state, record, config, k, vocab)?;
        out.push(state);
        state = next;
    }
    if state.tokens != trace.final_tokens {
        return Err(Error::InconsistentTrace {
            step: trace.steps.len(),
            msg: "trace final sequence disagrees with its steps".into(),
        });
    }
    Ok(out)
}

/// Log-likelihood assembled purely from the probabilities a rollout recorded
/// while sampling; the generation-side value that recomputation must match.
pub fn trace_generation_log_likelihood(trace: &RolloutTrace) -> f64 {
    let mut total = 0.0;
    for record in &trace.steps {
        if record.forced {
            continue;
        }
        for (slot, &pos) in record.candidates.iter().enumerate() {
            let p = record.unmask_probs[slot];
            total += if record.selected.contains(&pos) {
                p.max(PROB_EPS).ln()
            } else {
                (1.0 - p).max(PROB_EPS).ln()
            };
        }
        for &p in &record.token_probs {
            total += p.max(PROB_EPS).ln();
        }
    }
    total
}

/// A trajectory as its per-step decisions: (selected positions, tokens).
pub type TrajectoryKey = Vec<(Vec<usize>, Vec<u32>)>;

#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub probability: f64,
    pub final_tokens: Vec<u32>,
    pub nfe: usize,
}

#[derive(Debug, Default)]
pub struct Enumeration {
    pub trajectories: BTreeMap<TrajectoryKey, TrajectoryOutcome>,
}

impl Enumeration {
    pub fn total_mass(&self) -> f64 {
        self.trajectories.values().map(|t| t.probability).sum()
    }

    pub fn lookup(&self, trace: &RolloutTrace) -> Option<f64> {
        let key: TrajectoryKey = trace
            .steps
            .iter()
            .map(|r| (r.selected.clone(), r.tokens.clone()))
            .collect();
        self.trajectories.get(&key).map(|t| t.probability)
    }

    /// Probability mass per number of steps taken.
    pub fn nfe_distribution(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for t in self.trajectories.values() {
            *out.entry(t.nfe).or_insert(0.0) += t.probability;
        }
        out
    }
}

/// Worst-case trajectory count for an instance, by dynamic programming over
/// (masked count, step index). Token choices multiply by clean-vocab size
/// per committed position; the forced final step contributes one branch.
pub fn estimate_trajectory_count(
    completion_len: usize,
    block_size: usize,
    clean_tokens: usize,
    k_max: usize,
) -> f64 {
    fn binom(n: usize, k: usize) -> f64 {
        let mut acc = 1.0;
        for j in 0..k {
            acc = acc * (n - j) as f64 / (j + 1) as f64;
        }
        acc
    }
    fn count(
        masked: usize,
        step: usize,
        block: usize,
        clean: usize,
        k_max: usize,
        memo: &mut HashMap<(usize, usize), f64>,
    ) -> f64 {
        if masked == 0 {
            return 1.0;
        }
        if step + 1 == k_max {
            return 1.0;
        }
        if let Some(&v) = memo.get(&(masked, step)) {
            return v;
        }
        let w = masked.min(block);
        let mut acc = 0.0;
        for j in 0..=w {
            acc += binom(w, j)
                * (clean as f64).powi(j as i32)
                * count(masked - j, step + 1, block, clean, k_max, memo);
        }
        memo.insert((masked, step), acc);
        acc
    }
    let mut memo = HashMap::new();
    count(completion_len, 0, block_size, clean_tokens, k_max, &mut memo)
}

/// Enumerates every trajectory the decoding process can produce for a prompt,
/// with its exact probability. Rejected up front if the worst-case count
/// exceeds `budget`.
pub fn enumerate_all_rollouts(
    policy: &dyn UnmaskPolicy,
    prompt: &[u32],
    completion_len: usize,
    config: &DecodeConfig,
    budget: f64,
) -> Result<Enumeration> {
    config.validate()?;
    if config.mode != SelectionMode::Planner {
        return Err(Error::invalid(
            "enumeration covers the stochastic planner policy; the heuristic is deterministic",
        ));
    }
    let vocab = policy.vocab();
    let estimate = estimate_trajectory_count(
        completion_len,
        config.block_size,
        vocab.clean_count(),
        config.k_max,
    );
    if estimate > budget {
        return Err(Error::StateSpaceOverflow { estimate, budget });
    }

    let mut cache: HashMap<Vec<u32>, (Tensor, Tensor)> = HashMap::new();
    let mut out = Enumeration::default();
    let start = MaskedSequence::all_masked(prompt, completion_len, vocab)?;
    let mut key: TrajectoryKey = Vec::new();
    walk(
        policy, &start, config, vocab, 0, 1.0, &mut key, &mut cache, &mut out,
    )?;
    return Ok(out);

    #[allow(clippy::too_many_arguments)]
    fn walk(
        policy: &dyn UnmaskPolicy,
        state: &MaskedSequence,
        config: &DecodeConfig,
        vocab: Vocabulary,
        step: usize,
        prob: f64,
        key: &mut TrajectoryKey,
        cache: &mut HashMap<Vec<u32>, (Tensor, Tensor)>,
        out: &mut Enumeration,
    ) -> Result<()> {
        if state.is_mask_free(vocab) {
            out.trajectories.insert(
                key.clone(),
                TrajectoryOutcome {
                    probability: prob,
                    final_tokens: state.tokens.clone(),
                    nfe: step,
                },
            );
            return Ok(());
        }
        if !cache.contains_key(&state.tokens) {
            let time_cond = crate::decoding::time_condition(state, vocab);
            let (log_mu, unmask) = crate::decoding::policy_values(policy, state, time_cond)?;
            let unmask =
                unmask.ok_or_else(|| Error::invalid("enumeration needs planner probabilities"))?;
            cache.insert(state.tokens.clone(), (log_mu, unmask));
        }
        let (log_mu, unmask) = cache[&state.tokens].clone();
        let c = vocab.clean_count();

        if step + 1 == config.k_max {
            let masked = state.masked_positions(vocab);
            let mut next = state.clone();
            let mut tokens = Vec::with_capacity(masked.len());
            for &pos in &masked {
                let row = &log_mu.data()[pos * c..(pos + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                    .map(|(i, _)| i as u32)
                    .expect("nonempty row");
                next.tokens[pos] = best;
                tokens.push(best);
            }
            key.push((masked, tokens));
            walk(policy, &next, config, vocab, step + 1, prob, key, cache, out)?;
            key.pop();
            return Ok(());
        }

        let candidates = candidate_positions(state, config.block_size, vocab)?;
        let effective: Vec<f64> = candidates
            .iter()
            .map(|&i| (config.alpha * unmask.data()[i]).min(1.0))
            .collect();
        // per-candidate token distributions, computed once per state
        let dists: Vec<Vec<f64>> = candidates
            .iter()
            .map(|&pos| {
                let row = &log_mu.data()[pos * c..(pos + 1) * c];
                if config.temperature == 0.0 {
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                        .map(|(i, _)| i)
                        .expect("nonempty row");
                    let mut d = vec![0.0; c];
                    d[best] = 1.0;
                    d
                } else {
                    token_distribution(row, config.temperature)
                }
            })
            .collect();

        for subset in 0..(1usize << candidates.len()) {
            let mut select_prob = 1.0;
            let mut chosen: Vec<usize> = Vec::new();
            let mut chosen_slots: Vec<usize> = Vec::new();
            for (slot, &pos) in candidates.iter().enumerate() {
                if subset >> slot & 1 == 1 {
                    select_prob *= effective[slot];
                    chosen.push(pos);
                    chosen_slots.push(slot);
                } else {
                    select_prob *= 1.0 - effective[slot];
                }
            }
            if select_prob == 0.0 {
                continue;
            }
            let mut assignment = vec![0u32; chosen.len()];
            assign_tokens(
                policy,
                state,
                config,
                vocab,
                step,
                prob * select_prob,
                &chosen,
                &chosen_slots,
                &dists,
                0,
                &mut assignment,
                key,
                cache,
                out,
            )?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn assign_tokens(
        policy: &dyn UnmaskPolicy,
        state: &MaskedSequence,
        config: &DecodeConfig,
        vocab: Vocabulary,
        step: usize,
        prob: f64,
        chosen: &[usize],
        slots: &[usize],
        dists: &[Vec<f64>],
        depth: usize,
        assignment: &mut Vec<u32>,
        key: &mut TrajectoryKey,
        cache: &mut HashMap<Vec<u32>, (Tensor, Tensor)>,
        out: &mut Enumeration,
    ) -> Result<()> {
        if depth == chosen.len() {
            let mut next = state.clone();
            for (&pos, &tok) in chosen.iter().zip(assignment.iter()) {
                next.tokens[pos] = tok;
            }
            key.push((chosen.to_vec(), assignment.clone()));
            walk(policy, &next, config, vocab, step + 1, prob, key, cache, out)?;
            key.pop();
            return Ok(());
        }
        let dist = &dists[slots[depth]];
        for (tok, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            assignment[depth] = tok as u32;
            assign_tokens(
                policy,
                state,
                config,
                vocab,
                step,
                prob * p,
                chosen,
                slots,
                dists,
                depth + 1,
                assignment,
                key,
                cache,
                out,
            )?;
        }
        Ok(())
    }
}

/// Sums trajectory probabilities by final sequence.
pub fn marginal_outcome_distribution(enumeration: &Enumeration) -> BTreeMap<Vec<u32>, f64> {
    let mut out = BTreeMap::new();
    for t in enumeration.trajectories.values() {
        *out.entry(t.final_tokens.clone()).or_insert(0.0) += t.probability;
    }
    out
}
