//! Verifiable toy tasks and the reward stack for policy training: exact
//! answer checking, answer-marker format scoring, a step-count penalty, and
//! a teacher log-likelihood distillation term, combined as a weighted sum.
//!
//! Tasks share one small vocabulary and one answer convention: the payload
//! sits between a dedicated open/close marker pair, followed by padding out
//! to a fixed completion length. Verification is exact token match against
//! an answer recomputed from the prompt, so every reward is deterministic.

use crate::decoding::RolloutTrace;
use crate::error::{Error, Result};
use crate::mdlm::Vocabulary;
use crate::model::{teacher_logprobs, Transformer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token ids shared by all toy tasks. Digits keep their face value; the
/// mask id is the final slot of the vocabulary, after every clean token.
pub mod tok {
    pub const PLUS: u32 = 10;
    pub const MODULO: u32 = 11;
    pub const EQUALS: u32 = 12;
    pub const ANS_OPEN: u32 = 13;
    pub const ANS_CLOSE: u32 = 14;
    pub const PAD: u32 = 15;
    pub const SORT: u32 = 16;
    pub const COPY: u32 = 17;
}

pub const TASK_VOCAB_SIZE: usize = 19;

/// Ring size for modular addition; small enough that both operands and the
/// answer fit in two zero-padded digits.
pub const MODULUS: u32 = 47;

/// Fixed completion length for every task, so rollout bookkeeping and the
/// policy-gradient normalization see one generation length.
pub const COMPLETION_LEN: usize = 8;

/// Digits per operand in the sort and copy tasks.
const SPAN: usize = 4;

pub fn task_vocab() -> Vocabulary {
    Vocabulary::new(TASK_VOCAB_SIZE).expect("static vocabulary size")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ModularAddition,
    SequenceSort,
    PatternCopy,
}

/// One verifiable task: prompt sampling, the gold answer, and exact
/// verification. The verifier is total; malformed input verifies false.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec { kind }
    }

    pub fn prompt_len(&self) -> usize {
        match self.kind {
            // a1 a0 + b1 b0 mod 4 7 =
            TaskKind::ModularAddition => 9,
            // op d d d d =
            TaskKind::SequenceSort | TaskKind::PatternCopy => SPAN + 2,
        }
    }

    pub fn completion_len(&self) -> usize {
        COMPLETION_LEN
    }

    pub fn answer_markers(&self) -> (u32, u32) {
        (tok::ANS_OPEN, tok::ANS_CLOSE)
    }

    pub fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        match self.kind {
            TaskKind::ModularAddition => {
                let a = rng.gen_range(0..MODULUS);
                let b = rng.gen_range(0..MODULUS);
                vec![
                    a / 10,
                    a % 10,
                    tok::PLUS,
                    b / 10,
                    b % 10,
                    tok::MODULO,
                    MODULUS / 10,
                    MODULUS % 10,
                    tok::EQUALS,
                ]
            }
            TaskKind::SequenceSort | TaskKind::PatternCopy => {
                let op = if self.kind == TaskKind::SequenceSort {
                    tok::SORT
                } else {
                    tok::COPY
                };
                let mut p = vec![op];
                p.extend((0..SPAN).map(|_| rng.gen_range(0..10u32)));
                p.push(tok::EQUALS);
                p
            }
        }
    }

    /// The answer payload recomputed from the prompt, digits only.
    pub fn gold_answer(&self, prompt: &[u32]) -> Result<Vec<u32>> {
        if prompt.len() != self.prompt_len() {
            return Err(Error::invalid(format!(
                "prompt length {} does not fit {:?}",
                prompt.len(),
                self.kind
            )));
        }
        let digit = |t: u32| -> Result<u32> {
            if t < 10 {
                Ok(t)
            } else {
                Err(Error::invalid(format!("expected a digit token, got {t}")))
            }
        };
        match self.kind {
            TaskKind::ModularAddition => {
                let a = 10 * digit(prompt[0])? + digit(prompt[1])?;
                let b = 10 * digit(prompt[3])? + digit(prompt[4])?;
                let c = (a + b) % MODULUS;
                Ok(vec![c / 10, c % 10])
            }
            TaskKind::SequenceSort => {
                let mut d: Vec<u32> = prompt[1..1 + SPAN]
                    .iter()
                    .map(|&t| digit(t))
                    .collect::<Result<_>>()?;
                d.sort_unstable();
                Ok(d)
            }
            TaskKind::PatternCopy => prompt[1..1 + SPAN].iter().map(|&t| digit(t)).collect(),
        }
    }

    /// Reference completion: marked answer, padded to the fixed length.
    pub fn gold_completion(&self, prompt: &[u32]) -> Result<Vec<u32>> {
        let payload = self.gold_answer(prompt)?;
        let mut c = vec![tok::ANS_OPEN];
        c.extend_from_slice(&payload);
        c.push(tok::ANS_CLOSE);
        if c.len() > COMPLETION_LEN {
            return Err(Error::invalid("answer does not fit the completion"));
        }
        c.resize(COMPLETION_LEN, tok::PAD);
        Ok(c)
    }

    /// Payload between the first open marker and the first close marker
    /// after it. May be empty; `None` when either marker is missing.
    pub fn extract_answer<'a>(&self, completion: &'a [u32]) -> Option<&'a [u32]> {
        let (open, close) = self.answer_markers();
        let start = completion.iter().position(|&t| t == open)?;
        let rest = &completion[start + 1..];
        let end = rest.iter().position(|&t| t == close)?;
        Some(&rest[..end])
    }

    pub fn verify(&self, prompt: &[u32], completion: &[u32]) -> bool {
        match (self.extract_answer(completion), self.gold_answer(prompt)) {
            (Some(got), Ok(gold)) => got == gold,
            _ => false,
        }
    }
}

/// 2.0 for an exactly verified answer, 0.0 otherwise. Content outside the
/// marked answer span never matters.
pub fn task_reward(task: &TaskSpec, prompt: &[u32], completion: &[u32]) -> f64 {
    if task.verify(prompt, completion) {
        2.0
    } else {
        0.0
    }
}

/// 0.5 when the completion carries a properly marked, nonempty answer
/// payload, 0.0 otherwise. An empty payload between markers scores 0.
pub fn format_reward(task: &TaskSpec, completion: &[u32]) -> f64 {
    match task.extract_answer(completion) {
        Some(payload) if !payload.is_empty() => 0.5,
        _ => 0.0,
    }
}

const STEP_PENALTY_SCALE: f64 = 50.0;

pub fn efficiency_reward(nfe: usize) -> f64 {
    -(nfe as f64) / STEP_PENALTY_SCALE
}

/// Distillation term from precomputed per-token teacher log-probabilities:
/// mean teacher log-likelihood minus `beta` times the student sequence
/// log-probability, normalized by the same count.
///
/// Padding does not count toward the mean; an all-pad completion falls back
/// to scoring every token so the value stays finite (and low, because the
/// teacher expects an answer marker first).
pub fn distill_from_logprobs(
    teacher_lp: &[f64],
    completion: &[u32],
    student_logprob: f64,
    beta: f64,
) -> Result<f64> {
    if completion.is_empty() {
        return Err(Error::invalid("distillation needs a nonempty completion"));
    }
    if teacher_lp.len() != completion.len() {
        return Err(Error::invalid(format!(
            "{} teacher log-probs for {} tokens",
            teacher_lp.len(),
            completion.len()
        )));
    }
    let scored: Vec<f64> = teacher_lp
        .iter()
        .zip(completion)
        .filter(|&(_, &t)| t != tok::PAD)
        .map(|(&lp, _)| lp)
        .collect();
    let scored = if scored.is_empty() {
        teacher_lp.to_vec()
    } else {
        scored
    };
    let n = scored.len() as f64;
    Ok((scored.iter().sum::<f64>() - beta * student_logprob) / n)
}

pub fn distill_reward(
    teacher: &Transformer,
    prompt: &[u32],
    completion: &[u32],
    student_logprob: f64,
    beta: f64,
) -> Result<f64> {
    let lp = teacher_logprobs(teacher, prompt, completion)?;
    distill_from_logprobs(&lp, completion, student_logprob, beta)
}

/// Component weights for the total reward, plus the entropy coefficient of
/// the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub task: f64,
    pub format: f64,
    pub step: f64,
    pub distill: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            task: 1.0,
            format: 1.0,
            step: 1.0,
            distill: 1.0,
            beta: 0.0,
        }
    }
}

impl RewardWeights {
    pub fn standard() -> Self {
        RewardWeights::default()
    }

    /// Correctness-heavy preset with a mild step penalty.
    pub fn coding() -> Self {
        RewardWeights {
            task: 3.0,
            step: 0.1,
            ..RewardWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.task, self.format, self.step, self.distill, self.beta];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("reward weights must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub r_format: f64,
    pub r_step: f64,
    pub r_distill: f64,
    pub r_total: f64,
    pub nfe: usize,
}

pub fn total_reward(
    r_task: f64,
    r_format: f64,
    r_step: f64,
    r_distill: f64,
    nfe: usize,
    w: &RewardWeights,
) -> RewardBreakdown {
    RewardBreakdown {
        r_task,
        r_format,
        r_step,
        r_distill,
        r_total: w.task * r_task + w.format * r_format + w.step * r_step + w.distill * r_distill,
        nfe,
    }
}

/// Scores a finished rollout. Implementations must be pure in the trace.
pub trait RewardFn {
    fn score(&self, trace: &RolloutTrace) -> Result<RewardBreakdown>;
}

impl<F: Fn(&RolloutTrace) -> Result<RewardBreakdown>> RewardFn for F {
    fn score(&self, trace: &RolloutTrace) -> Result<RewardBreakdown> {
        self(trace)
    }
}

/// The standard composite reward over one task, optionally with a teacher
/// for the distillation term.
pub struct TaskRewards<'a> {
    pub task: &'a TaskSpec,
    pub teacher: Option<&'a Transformer>,
    pub weights: RewardWeights,
}

impl RewardFn for TaskRewards<'_> {
    fn score(&self, trace: &RolloutTrace) -> Result<RewardBreakdown> {
        self.weights.validate()?;
        if self.weights.beta != 0.0 {
            // the student sequence probability is not recoverable from a
            // trace alone; callers wanting beta > 0 must assemble the term
            // through distill_from_logprobs themselves
            return Err(Error::invalid("TaskRewards scores with beta = 0"));
        }
        let completion = trace.completion();
        let r_task = task_reward(self.task, &trace.prompt, completion);
        let r_format = format_reward(self.task, completion);
        let r_step = efficiency_reward(trace.nfe);
        let r_distill = match self.teacher {
            Some(t) => distill_reward(t, &trace.prompt, completion, 0.0, 0.0)?,
            None => 0.0,
        };
        Ok(total_reward(
            r_task,
            r_format,
            r_step,
            r_distill,
            trace.nfe,
            &self.weights,
        ))
    }
}

/// Ablation reward that pays for slowness: the negative mean number of
/// voluntarily unmasked tokens per step. Below the step cap this is
/// -completion_len/nfe, strictly increasing in NFE; at the cap the forced
/// cleanup is free, so traces that volunteered less keep scoring higher and
/// the optimum is a planner that never unmasks anything. No correctness or
/// efficiency term pushes back.
pub struct AdversarialSlow;

impl RewardFn for AdversarialSlow {
    fn score(&self, trace: &RolloutTrace) -> Result<RewardBreakdown> {
        if trace.nfe == 0 {
            return Err(Error::invalid("a finished trace needs at least one step"));
        }
        let voluntary: usize = trace
            .steps
            .iter()
            .filter(|s| !s.forced)
            .map(|s| s.selected.len())
            .sum();
        let slow = -(voluntary as f64) / trace.nfe as f64;
        let w = RewardWeights {
            task: 0.0,
            format: 0.0,
            step: 1.0,
            distill: 0.0,
            beta: 0.0,
        };
        Ok(total_reward(0.0, 0.0, slow, 0.0, trace.nfe, &w))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherMetrics {
    /// Per-step training perplexity, exp of the batch mean token NLL.
    pub perplexities: Vec<f64>,
}

/// Causal NLL training of the teacher on (prompt, gold completion) pairs.
/// Only completion tokens enter the loss; the prompt is pure conditioning.
pub fn pretrain_teacher(
    teacher: &mut Transformer,
    pairs: &[(Vec<u32>, Vec<u32>)],
    cfg: &crate::mdlm::PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TeacherMetrics> {
    use crate::autodiff::{grads_for, AdamW, Graph};
    use crate::model::AttentionKind;

    if teacher.config.attention != AttentionKind::Causal {
        return Err(Error::invalid("the teacher must use causal attention"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("empty teacher corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if let Some((q, c)) = pairs.iter().find(|(q, c)| q.is_empty() || c.is_empty()) {
        return Err(Error::invalid(format!(
            "teacher pairs need nonempty prompt and completion, got {}/{}",
            q.len(),
            c.len()
        )));
    }
    let mut opt = AdamW::new(cfg.lr);
    let mut perplexities = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = teacher.bind(&mut g);
        let mut total = g.scalar(0.0);
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            let (q, c) = &pairs[rng.gen_range(0..pairs.len())];
            let mut seq = q.clone();
            seq.extend_from_slice(c);
            let out = teacher.forward_bound(&mut g, &bound, &seq)?;
            let logp = g.log_softmax(out.logits)?;
            let m = teacher.config.vocab_size;
            let flat = g.reshape(logp, vec![seq.len() * m])?;
            let ix: Vec<usize> = c
                .iter()
                .enumerate()
                .map(|(i, &t)| (q.len() + i - 1) * m + t as usize)
                .collect();
            let picked = g.gather(flat, &ix)?;
            let lp_sum = g.sum(picked)?;
            total = g.sub(total, lp_sum)?;
            tokens += c.len();
        }
        let nll = g.scale(total, 1.0 / tokens as f64)?;
        let value = g.value(nll).value();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("teacher loss became {value}"),
            });
        }
        let grads = g.backward(nll)?;
        let store = grads_for(&bound, &grads);
        opt.step_single(&mut teacher.params, &store)?;
        perplexities.push(value.exp());
    }
    Ok(TeacherMetrics { perplexities })
}
