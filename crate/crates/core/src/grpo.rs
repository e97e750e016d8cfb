//! Group-relative policy optimization over rollout traces. One prompt
//! yields a group of rollouts; advantages are rewards minus the group mean,
//! deliberately not divided by the standard deviation; a lower clip zeroes
//! advantages below a threshold so the update learns from successful
//! trajectories; and the loss is a ratio-form REINFORCE objective whose
//! per-step factors come from the exact likelihood recomputation.
//!
//! Gradients are accumulated one decode step at a time across the group,
//! so the live tape never holds more than one forward pass per rollout.
//! The optimizer step is joint: backbone and planner move together.

use crate::autodiff::{AdamW, BoundParams, GradStore, Graph, ParamMap, Var};
use crate::decoding::{rollout, DecodeConfig, JointPolicy, RolloutTrace, SelectionMode, UnmaskPolicy};
use crate::error::{Error, Result};
use crate::likelihood::{rollout_log_likelihood, step_log_likelihood, trace_states};
use crate::mdlm::MaskedSequence;
use crate::model::{PlannerHead, Transformer};
use crate::rewards::{RewardBreakdown, RewardFn, RewardWeights, TaskSpec};
use crate::rng::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What the training loop needs from a task: prompts, the completion length
/// to decode, and an answer check for the accuracy column of the logs.
pub trait RolloutTask {
    fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> Vec<u32>;
    fn completion_len(&self) -> usize;
    fn verify(&self, prompt: &[u32], completion: &[u32]) -> bool;
}

impl RolloutTask for TaskSpec {
    fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        TaskSpec::sample_prompt(self, rng)
    }

    fn completion_len(&self) -> usize {
        TaskSpec::completion_len(self)
    }

    fn verify(&self, prompt: &[u32], completion: &[u32]) -> bool {
        TaskSpec::verify(self, prompt, completion)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Rollouts per group, G.
    pub group_size: usize,
    /// Advantage clipping threshold C; NEG_INFINITY disables clipping.
    pub clip: f64,
    pub lr: f64,
    /// One prompt per group; this is the run length.
    pub total_groups: usize,
    pub seed: u64,
    pub decode: DecodeConfig,
    pub weights: RewardWeights,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 12,
            clip: 0.0,
            lr: 1e-4,
            total_groups: 300,
            seed: 0,
            decode: DecodeConfig::for_completion(
                crate::rewards::COMPLETION_LEN,
                SelectionMode::Planner,
            ),
            weights: RewardWeights::standard(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "a group of {} cannot carry a relative baseline",
                self.group_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be finite and > 0", self.lr)));
        }
        if self.clip.is_nan() {
            return Err(Error::Config("clip threshold cannot be NaN".into()));
        }
        if self.decode.mode != SelectionMode::Planner {
            return Err(Error::Config(
                "policy training needs planner-mode rollouts".into(),
            ));
        }
        self.decode.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

/// A^g = r^g - mean(r); no standard-deviation normalization, so scaling all
/// rewards scales all advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// Zero out every advantage strictly below the threshold.
pub fn clip_advantages(advantages: &[f64], c: f64) -> Vec<f64> {
    advantages
        .iter()
        .map(|&a| if a < c { 0.0 } else { a })
        .collect()
}

/// One prompt's group of rollouts with their rewards and advantages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: Vec<u32>,
    pub traces: Vec<RolloutTrace>,
    pub rewards: Vec<RewardBreakdown>,
    /// Raw advantages; sum to zero up to rounding.
    pub advantages: Vec<f64>,
    /// Advantages after the lower clip; these drive the update.
    pub clipped: Vec<f64>,
}

impl GroupBatch {
    /// Generates and scores a group. Rollout g draws from its own stream
    /// keyed by (seed, g), so the group is a set of independently seeded
    /// trajectories rather than one serial stream.
    pub fn generate(
        policy: &dyn UnmaskPolicy,
        prompt: &[u32],
        completion_len: usize,
        scorer: &dyn RewardFn,
        cfg: &GrpoConfig,
        seed: u64,
    ) -> Result<GroupBatch> {
        cfg.validate()?;
        let mut traces = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for g in 0..cfg.group_size {
            let mut rng = substream(seed, "rollout", g as u64);
            let trace = rollout(policy, prompt, completion_len, &cfg.decode, &mut rng)?;
            rewards.push(scorer.score(&trace)?);
            traces.push(trace);
        }
        let totals: Vec<f64> = rewards.iter().map(|r| r.r_total).collect();
        let advantages = compute_advantages(&totals)?;
        let clipped = clip_advantages(&advantages, cfg.clip);
        Ok(GroupBatch {
            prompt: prompt.to_vec(),
            traces,
            rewards,
            advantages,
            clipped,
        })
    }

    fn completion_len(&self) -> Result<usize> {
        let len = self
            .traces
            .first()
            .ok_or_else(|| Error::invalid("empty group"))?
            .completion_len;
        if len == 0 {
            return Err(Error::invalid("zero-length completions"));
        }
        if self.traces.iter().any(|t| t.completion_len != len) {
            return Err(Error::invalid("mixed completion lengths in one group"));
        }
        if self.traces.len() != self.clipped.len() || self.traces.len() != self.advantages.len() {
            return Err(Error::invalid("group fields disagree in length"));
        }
        Ok(len)
    }
}

pub struct GrpoLoss {
    pub loss: Var,
    /// Steps whose likelihood recomputation hit the probability floor.
    pub clamped_steps: usize,
}

/// The full ratio-form objective on one graph:
/// -(1/(len * G)) sum_g A^g sum_k p_k / stop_grad(p_k), in log space. Each
/// ratio evaluates to exactly 1, so the value reduces to the advantage-
/// weighted step counts while the gradient matches the log-likelihood form.
pub fn grpo_loss(
    policy: &dyn UnmaskPolicy,
    g: &mut Graph,
    binds: &[BoundParams],
    group: &GroupBatch,
    config: &DecodeConfig,
) -> Result<GrpoLoss> {
    let len = group.completion_len()?;
    let mut clamped_steps = 0;
    let mut total = g.scalar(0.0);
    for (trace, &a) in group.traces.iter().zip(&group.clipped) {
        if a == 0.0 {
            continue;
        }
        let rl = rollout_log_likelihood(policy, g, binds, trace, config)?;
        let mut ratios = g.scalar(0.0);
        for step in &rl.steps {
            if step.clamped {
                clamped_steps += 1;
            }
            let anchor = g.stop_grad(step.total)?;
            let centered = g.sub(step.total, anchor)?;
            let ratio = g.exp(centered)?;
            ratios = g.add(ratios, ratio)?;
        }
        let term = g.scale(ratios, a)?;
        total = g.add(total, term)?;
    }
    let loss = g.scale(total, -1.0 / ((len * group.traces.len()) as f64))?;
    Ok(GrpoLoss {
        loss,
        clamped_steps,
    })
}

pub struct GroupGradients {
    pub grads: GradStore,
    pub loss: f64,
    pub clamped_steps: usize,
}

/// Gradient of the group objective, accumulated step index by step index:
/// step n contributes only for trajectories that are still running (n is
/// zero-based, so trajectory g participates while n < K^g, covering every
/// step exactly once). Each step index gets its own graph and backward
/// pass; the stores sum to the same gradient as one big graph.
pub fn group_gradients(
    policy: &dyn UnmaskPolicy,
    group: &GroupBatch,
    config: &DecodeConfig,
) -> Result<GroupGradients> {
    let len = group.completion_len()?;
    let vocab = policy.vocab();
    let states: Vec<Vec<MaskedSequence>> = group
        .traces
        .iter()
        .map(|t| trace_states(t, config, vocab))
        .collect::<Result<_>>()?;
    let norm = 1.0 / ((len * group.traces.len()) as f64);
    let max_k = group.traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut acc = GradStore::new();
    let mut loss = 0.0;
    let mut clamped_steps = 0;
    for n in 0..max_k {
        let mut g = Graph::new();
        let binds = policy.bind(&mut g);
        let mut sum: Option<Var> = None;
        for (i, trace) in group.traces.iter().enumerate() {
            let a = group.clipped[i];
            if a == 0.0 || n >= trace.steps.len() {
                continue;
            }
            let step =
                step_log_likelihood(policy, &mut g, &binds, &states[i][n], &trace.steps[n], config, n)?;
            if step.clamped {
                clamped_steps += 1;
            }
            let anchor = g.stop_grad(step.total)?;
            let centered = g.sub(step.total, anchor)?;
            let ratio = g.exp(centered)?;
            let term = g.scale(ratio, a)?;
            sum = Some(match sum {
                Some(s) => g.add(s, term)?,
                None => term,
            });
        }
        let Some(sum) = sum else { continue };
        let loss_n = g.scale(sum, -norm)?;
        let value = g.value(loss_n).value();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: n,
                msg: format!("step loss became {value}"),
            });
        }
        loss += value;
        let grads = g.backward(loss_n)?;
        for bound in &binds {
            acc.absorb(bound, &grads);
        }
    }
    Ok(GroupGradients {
        grads: acc,
        loss,
        clamped_steps,
    })
}

/// Per-group training diagnostics, one CSV row each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLog {
    pub group: usize,
    pub mean_r_task: f64,
    pub mean_r_format: f64,
    pub mean_r_step: f64,
    pub mean_r_distill: f64,
    pub mean_r_total: f64,
    pub mean_nfe: f64,
    /// Fraction of the group whose answer verifies.
    pub accuracy: f64,
    /// Mean effective unmask probability over non-forced candidate slots.
    pub mean_unmask_prob: f64,
    pub loss: f64,
    pub clamped_steps: usize,
}

impl GroupLog {
    fn from_batch(group: usize, batch: &GroupBatch, task: &dyn RolloutTask) -> GroupLog {
        let n = batch.traces.len() as f64;
        let mean = |f: &dyn Fn(&RewardBreakdown) -> f64| batch.rewards.iter().map(f).sum::<f64>() / n;
        let mut prob_sum = 0.0;
        let mut prob_count = 0usize;
        for trace in &batch.traces {
            for step in trace.steps.iter().filter(|s| !s.forced) {
                prob_sum += step.unmask_probs.iter().sum::<f64>();
                prob_count += step.unmask_probs.len();
            }
        }
        GroupLog {
            group,
            mean_r_task: mean(&|r| r.r_task),
            mean_r_format: mean(&|r| r.r_format),
            mean_r_step: mean(&|r| r.r_step),
            mean_r_distill: mean(&|r| r.r_distill),
            mean_r_total: mean(&|r| r.r_total),
            mean_nfe: batch.traces.iter().map(|t| t.nfe as f64).sum::<f64>() / n,
            accuracy: batch
                .traces
                .iter()
                .filter(|t| task.verify(&batch.prompt, t.completion()))
                .count() as f64
                / n,
            mean_unmask_prob: if prob_count == 0 {
                0.0
            } else {
                prob_sum / prob_count as f64
            },
            loss: 0.0,
            clamped_steps: 0,
        }
    }
}

/// Where to pick a run back up: the next group index and the optimizer
/// moments as exported by the previous run.
pub struct GrpoResume {
    pub start_group: usize,
    pub opt_state: ParamMap,
}

pub struct GrpoRun {
    pub logs: Vec<GroupLog>,
    pub opt_state: ParamMap,
}

/// The training loop. Every group is derived from (config seed, group
/// index) alone: the prompt, the rollout streams, everything. A resumed run
/// therefore continues bitwise exactly where the interrupted one stopped,
/// given the same parameters and optimizer state.
///
/// Rollout generation, scoring, and gradient accumulation hold the
/// parameters behind immutable borrows; the joint optimizer step afterwards
/// is the only writer, so each group's update is strictly on-policy.
pub fn train_grpo(
    model: &mut Transformer,
    planner: &mut PlannerHead,
    scorer: &dyn RewardFn,
    task: &dyn RolloutTask,
    cfg: &GrpoConfig,
    resume: Option<GrpoResume>,
) -> Result<GrpoRun> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.lr);
    let start = match resume {
        Some(r) => {
            opt.import_state(&r.opt_state)?;
            r.start_group
        }
        None => 0,
    };
    if start > cfg.total_groups {
        return Err(Error::invalid(format!(
            "resume index {start} is past the configured {} groups",
            cfg.total_groups
        )));
    }
    let mut logs = Vec::with_capacity(cfg.total_groups - start);
    for i in start..cfg.total_groups {
        let prompt = task.sample_prompt(&mut substream(cfg.seed, "grpo-prompt", i as u64));
        let rollout_seed = substream(cfg.seed, "grpo-group", i as u64).gen::<u64>();
        let (batch, update) = {
            let policy = JointPolicy {
                model: &*model,
                planner: Some(&*planner),
            };
            let batch = GroupBatch::generate(
                &policy,
                &prompt,
                task.completion_len(),
                scorer,
                cfg,
                rollout_seed,
            )?;
            // a group whose clipped advantages all vanish has an exactly
            // zero gradient; skipping the optimizer entirely keeps the
            // parameters bitwise intact (AdamW moments would otherwise
            // still decay them)
            let update = if batch.clipped.iter().all(|&a| a == 0.0) {
                None
            } else {
                Some(group_gradients(&policy, &batch, &cfg.decode)?)
            };
            (batch, update)
        };
        let mut log = GroupLog::from_batch(i, &batch, task);
        if let Some(gg) = update {
            if let Some(name) = gg.grads.first_non_finite() {
                return Err(Error::Diverged {
                    step: i,
                    msg: format!(
                        "non-finite gradient for {name}; group rewards {:?}",
                        batch.rewards.iter().map(|r| r.r_total).collect::<Vec<f64>>()
                    ),
                });
            }
            log.loss = gg.loss;
            log.clamped_steps = gg.clamped_steps;
            opt.step_joint(&mut [(&mut model.params, &gg.grads), (&mut planner.params, &gg.grads)])?;
        }
        logs.push(log);
    }
    Ok(GrpoRun {
        logs,
        opt_state: opt.export_state(),
    })
}
