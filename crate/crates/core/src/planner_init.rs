//! Supervised warm start for the planner head. Heuristic-mode rollouts are
//! replayed into per-step binary labels (selected or not, per candidate),
//! and the planner is fit to them with class-weighted binary cross entropy
//! while the backbone stays frozen. Without this step a fresh planner
//! unmasks half of every window in expectation, which wrecks early policy
//! training; after it, planner-mode rollouts track the heuristic closely
//! enough that the step cap almost never fires.

use crate::autodiff::{grads_for, AdamW, Graph, Tensor, Var, PROB_EPS};
use crate::decoding::{rollout, time_condition, DecodeConfig, JointPolicy, SelectionMode};
use crate::error::{Error, Result};
use crate::mdlm::{DenoiseModel, MaskedSequence, Vocabulary};
use crate::model::{PlannerHead, Transformer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One supervised example for the planner: a decode-time state, its
/// candidate window, and which candidates the confidence heuristic unmasked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerLabelExample {
    pub state: MaskedSequence,
    pub candidates: Vec<usize>,
    pub labels: Vec<bool>,
    pub time_cond: f64,
}

impl PlannerLabelExample {
    /// Structural checks for examples that crossed a serialization boundary.
    /// The fallback rule guarantees at least one positive label per window.
    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        if self.labels.len() != self.candidates.len() || self.candidates.is_empty() {
            return Err(Error::invalid(
                "labels must cover exactly the candidate window",
            ));
        }
        if !self.labels.iter().any(|&y| y) {
            return Err(Error::invalid("every example needs a positive label"));
        }
        if !(0.0..=1.0).contains(&self.time_cond) {
            return Err(Error::invalid(format!(
                "time_cond {} outside [0, 1]",
                self.time_cond
            )));
        }
        for &pos in &self.candidates {
            if pos >= self.state.len() || pos < self.state.prompt_len {
                return Err(Error::invalid(format!(
                    "candidate {pos} outside the completion region"
                )));
            }
            if self.state.tokens[pos] != vocab.mask_id() {
                return Err(Error::invalid(format!("candidate {pos} is not masked")));
            }
        }
        Ok(())
    }
}

/// Runs heuristic-mode rollouts over the prompts and records one example per
/// non-forced step. Labels are on-policy: they come from the model's own
/// decode states, not teacher-forced corpus states.
pub fn generate_labels(
    model: &Transformer,
    prompts: &[Vec<u32>],
    completion_len: usize,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PlannerLabelExample>> {
    if config.mode != SelectionMode::Heuristic {
        return Err(Error::invalid("labels imitate the heuristic selection"));
    }
    let vocab = DenoiseModel::vocab(model);
    let policy = JointPolicy {
        model,
        planner: None,
    };
    let mut out = Vec::new();
    for prompt in prompts {
        let trace = rollout(&policy, prompt, completion_len, config, rng)?;
        let mut state = MaskedSequence::all_masked(prompt, completion_len, vocab)?;
        for record in &trace.steps {
            if !record.forced {
                let labels: Vec<bool> = record
                    .candidates
                    .iter()
                    .map(|pos| record.selected.contains(pos))
                    .collect();
                let example = PlannerLabelExample {
                    state: state.clone(),
                    candidates: record.candidates.clone(),
                    labels,
                    time_cond: time_condition(&state, vocab),
                };
                example.validate(vocab)?;
                out.push(example);
            }
            for (&pos, &tok) in record.selected.iter().zip(&record.tokens) {
                state.tokens[pos] = tok;
            }
        }
    }
    Ok(out)
}

pub const DEFAULT_W_CAP: f64 = 100.0;

pub struct WeightedBce {
    /// Mean over every candidate slot in the batch of the class-weighted
    /// binary cross entropy.
    pub loss: Var,
    /// Positive-class weight, the batch's exact negative/positive count
    /// ratio (zero when the batch has no negatives).
    pub w_pos: f64,
    /// Set when the ratio was cut off at the cap (always on zero positives).
    pub capped: bool,
}

/// Class-weighted BCE over a batch of (per-position probabilities, example)
/// pairs. Probabilities are clamped at 1e-12 away from both ends before the
/// logs, though a sigmoid-backed planner never reaches the clamp.
pub fn weighted_bce_loss(
    g: &mut Graph,
    batch: &[(Var, &PlannerLabelExample)],
    w_cap: f64,
) -> Result<WeightedBce> {
    if batch.is_empty() {
        return Err(Error::invalid("empty label batch"));
    }
    if !(w_cap > 0.0) {
        return Err(Error::invalid(format!("weight cap {w_cap} must be > 0")));
    }
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for (_, ex) in batch {
        positives += ex.labels.iter().filter(|&&y| y).count();
        negatives += ex.labels.iter().filter(|&&y| !y).count();
    }
    let total = positives + negatives;
    let (w_pos, capped) = if positives == 0 {
        (w_cap, true)
    } else {
        let raw = negatives as f64 / positives as f64;
        if raw > w_cap {
            (w_cap, true)
        } else {
            (raw, false)
        }
    };

    let mut pos_terms: Option<Var> = None;
    let mut neg_terms: Option<Var> = None;
    for (probs, ex) in batch {
        let cand = g.gather(*probs, &ex.candidates)?;
        let pos_slots: Vec<usize> = (0..ex.labels.len()).filter(|&i| ex.labels[i]).collect();
        let neg_slots: Vec<usize> = (0..ex.labels.len()).filter(|&i| !ex.labels[i]).collect();
        if !pos_slots.is_empty() {
            let p = g.gather(cand, &pos_slots)?;
            let eps = g.constant(Tensor::full(vec![pos_slots.len()], PROB_EPS));
            let safe = g.emax(p, eps)?;
            let lp = g.ln(safe)?;
            let s = g.sum(lp)?;
            pos_terms = Some(match pos_terms {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        if !neg_slots.is_empty() {
            let p = g.gather(cand, &neg_slots)?;
            let ones = g.constant(Tensor::ones(vec![neg_slots.len()]));
            let q = g.sub(ones, p)?;
            let eps = g.constant(Tensor::full(vec![neg_slots.len()], PROB_EPS));
            let safe = g.emax(q, eps)?;
            let lq = g.ln(safe)?;
            let s = g.sum(lq)?;
            neg_terms = Some(match neg_terms {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }

    let mut loss = g.scalar(0.0);
    if let Some(p) = pos_terms {
        let weighted = g.scale(p, w_pos)?;
        loss = g.add(loss, weighted)?;
    }
    if let Some(n) = neg_terms {
        loss = g.add(loss, n)?;
    }
    let loss = g.scale(loss, -1.0 / total as f64)?;
    Ok(WeightedBce {
        loss,
        w_pos,
        capped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerInitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w_cap: f64,
    /// Fraction of examples held out for the agreement metric; the metric
    /// falls back to the full dataset when the split would be empty.
    pub holdout_fraction: f64,
}

impl Default for PlannerInitConfig {
    fn default() -> Self {
        PlannerInitConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-2,
            w_cap: DEFAULT_W_CAP,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerInitMetrics {
    pub epoch_losses: Vec<f64>,
    /// Fraction of held-out candidate slots where thresholding the planner
    /// at one half reproduces the heuristic's decision.
    pub holdout_agreement: f64,
    /// Mean planner probability over held-out candidate slots.
    pub holdout_mean_prob: f64,
    pub holdout_size: usize,
    pub capped_batches: usize,
}

/// Backbone features the planner consumes, precomputed once per example
/// since the backbone is frozen throughout initialization.
struct Features {
    hidden: Tensor,
    tok_rows: Tensor,
    masked: Vec<bool>,
}

fn backbone_features(
    model: &Transformer,
    examples: &[&PlannerLabelExample],
    vocab: Vocabulary,
) -> Result<Vec<Features>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut g = Graph::new();
        let bound = DenoiseModel::bind(model, &mut g);
        let fwd = model.forward_bound(&mut g, &bound, &ex.state.tokens)?;
        out.push(Features {
            hidden: g.value(fwd.hidden).clone(),
            tok_rows: g.value(fwd.tok_rows).clone(),
            masked: ex
                .state
                .tokens
                .iter()
                .map(|&t| t == vocab.mask_id())
                .collect(),
        });
    }
    Ok(out)
}

fn planner_probs_on(
    planner: &PlannerHead,
    features: &Features,
    time_cond: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = planner.bind(&mut g);
    let hidden = g.constant(features.hidden.clone());
    let tok_rows = g.constant(features.tok_rows.clone());
    let probs = planner.forward_bound(&mut g, &bound, hidden, tok_rows, &features.masked, time_cond)?;
    Ok(g.value(probs).data().to_vec())
}

/// Fits the planner to the label dataset with AdamW, backbone frozen (it is
/// only ever borrowed immutably here). Aborts on a non-finite batch loss.
pub fn train_planner_init(
    model: &Transformer,
    planner: &mut PlannerHead,
    dataset: &[PlannerLabelExample],
    cfg: &PlannerInitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PlannerInitMetrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("planner initialization needs examples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout_fraction {} outside [0, 1)",
            cfg.holdout_fraction
        )));
    }
    let vocab = DenoiseModel::vocab(model);
    for ex in dataset {
        ex.validate(vocab)?;
    }

    // split, then cache the frozen backbone's features per example
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for k in (1..order.len()).rev() {
        order.swap(k, rng.gen_range(0..=k));
    }
    let holdout_n = (dataset.len() as f64 * cfg.holdout_fraction).round() as usize;
    let (holdout_idx, train_idx) = order.split_at(holdout_n);
    let examples: Vec<&PlannerLabelExample> = dataset.iter().collect();
    let features = backbone_features(model, &examples, vocab)?;

    let mut opt = AdamW::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut capped_batches = 0usize;
    let mut batch_counter = 0usize;
    let mut train_order: Vec<usize> = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        for k in (1..train_order.len()).rev() {
            train_order.swap(k, rng.gen_range(0..=k));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = planner.bind(&mut g);
            let mut batch: Vec<(Var, &PlannerLabelExample)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let hidden = g.constant(features[i].hidden.clone());
                let tok_rows = g.constant(features[i].tok_rows.clone());
                let probs = planner.forward_bound(
                    &mut g,
                    &bound,
                    hidden,
                    tok_rows,
                    &features[i].masked,
                    dataset[i].time_cond,
                )?;
                batch.push((probs, &dataset[i]));
            }
            let bce = weighted_bce_loss(&mut g, &batch, cfg.w_cap)?;
            let value = g.value(bce.loss).value();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: batch_counter,
                    msg: format!("planner init loss {value}"),
                });
            }
            if bce.capped {
                capped_batches += 1;
            }
            let grads = g.backward(bce.loss)?;
            let store = grads_for(&bound, &grads);
            opt.step_single(&mut planner.params, &store)?;
            epoch_loss += value;
            batches += 1;
            batch_counter += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    // agreement metric on the trained planner
    let eval_idx: Vec<usize> = if holdout_idx.is_empty() {
        (0..dataset.len()).collect()
    } else {
        holdout_idx.to_vec()
    };
    let mut agree = 0usize;
    let mut slots = 0usize;
    let mut prob_sum = 0.0;
    for &i in &eval_idx {
        let probs = planner_probs_on(planner, &features[i], dataset[i].time_cond)?;
        for (slot, &pos) in dataset[i].candidates.iter().enumerate() {
            let p = probs[pos];
            if (p > 0.5) == dataset[i].labels[slot] {
                agree += 1;
            }
            prob_sum += p;
            slots += 1;
        }
    }
    Ok(PlannerInitMetrics {
        epoch_losses,
        holdout_agreement: agree as f64 / slots as f64,
        holdout_mean_prob: prob_sum / slots as f64,
        holdout_size: eval_idx.len(),
        capped_batches,
    })
}
