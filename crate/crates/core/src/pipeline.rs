//! The experiment pipeline behind the command line: pretraining, planner
//! initialization, policy optimization with resume, evaluation sweeps, and
//! analysis exports. Every command is a pure function of its config, seeds,
//! and input files; artifacts land under the run directory next to an echo
//! of the config that produced them, so reruns are byte-identical.

use crate::autodiff::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::corpus::{task_pairs, task_prompts, task_sequences};
use crate::decoding::{
    rollout, DecodeConfig, JointPolicy, RolloutTrace, SelectionMode, TabularPolicy,
};
use crate::error::{Error, Result};
use crate::grpo::{train_grpo, GroupLog, GrpoConfig, GrpoResume, RolloutTask};
use crate::likelihood::{enumerate_all_rollouts, Enumeration};
use crate::mdlm::{
    pretrain_mdlm, MaskedSequence, NoiseSchedule, PretrainConfig, TabularMdlm, Vocabulary,
};
use crate::model::{AttentionKind, PlannerConfig, PlannerHead, Transformer, TransformerConfig};
use crate::planner_init::{generate_labels, train_planner_init, PlannerInitMetrics};
use crate::rewards::{
    efficiency_reward, pretrain_teacher, task_vocab, total_reward, RewardWeights, TaskRewards,
};
use crate::rng::{stream, substream};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BACKBONE_STEM: &str = "backbone";
pub const TEACHER_STEM: &str = "teacher";
pub const PLANNER_STEM: &str = "planner";
pub const BACKBONE_GRPO_STEM: &str = "backbone-grpo";
pub const PLANNER_GRPO_STEM: &str = "planner-grpo";
pub const GRPO_OPT_STEM: &str = "grpo-opt";

fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.len() * 32);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_backbone(cfg: &ExperimentConfig, stem: &str) -> Result<Transformer> {
    Ok(Transformer {
        config: cfg.backbone.clone(),
        params: load_checkpoint(&cfg.out_dir, stem)?,
    })
}

fn load_planner(cfg: &ExperimentConfig, stem: &str) -> Result<PlannerHead> {
    Ok(PlannerHead {
        config: cfg.planner.clone(),
        params: load_checkpoint(&cfg.out_dir, stem)?,
    })
}

fn teacher_config(cfg: &ExperimentConfig) -> TransformerConfig {
    TransformerConfig {
        vocab_size: task_vocab().clean_count(),
        attention: AttentionKind::Causal,
        ..cfg.backbone.clone()
    }
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Option<Transformer>> {
    if cfg.teacher_pretrain.is_none() {
        return Ok(None);
    }
    Ok(Some(Transformer {
        config: teacher_config(cfg),
        params: load_checkpoint(&cfg.out_dir, TEACHER_STEM)?,
    }))
}

pub struct PretrainArtifacts {
    pub backbone_losses: Vec<f64>,
    pub teacher_perplexities: Option<Vec<f64>>,
}

/// Trains the denoiser on gold task sequences and, when configured, the
/// causal teacher on gold prompt/completion pairs. Writes one checkpoint
/// and one loss CSV per network.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainArtifacts> {
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    let spec = cfg.task_spec();

    let corpus = task_sequences(&spec, cfg.corpus_size, &mut stream(cfg.seed, "corpus"))?;
    let mut model = Transformer::init(cfg.backbone.clone(), &mut stream(cfg.seed, "backbone-init"))?;
    let metrics = pretrain_mdlm(
        &mut model,
        &corpus,
        &cfg.pretrain,
        NoiseSchedule::Linear,
        &mut stream(cfg.seed, "backbone-sgd"),
    )?;
    save_checkpoint(&cfg.out_dir, BACKBONE_STEM, &model.params)?;
    let rows: Vec<String> = metrics
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}"))
        .collect();
    write_csv(&cfg.out_dir.join("pretrain_loss.csv"), "step,loss", &rows)?;

    let teacher_perplexities = match &cfg.teacher_pretrain {
        Some(tp) => {
            let pairs = task_pairs(&spec, cfg.corpus_size, &mut stream(cfg.seed, "teacher-corpus"))?;
            let mut teacher =
                Transformer::init(teacher_config(cfg), &mut stream(cfg.seed, "teacher-init"))?;
            let tm = pretrain_teacher(&mut teacher, &pairs, tp, &mut stream(cfg.seed, "teacher-sgd"))?;
            save_checkpoint(&cfg.out_dir, TEACHER_STEM, &teacher.params)?;
            let rows: Vec<String> = tm
                .perplexities
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{i},{p}"))
                .collect();
            write_csv(&cfg.out_dir.join("teacher_loss.csv"), "step,perplexity", &rows)?;
            Some(tm.perplexities)
        }
        None => None,
    };
    Ok(PretrainArtifacts {
        backbone_losses: metrics.losses,
        teacher_perplexities,
    })
}

/// Labels decode states with the confidence heuristic and fits the planner
/// to them, leaving the backbone untouched. Writes the planner checkpoint,
/// the per-epoch loss CSV, and the agreement report.
pub fn cmd_init_planner(cfg: &ExperimentConfig) -> Result<PlannerInitMetrics> {
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    let spec = cfg.task_spec();
    let model = load_backbone(cfg, BACKBONE_STEM)?;

    let prompts = task_prompts(&spec, cfg.label_prompts, &mut stream(cfg.seed, "label-prompts"));
    let label_decode =
        DecodeConfig::for_completion(spec.completion_len(), SelectionMode::Heuristic);
    let labels = generate_labels(
        &model,
        &prompts,
        spec.completion_len(),
        &label_decode,
        &mut stream(cfg.seed, "labels"),
    )?;
    let mut planner = PlannerHead::init(cfg.planner.clone(), &mut stream(cfg.seed, "planner-init"))?;
    let metrics = train_planner_init(
        &model,
        &mut planner,
        &labels,
        &cfg.planner_init,
        &mut stream(cfg.seed, "planner-sgd"),
    )?;
    save_checkpoint(&cfg.out_dir, PLANNER_STEM, &planner.params)?;
    let rows: Vec<String> = metrics
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}"))
        .collect();
    write_csv(&cfg.out_dir.join("planner_init.csv"), "epoch,loss", &rows)?;
    std::fs::write(
        cfg.out_dir.join("planner_report.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

#[derive(Debug, Serialize, Deserialize)]
struct GrpoProgress {
    next_group: usize,
}

pub struct GrpoArtifacts {
    pub logs: Vec<GroupLog>,
    pub start_group: usize,
}

const GRPO_CSV_HEADER: &str = "group,mean_r_task,mean_r_format,mean_r_step,mean_r_distill,\
mean_r_total,mean_nfe,accuracy,mean_unmask_prob,loss,clamped_steps";

fn grpo_csv_row(l: &GroupLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        l.group,
        l.mean_r_task,
        l.mean_r_format,
        l.mean_r_step,
        l.mean_r_distill,
        l.mean_r_total,
        l.mean_nfe,
        l.accuracy,
        l.mean_unmask_prob,
        l.loss,
        l.clamped_steps
    )
}

/// Optimizes the joint policy against the composite task reward, starting
/// from the pretrain and planner-init checkpoints, or from its own previous
/// output when `resume` is set. The metrics CSV keeps one row per group
/// with a contiguous group counter across resumes.
pub fn cmd_train_grpo(cfg: &ExperimentConfig, resume: bool) -> Result<GrpoArtifacts> {
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    let spec = cfg.task_spec();
    let teacher = load_teacher(cfg)?;

    let (mut model, mut planner, resume_state) = if resume {
        let progress_path = cfg.out_dir.join("grpo_progress.json");
        let text = std::fs::read_to_string(&progress_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", progress_path.display()))
        })?;
        let progress: GrpoProgress = serde_json::from_str(&text)?;
        let opt_state = load_checkpoint(&cfg.out_dir, GRPO_OPT_STEM)?;
        (
            load_backbone(cfg, BACKBONE_GRPO_STEM)?,
            load_planner(cfg, PLANNER_GRPO_STEM)?,
            Some(GrpoResume {
                start_group: progress.next_group,
                opt_state,
            }),
        )
    } else {
        (
            load_backbone(cfg, BACKBONE_STEM)?,
            load_planner(cfg, PLANNER_STEM)?,
            None,
        )
    };
    let start_group = resume_state.as_ref().map_or(0, |r| r.start_group);

    let scorer = TaskRewards {
        task: &spec,
        teacher: teacher.as_ref(),
        weights: cfg.grpo.weights,
    };
    let run = train_grpo(&mut model, &mut planner, &scorer, &spec, &cfg.grpo, resume_state)?;

    save_checkpoint(&cfg.out_dir, BACKBONE_GRPO_STEM, &model.params)?;
    save_checkpoint(&cfg.out_dir, PLANNER_GRPO_STEM, &planner.params)?;
    save_checkpoint(&cfg.out_dir, GRPO_OPT_STEM, &run.opt_state)?;
    std::fs::write(
        cfg.out_dir.join("grpo_progress.json"),
        serde_json::to_string_pretty(&GrpoProgress {
            next_group: cfg.grpo.total_groups,
        })?,
    )?;

    let csv_path = cfg.out_dir.join("grpo_metrics.csv");
    let rows: Vec<String> = run.logs.iter().map(grpo_csv_row).collect();
    if start_group > 0 && csv_path.exists() {
        let mut text = std::fs::read_to_string(&csv_path)?;
        for row in &rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(&csv_path, text)?;
    } else {
        write_csv(&csv_path, GRPO_CSV_HEADER, &rows)?;
    }
    Ok(GrpoArtifacts {
        logs: run.logs,
        start_group,
    })
}

/// Which checkpoint pair an evaluation loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStage {
    /// Pretrained backbone with the warm-started planner.
    Init,
    /// The policy after reward optimization.
    Grpo,
}

impl EvalStage {
    fn stems(self) -> (&'static str, &'static str) {
        match self {
            EvalStage::Init => (BACKBONE_STEM, PLANNER_STEM),
            EvalStage::Grpo => (BACKBONE_GRPO_STEM, PLANNER_GRPO_STEM),
        }
    }

    fn label(self) -> &'static str {
        match self {
            EvalStage::Init => "init",
            EvalStage::Grpo => "grpo",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub alpha: f64,
    pub mode: SelectionMode,
    pub trials: usize,
    pub accuracy: f64,
    pub mean_nfe: f64,
}

fn mode_label(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::Heuristic => "heuristic",
        SelectionMode::Planner => "planner",
    }
}

/// Sweeps the planner scaling factor over a fixed seeded prompt set and
/// reports mean accuracy and mean NFE per point. Planner mode averages the
/// requested number of stochastic trials; the heuristic is deterministic,
/// so it always runs one.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    stage: EvalStage,
    mode: SelectionMode,
    alphas: &[f64],
    trials: usize,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    if alphas.is_empty() {
        return Err(Error::Config("empty alpha sweep".into()));
    }
    let spec = cfg.task_spec();
    let (model_stem, planner_stem) = stage.stems();
    let model = load_backbone(cfg, model_stem)?;
    let planner = match mode {
        SelectionMode::Planner => Some(load_planner(cfg, planner_stem)?),
        SelectionMode::Heuristic => None,
    };
    let policy = JointPolicy {
        model: &model,
        planner: planner.as_ref(),
    };
    let prompts = task_prompts(&spec, cfg.eval_prompts, &mut stream(cfg.seed, "eval-prompts"));
    let effective_trials = match mode {
        SelectionMode::Heuristic => 1,
        SelectionMode::Planner => trials,
    };

    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let decode = DecodeConfig {
            alpha,
            mode,
            ..cfg.grpo.decode.clone()
        };
        decode.validate()?;
        let mut correct = 0usize;
        let mut nfe_sum = 0usize;
        let mut n = 0usize;
        for t in 0..effective_trials {
            for (j, prompt) in prompts.iter().enumerate() {
                // streams depend on (trial, prompt) but not alpha, so sweep
                // points share their random draws
                let mut rng =
                    substream(cfg.seed, "eval-roll", ((t as u64) << 32) | j as u64);
                let trace = rollout(&policy, prompt, spec.completion_len(), &decode, &mut rng)?;
                if spec.verify(prompt, trace.completion()) {
                    correct += 1;
                }
                nfe_sum += trace.nfe;
                n += 1;
            }
        }
        out.push(EvalRow {
            alpha,
            mode,
            trials: effective_trials,
            accuracy: correct as f64 / n as f64,
            mean_nfe: nfe_sum as f64 / n as f64,
        });
    }
    let rows: Vec<String> = out
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.alpha,
                mode_label(r.mode),
                r.trials,
                r.accuracy,
                r.mean_nfe
            )
        })
        .collect();
    write_csv(
        &cfg.out_dir.join(format!("eval_{}.csv", stage.label())),
        "alpha,mode,trials,accuracy,mean_nfe",
        &rows,
    )?;
    Ok(out)
}

/// Unmasking order of one trace as a 0/1 matrix: rows are completion
/// positions, columns are decode steps, and a 1 marks the step that
/// committed the position. Row sums of exactly one are enforced, not
/// assumed.
pub fn heatmap_from_trace(trace: &RolloutTrace) -> Result<Vec<Vec<u8>>> {
    let plen = trace.prompt.len();
    let k = trace.steps.len();
    if k == 0 || trace.completion_len == 0 {
        return Err(Error::invalid("empty trace"));
    }
    let mut matrix = vec![vec![0u8; k]; trace.completion_len];
    for (s, record) in trace.steps.iter().enumerate() {
        for &pos in &record.selected {
            if pos < plen || pos >= plen + trace.completion_len {
                return Err(Error::invalid(format!(
                    "selected position {pos} outside the completion"
                )));
            }
            if matrix[pos - plen][s] == 1 {
                return Err(Error::invalid(format!(
                    "position {pos} selected twice in step {s}"
                )));
            }
            matrix[pos - plen][s] = 1;
        }
    }
    for (i, row) in matrix.iter().enumerate() {
        let times: u32 = row.iter().map(|&x| u32::from(x)).sum();
        if times != 1 {
            return Err(Error::invalid(format!(
                "completion position {i} was unmasked {times} times"
            )));
        }
    }
    Ok(matrix)
}

/// Reads a trace JSON file and writes its unmasking heatmap as CSV.
pub fn cmd_export_heatmap(trace_path: &Path, out_path: &Path) -> Result<Vec<Vec<u8>>> {
    let text = std::fs::read_to_string(trace_path)
        .map_err(|e| Error::invalid(format!("cannot read trace {}: {e}", trace_path.display())))?;
    let trace: RolloutTrace = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("malformed trace {}: {e}", trace_path.display())))?;
    let matrix = heatmap_from_trace(&trace)?;
    let k = trace.steps.len();
    let header = std::iter::once("position".to_string())
        .chain((1..=k).map(|s| format!("step_{s}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<String> = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            std::iter::once(i.to_string())
                .chain(row.iter().map(|x| x.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_csv(out_path, &header, &rows)?;
    Ok(matrix)
}

/// The two-mode toy: equal mass on the sequences [0, 1] and [2, 3], whose
/// per-position marginals are uniform over {0, 2} and {1, 3}. Decoding both
/// positions in one step samples them independently and lands outside the
/// modes with probability one half; decoding them one at a time never does.
#[derive(Debug, Clone, Copy)]
pub struct BimodalTask;

pub const BIMODAL_VOCAB: usize = 5;
const MODE_A: [u32; 2] = [0, 1];
const MODE_B: [u32; 2] = [2, 3];

impl RolloutTask for BimodalTask {
    fn sample_prompt(&self, _rng: &mut ChaCha8Rng) -> Vec<u32> {
        Vec::new()
    }

    fn completion_len(&self) -> usize {
        2
    }

    fn verify(&self, _prompt: &[u32], completion: &[u32]) -> bool {
        completion == MODE_A || completion == MODE_B
    }
}

fn cross_mode_mass(e: &Enumeration) -> f64 {
    e.trajectories
        .values()
        .filter(|t| !BimodalTask.verify(&[], &t.final_tokens))
        .map(|t| t.probability)
        .sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BimodalReport {
    /// Exact cross-mode mass of single-step decoding under the ideal
    /// denoiser: the product of marginals, 0.5 by construction.
    pub parallel_cross_mass: f64,
    /// Exact cross-mode mass of one-position-at-a-time decoding: 0.
    pub sequential_cross_mass: f64,
    /// Enumerated cross-mode mass of the learned joint policy.
    pub trained_cross_mass: f64,
    /// Expected decode steps of the learned policy.
    pub trained_mean_nfe: f64,
    pub groups: usize,
}

/// Builds the bimodal construction, reports the exact parallel and
/// sequential cross-mode numbers from the ideal tabular denoiser, then
/// trains a small joint policy on the mode reward and enumerates what it
/// actually samples.
pub fn cmd_demo_bimodal(seed: u64, out_dir: &Path, groups: usize) -> Result<BimodalReport> {
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocabulary::new(BIMODAL_VOCAB)?;
    let joint = vec![(MODE_A.to_vec(), 0.5), (MODE_B.to_vec(), 0.5)];
    let ideal = TabularMdlm::from_joint(&joint, vocab)?;
    let budget = 1e6;

    // alpha doubles the policy's 0.5 to an effective probability of
    // exactly 1, so every candidate is always taken
    let parallel_decode = DecodeConfig {
        block_size: 2,
        confidence_threshold: 0.9,
        temperature: 1.0,
        alpha: 2.0,
        k_max: 2,
        mode: SelectionMode::Planner,
    };
    let always = TabularPolicy {
        model: &ideal,
        unmask_prob: 0.5,
    };
    let parallel = enumerate_all_rollouts(&always, &[], 2, &parallel_decode, budget)?;
    let parallel_cross_mass = cross_mode_mass(&parallel);

    // a one-position block makes the decode strictly sequential
    let sequential_decode = DecodeConfig {
        block_size: 1,
        ..parallel_decode.clone()
    };
    let sequential = enumerate_all_rollouts(&always, &[], 2, &sequential_decode, budget)?;
    let sequential_cross_mass = cross_mode_mass(&sequential);

    let backbone = TransformerConfig {
        vocab_size: BIMODAL_VOCAB,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        l_max: 2,
        attention: AttentionKind::Bidirectional,
    };
    let corpus = vec![
        MaskedSequence::new(MODE_A.to_vec(), 0, vocab)?,
        MaskedSequence::new(MODE_B.to_vec(), 0, vocab)?,
    ];
    let mut model = Transformer::init(backbone, &mut stream(seed, "bimodal-init"))?;
    pretrain_mdlm(
        &mut model,
        &corpus,
        &PretrainConfig {
            steps: 800,
            batch_size: 8,
            lr: 1e-2,
        },
        NoiseSchedule::Linear,
        &mut stream(seed, "bimodal-sgd"),
    )?;
    let mut planner =
        PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(seed, "bimodal-planner"))?;

    let train_decode = DecodeConfig {
        alpha: 1.0,
        k_max: 4,
        ..parallel_decode.clone()
    };
    let grpo_cfg = GrpoConfig {
        group_size: 12,
        clip: 0.0,
        lr: 3e-3,
        total_groups: groups,
        seed,
        decode: train_decode.clone(),
        weights: RewardWeights::standard(),
    };
    let scorer = |trace: &RolloutTrace| {
        let r_task = if BimodalTask.verify(&[], trace.completion()) {
            2.0
        } else {
            0.0
        };
        Ok(total_reward(
            r_task,
            0.0,
            efficiency_reward(trace.nfe),
            0.0,
            trace.nfe,
            &RewardWeights::standard(),
        ))
    };
    let run = train_grpo(&mut model, &mut planner, &scorer, &BimodalTask, &grpo_cfg, None)?;
    let rows: Vec<String> = run.logs.iter().map(grpo_csv_row).collect();
    write_csv(&out_dir.join("bimodal_metrics.csv"), GRPO_CSV_HEADER, &rows)?;

    let learned = JointPolicy {
        model: &model,
        planner: Some(&planner),
    };
    let post = enumerate_all_rollouts(&learned, &[], 2, &train_decode, budget)?;
    let trained_cross_mass = cross_mode_mass(&post);
    let trained_mean_nfe = post
        .nfe_distribution()
        .iter()
        .map(|(k, p)| *k as f64 * p)
        .sum();

    let report = BimodalReport {
        parallel_cross_mass,
        sequential_cross_mass,
        trained_cross_mass,
        trained_mean_nfe,
        groups,
    };
    std::fs::write(
        out_dir.join("bimodal.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
