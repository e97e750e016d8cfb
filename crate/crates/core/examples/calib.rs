//! Scratch calibration runs for the seeded acceptance experiments.

use std::time::Instant;

use maskplan_core::config::ExperimentConfig;
use maskplan_core::decoding::{rollout, DecodeConfig, JointPolicy, SelectionMode};
use maskplan_core::grpo::{train_grpo, GrpoConfig, RolloutTask};
use maskplan_core::mdlm::PretrainConfig;
use maskplan_core::model::{PlannerConfig, PlannerHead, Transformer, TransformerConfig};
use maskplan_core::pipeline::{
    cmd_demo_bimodal, cmd_evaluate, cmd_init_planner, cmd_pretrain, cmd_train_grpo, EvalStage,
};
use maskplan_core::rewards::{
    task_vocab, AdversarialSlow, RewardWeights, TaskKind, TaskRewards, TaskSpec,
};
use maskplan_core::rng::{stream, substream};

fn eval_mean_prob(model: &Transformer, planner: &PlannerHead, task: &TaskSpec, seed: u64) -> f64 {
    let policy = JointPolicy {
        model,
        planner: Some(planner),
    };
    let decode = DecodeConfig::for_completion(task.completion_len(), SelectionMode::Planner);
    let mut num = 0.0;
    let mut den = 0usize;
    for i in 0..16u64 {
        let prompt = task.sample_prompt(&mut substream(seed, "calib-prompt", i));
        let trace = rollout(
            &policy,
            &prompt,
            task.completion_len(),
            &decode,
            &mut substream(seed, "calib-roll", i),
        )
        .unwrap();
        for s in trace.steps.iter().filter(|s| !s.forced) {
            for &p in &s.unmask_probs {
                num += p;
                den += 1;
            }
        }
    }
    num / den as f64
}

fn collapse_run(clip: f64, adversarial: bool, groups: usize, lr: f64, seed: u64) {
    let task = TaskSpec::new(TaskKind::PatternCopy);
    let vocab = task_vocab();
    let tcfg = TransformerConfig {
        vocab_size: vocab.size(),
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        l_max: task.prompt_len() + task.completion_len(),
        attention: maskplan_core::model::AttentionKind::Bidirectional,
    };
    let mut model = Transformer::init(tcfg, &mut stream(seed, "model")).unwrap();
    let mut planner =
        PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(seed, "planner")).unwrap();
    let cfg = GrpoConfig {
        group_size: 8,
        clip,
        lr,
        total_groups: groups,
        seed,
        decode: DecodeConfig::for_completion(task.completion_len(), SelectionMode::Planner),
        weights: RewardWeights::standard(),
    };
    let standard = TaskRewards {
        task: &task,
        teacher: None,
        weights: RewardWeights::standard(),
    };
    let scorer: &dyn maskplan_core::rewards::RewardFn = if adversarial {
        &AdversarialSlow
    } else {
        &standard
    };
    let t0 = Instant::now();
    let run = train_grpo(&mut model, &mut planner, scorer, &task, &cfg, None).unwrap();
    for log in run.logs.iter().step_by(5) {
        println!(
            "  clip={clip} group={} mean_prob={:.4} mean_nfe={:.2}",
            log.group, log.mean_unmask_prob, log.mean_nfe
        );
    }
    let last = run.logs.last().unwrap();
    let eval = eval_mean_prob(&model, &planner, &task, seed + 1000);
    println!(
        "clip={clip} groups={groups} lr={lr}: final log prob {:.4}, eval prob {:.4}, took {:.1}s",
        last.mean_unmask_prob,
        eval,
        t0.elapsed().as_secs_f64()
    );
}

fn efficiency_run(
    pretrain_steps: usize,
    corpus: usize,
    d_model: usize,
    init_epochs: usize,
    groups: usize,
    lr: f64,
    step_w: f64,
    seed: u64,
) {
    let dir = std::env::temp_dir().join(format!("calib-eff-{seed}-{pretrain_steps}-{groups}"));
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir;
    cfg.override_seed(seed);
    cfg.corpus_size = corpus;
    cfg.backbone.d_model = d_model;
    cfg.planner = PlannerConfig::matching(d_model, 2);
    cfg.pretrain = PretrainConfig {
        steps: pretrain_steps,
        batch_size: 8,
        lr: 1e-3,
    };
    cfg.teacher_pretrain = None;
    cfg.label_prompts = 60;
    cfg.planner_init.epochs = init_epochs;
    cfg.grpo.group_size = 8;
    cfg.grpo.total_groups = groups;
    cfg.grpo.lr = lr;
    cfg.grpo.clip = 0.0;
    cfg.grpo.weights.step = step_w;
    cfg.eval_prompts = 40;
    cfg.eval_trials = 5;

    let t0 = Instant::now();
    cmd_pretrain(&cfg).unwrap();
    println!("  pretrain done at {:.1}s", t0.elapsed().as_secs_f64());
    let init = cmd_init_planner(&cfg).unwrap();
    println!(
        "  planner init: agreement {:.3}, mean prob {:.3}, at {:.1}s",
        init.holdout_agreement,
        init.holdout_mean_prob,
        t0.elapsed().as_secs_f64()
    );
    let base = cmd_evaluate(&cfg, EvalStage::Init, SelectionMode::Planner, &[1.0], 5).unwrap();
    println!(
        "  baseline: acc {:.3}, nfe {:.3}",
        base[0].accuracy, base[0].mean_nfe
    );
    let arts = cmd_train_grpo(&cfg, false).unwrap();
    for log in arts.logs.iter().step_by(10) {
        println!(
            "  group={} acc={:.2} nfe={:.2} prob={:.3} r={:.3}",
            log.group, log.accuracy, log.mean_nfe, log.mean_unmask_prob, log.mean_r_total
        );
    }
    let tuned = cmd_evaluate(&cfg, EvalStage::Grpo, SelectionMode::Planner, &[1.0], 5).unwrap();
    println!(
        "steps={pretrain_steps} groups={groups} lr={lr} w_step={step_w}: base acc {:.3} nfe {:.3} -> grpo acc {:.3} nfe {:.3} (need <= {:.3}), took {:.1}s",
        base[0].accuracy,
        base[0].mean_nfe,
        tuned[0].accuracy,
        tuned[0].mean_nfe,
        0.75 * base[0].mean_nfe,
        t0.elapsed().as_secs_f64()
    );
    let sweep = cmd_evaluate(
        &cfg,
        EvalStage::Grpo,
        SelectionMode::Planner,
        &[0.5, 1.0, 2.0, 4.0],
        5,
    )
    .unwrap();
    for row in &sweep {
        println!("  alpha={} acc={:.3} nfe={:.3}", row.alpha, row.accuracy, row.mean_nfe);
    }
}

fn bimodal_run(groups: usize, seed: u64) {
    let dir = std::env::temp_dir().join(format!("calib-bimodal-{seed}-{groups}"));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let report = cmd_demo_bimodal(seed, &dir, groups).unwrap();
    println!(
        "groups={groups} seed={seed}: parallel {:.6}, sequential {:.6}, trained {:.6}, nfe {:.3}, took {:.1}s",
        report.parallel_cross_mass,
        report.sequential_cross_mass,
        report.trained_cross_mass,
        report.trained_mean_nfe,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("c06") => {
            let groups: usize = args.get(1).map_or(60, |s| s.parse().unwrap());
            let lr: f64 = args.get(2).map_or(3e-3, |s| s.parse().unwrap());
            let seed: u64 = args.get(3).map_or(33, |s| s.parse().unwrap());
            collapse_run(f64::NEG_INFINITY, true, groups, lr, seed);
            collapse_run(0.0, false, groups, lr, seed);
        }
        Some("c08") => {
            let steps: usize = args.get(1).map_or(1500, |s| s.parse().unwrap());
            let corpus: usize = args.get(2).map_or(400, |s| s.parse().unwrap());
            let d_model: usize = args.get(3).map_or(32, |s| s.parse().unwrap());
            let epochs: usize = args.get(4).map_or(30, |s| s.parse().unwrap());
            let groups: usize = args.get(5).map_or(60, |s| s.parse().unwrap());
            let lr: f64 = args.get(6).map_or(1e-3, |s| s.parse().unwrap());
            let step_w: f64 = args.get(7).map_or(1.0, |s| s.parse().unwrap());
            let seed: u64 = args.get(8).map_or(29, |s| s.parse().unwrap());
            efficiency_run(steps, corpus, d_model, epochs, groups, lr, step_w, seed);
        }
        Some("c10") => {
            let groups: usize = args.get(1).map_or(300, |s| s.parse().unwrap());
            let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
            bimodal_run(groups, seed);
        }
        _ => eprintln!("usage: calib c06|c08|c10 [params]"),
    }
}
