//! Seeded dataset builders for the verifiable tasks. Every example is a
//! prompt drawn from the task distribution paired with its gold completion,
//! so pretraining corpora, teacher data, and evaluation prompts all come
//! from one sampler and a stream tag.

use crate::error::Result;
use crate::mdlm::MaskedSequence;
use crate::rewards::{task_vocab, TaskSpec};
use rand_chacha::ChaCha8Rng;

/// Full clean sequences (prompt followed by the gold completion) for
/// denoiser pretraining.
pub fn task_sequences(task: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<MaskedSequence>> {
    let vocab = task_vocab();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = task.sample_prompt(rng);
        let completion = task.gold_completion(&prompt)?;
        let mut tokens = prompt;
        let prompt_len = tokens.len();
        tokens.extend_from_slice(&completion);
        out.push(MaskedSequence::new(tokens, prompt_len, vocab)?);
    }
    Ok(out)
}

/// (prompt, gold completion) pairs in the shape the teacher trainer wants.
pub fn task_pairs(task: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = task.sample_prompt(rng);
        let completion = task.gold_completion(&prompt)?;
        out.push((prompt, completion));
    }
    Ok(out)
}

/// Prompts alone, for evaluation sweeps.
pub fn task_prompts(task: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    (0..n).map(|_| task.sample_prompt(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::TaskKind;
    use crate::rng::stream;

    #[test]
    fn sequences_verify_under_their_own_task() {
        for kind in [
            TaskKind::ModularAddition,
            TaskKind::SequenceSort,
            TaskKind::PatternCopy,
        ] {
            let task = TaskSpec::new(kind);
            let mut rng = stream(90, "corpus");
            let seqs = task_sequences(&task, 50, &mut rng).unwrap();
            assert_eq!(seqs.len(), 50);
            for s in &seqs {
                assert_eq!(s.prompt_len, task.prompt_len());
                assert_eq!(s.completion_len(), task.completion_len());
                assert!(s.is_mask_free(task_vocab()));
                assert!(
                    task.verify(&s.tokens[..s.prompt_len], s.completion()),
                    "gold data must verify"
                );
            }
        }
    }

    #[test]
    fn pairs_and_sequences_agree_on_the_same_stream() {
        let task = TaskSpec::new(TaskKind::SequenceSort);
        let seqs = task_sequences(&task, 20, &mut stream(91, "x")).unwrap();
        let pairs = task_pairs(&task, 20, &mut stream(91, "x")).unwrap();
        for (s, (p, c)) in seqs.iter().zip(&pairs) {
            assert_eq!(&s.tokens[..s.prompt_len], p.as_slice());
            assert_eq!(s.completion(), c.as_slice());
        }
    }

    #[test]
    fn prompt_sampling_is_deterministic_per_stream() {
        let task = TaskSpec::new(TaskKind::ModularAddition);
        let a = task_prompts(&task, 10, &mut stream(92, "p"));
        let b = task_prompts(&task, 10, &mut stream(92, "p"));
        assert_eq!(a, b);
        let c = task_prompts(&task, 10, &mut stream(93, "p"));
        assert_ne!(a, c);
    }
}
