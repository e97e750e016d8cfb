//! The shared transformer: token + learned position embeddings, pre-norm
//! blocks with SiLU MLPs, a final layer norm, and a vocabulary head.
//! Bidirectional attention makes it the masked-diffusion denoiser; causal
//! attention makes it the autoregressive teacher.

use crate::autodiff::{BoundParams, Graph, ParamMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    affine, causal_mask, init_embedding, init_linear, insert_block_params, layer_norm_named,
    mlp_block, multi_head_attention,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub l_max: usize,
    pub attention: AttentionKind,
}

impl TransformerConfig {
    /// Reference desk-scale denoiser dimensions.
    pub fn default_denoiser(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            l_max: 64,
            attention: AttentionKind::Bidirectional,
        }
    }

    pub fn causal(mut self) -> Self {
        self.attention = AttentionKind::Causal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.l_max == 0 {
            return Err(Error::Config("zero transformer dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        Ok(())
    }
}

pub struct TransformerOut {
    /// `[L, m]` clean-token logits.
    pub logits: Var,
    /// `[L, d]` final-norm hidden states, input to the planner.
    pub hidden: Var,
    /// `[L, d]` token embedding rows, re-injected by the planner.
    pub tok_rows: Var,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamMap,
}

impl Transformer {
    pub fn init(config: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.d_model, config.vocab_size);
        let mut params = ParamMap::new();
        params.insert("tok_emb", init_embedding(rng, m, d));
        params.insert("pos_emb", init_embedding(rng, config.l_max, d));
        for layer in 0..config.n_layers {
            let prefix = format!("l{layer}");
            params.insert(format!("{prefix}.ln1.g"), Tensor::ones(vec![d]));
            params.insert(format!("{prefix}.ln1.b"), Tensor::zeros(vec![d]));
            params.insert(format!("{prefix}.ln2.g"), Tensor::ones(vec![d]));
            params.insert(format!("{prefix}.ln2.b"), Tensor::zeros(vec![d]));
            insert_block_params(&mut params, rng, &prefix, d, 4 * d);
        }
        params.insert("lnf.g", Tensor::ones(vec![d]));
        params.insert("lnf.b", Tensor::zeros(vec![d]));
        params.insert("head.w", init_linear(rng, d, m));
        params.insert("head.b", Tensor::zeros(vec![m]));
        Ok(Transformer { config, params })
    }

    /// Rebuild from checkpointed parameters, validating shapes against the
    /// config by reconstructing the expected layout.
    pub fn from_params(config: TransformerConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let mut probe_rng = rand_chacha::rand_core::SeedableRng::seed_from_u64(0);
        let reference = Transformer::init(config.clone(), &mut probe_rng)?;
        for (name, tensor) in reference.params.iter() {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            if params.get(name).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(name).shape(),
                    tensor.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("extra parameters in checkpoint".into()));
        }
        Ok(Transformer { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, &self.params)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.l_max {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds l_max {}",
                tokens.len(),
                self.config.l_max
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass on an already-bound parameter set.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: &[u32],
    ) -> Result<TransformerOut> {
        self.check_tokens(tokens)?;
        let l = tokens.len();
        let token_ix: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos_ix: Vec<usize> = (0..l).collect();
        let tok_rows = g.gather(bound.var("tok_emb"), &token_ix)?;
        let pos_rows = g.gather(bound.var("pos_emb"), &pos_ix)?;
        let mut x = g.add(tok_rows, pos_rows)?;
        let mask = match self.config.attention {
            AttentionKind::Bidirectional => None,
            AttentionKind::Causal => Some(causal_mask(g, l)),
        };
        for layer in 0..self.config.n_layers {
            let p = format!("l{layer}");
            let h = layer_norm_named(g, x, bound, &format!("{p}.ln1.g"), &format!("{p}.ln1.b"))?;
            let attn =
                multi_head_attention(g, h, bound, &format!("{p}.attn"), self.config.n_heads, mask)?;
            x = g.add(x, attn)?;
            let h2 = layer_norm_named(g, x, bound, &format!("{p}.ln2.g"), &format!("{p}.ln2.b"))?;
            let m = mlp_block(g, h2, bound, &format!("{p}.mlp"))?;
            x = g.add(x, m)?;
        }
        let hidden = layer_norm_named(g, x, bound, "lnf.g", "lnf.b")?;
        let logits = affine(g, hidden, bound, "head.w", "head.b")?;
        Ok(TransformerOut {
            logits,
            hidden,
            tok_rows,
        })
    }

    /// Value-only forward, fresh throwaway graph.
    pub fn logits_value(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward_bound(&mut g, &bound, tokens)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Per-token conditional log-probabilities `log p(c_i | q, c_{<i})` of a
/// completion under a causal teacher. Runs the teacher on the prompt plus
/// completion and reads the log-softmax row one position to the left of
/// each completion token.
pub fn teacher_logprobs(
    teacher: &Transformer,
    prompt: &[u32],
    completion: &[u32],
) -> Result<Vec<f64>> {
    if teacher.config.attention != AttentionKind::Causal {
        return Err(Error::invalid("teacher must use causal attention"));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("teacher scoring needs a nonempty prompt"));
    }
    if completion.is_empty() {
        return Err(Error::invalid("teacher scoring needs a nonempty completion"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(completion);
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g);
    let out = teacher.forward_bound(&mut g, &bound, &tokens)?;
    let logp = g.log_softmax(out.logits)?;
    let table = g.value(logp);
    let mut scores = Vec::with_capacity(completion.len());
    for (i, &c) in completion.iter().enumerate() {
        let row = prompt.len() + i - 1;
        scores.push(table.get(&[row, c as usize]));
    }
    Ok(scores)
}
