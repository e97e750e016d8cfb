//! The unmasking planner: one transformer block over the denoiser's hidden
//! states, conditioned on decoding time through adaptive layer norm, with a
//! zero-initialized scalar head so every position starts at probability 0.5.
//!
//! Inputs are the backbone's final hidden states plus two additive signals:
//! the token embedding rows (so the planner sees the tokens directly, not
//! only through the backbone) and a learned mask embedding at currently
//! masked positions. Time is the fraction of completion positions still
//! masked, mapped through fixed sinusoidal features, a learned mixer, and
//! zero-initialized scale/shift generators, so at init the AdaLN sites are
//! plain layer norm.

use crate::autodiff::{BoundParams, Graph, ParamMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    affine, init_embedding, init_linear, insert_block_params, mlp_block, multi_head_attention,
    silu, LN_EPS,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Width of the sinusoidal time feature vector.
pub const TIME_FEATURES: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl PlannerConfig {
    pub fn matching(d_model: usize, n_heads: usize) -> Self {
        PlannerConfig { d_model, n_heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "bad planner dims d_model {} n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlannerHead {
    pub config: PlannerConfig,
    pub params: ParamMap,
}

impl PlannerHead {
    pub fn init(config: PlannerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tf = TIME_FEATURES;
        let mut params = ParamMap::new();
        params.insert(
            "planner.mask_emb",
            init_embedding(rng, 1, d).reshaped(vec![d])?,
        );
        params.insert("planner.time.w", init_linear(rng, tf, tf));
        params.insert("planner.time.b", Tensor::zeros(vec![tf]));
        // zero-initialized generators: AdaLN degenerates to layer norm at
        // init and time conditioning switches on only through training
        for site in ["ada1", "ada2"] {
            for kind in ["scale", "shift"] {
                params.insert(
                    format!("planner.{site}.{kind}.w"),
                    Tensor::zeros(vec![tf, d]),
                );
                params.insert(format!("planner.{site}.{kind}.b"), Tensor::zeros(vec![d]));
            }
        }
        // the block's MLP is kept at hidden width d (not 4d) so the whole
        // head stays well under the backbone's parameter budget
        insert_block_params(&mut params, rng, "planner", d, d);
        params.insert("planner.out.w", Tensor::zeros(vec![d, 1]));
        params.insert("planner.out.b", Tensor::zeros(vec![1]));
        Ok(PlannerHead { config, params })
    }

    pub fn from_params(config: PlannerConfig, params: ParamMap) -> Result<Self> {
        let mut probe_rng = rand_chacha::rand_core::SeedableRng::seed_from_u64(0);
        let reference = PlannerHead::init(config.clone(), &mut probe_rng)?;
        for (name, tensor) in reference.params.iter() {
            if !params.contains(name) || params.get(name).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "planner checkpoint missing or misshaping {name}"
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("extra parameters in planner checkpoint".into()));
        }
        Ok(PlannerHead { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams::bind(g, &self.params)
    }

    /// Per-position unmask probabilities `[L]` in the open interval (0, 1).
    ///
    /// `hidden` and `tok_rows` are `[L, d]` outputs of the backbone on the
    /// same state; `masked[i]` marks positions currently carrying the mask
    /// token; `time_cond` is the fraction of completion positions still
    /// masked and must lie in [0, 1].
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        hidden: Var,
        tok_rows: Var,
        masked: &[bool],
        time_cond: f64,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&time_cond) {
            return Err(Error::invalid(format!(
                "time_cond {time_cond} outside [0, 1]"
            )));
        }
        let d = self.config.d_model;
        let shape = g.value(hidden).shape().to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] != masked.len() {
            return Err(Error::ShapeMismatch {
                op: "planner_forward",
                lhs: shape,
                rhs: vec![masked.len(), d],
            });
        }
        let l = masked.len();

        // additive inputs: token rows and the mask embedding at masked rows
        let with_tokens = g.add(hidden, tok_rows)?;
        let indicator_rows: Vec<f64> = masked
            .iter()
            .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(d))
            .collect();
        let indicator = g.constant(Tensor::new(vec![l, d], indicator_rows)?);
        let mask_term = g.mul(indicator, bound.var("planner.mask_emb"))?;
        let mut x = g.add(with_tokens, mask_term)?;

        // time conditioning
        let tfeat = g.constant(Tensor::new(vec![1, TIME_FEATURES], time_features(time_cond))?);
        let mixed = affine(g, tfeat, bound, "planner.time.w", "planner.time.b")?;
        let tvec = silu(g, mixed)?;
        let modulation = |g: &mut Graph, site: &str| -> Result<(Var, Var)> {
            let sc = affine(
                g,
                tvec,
                bound,
                &format!("planner.{site}.scale.w"),
                &format!("planner.{site}.scale.b"),
            )?;
            let sh = affine(
                g,
                tvec,
                bound,
                &format!("planner.{site}.shift.w"),
                &format!("planner.{site}.shift.b"),
            )?;
            Ok((g.reshape(sc, vec![d])?, g.reshape(sh, vec![d])?))
        };
        let (scale1, shift1) = modulation(g, "ada1")?;
        let (scale2, shift2) = modulation(g, "ada2")?;

        let ones = g.constant(Tensor::ones(vec![d]));
        let zeros = g.constant(Tensor::zeros(vec![d]));
        let adaln = |g: &mut Graph, x: Var, scale: Var, shift: Var| -> Result<Var> {
            let normed = g.layer_norm(x, ones, zeros, LN_EPS)?;
            let gain = g.add(scale, ones)?;
            let scaled = g.mul(normed, gain)?;
            g.add(scaled, shift)
        };

        let h1 = adaln(g, x, scale1, shift1)?;
        let attn = multi_head_attention(g, h1, bound, "planner.attn", self.config.n_heads, None)?;
        x = g.add(x, attn)?;
        let h2 = adaln(g, x, scale2, shift2)?;
        let m = mlp_block(g, h2, bound, "planner.mlp")?;
        x = g.add(x, m)?;

        let y = g.layer_norm(x, ones, zeros, LN_EPS)?;
        let logits = affine(g, y, bound, "planner.out.w", "planner.out.b")?;
        let flat = g.reshape(logits, vec![l])?;
        g.sigmoid(flat)
    }
}

/// Fixed sinusoidal features of the decoding-time fraction.
fn time_features(c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for j in 0..TIME_FEATURES / 2 {
        let freq = (2.0f64).powi(j as i32);
        out.push((std::f64::consts::TAU * freq * c).sin());
        out.push((std::f64::consts::TAU * freq * c).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_param_grad, grads_for, rel_err};
    use crate::model::{Transformer, TransformerConfig};
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_backbone() -> Transformer {
        let cfg = TransformerConfig {
            vocab_size: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            l_max: 12,
            attention: crate::model::AttentionKind::Bidirectional,
        };
        Transformer::init(cfg, &mut stream(1, "bb")).unwrap()
    }

    fn probs_for(
        model: &Transformer,
        planner: &PlannerHead,
        tokens: &[u32],
        masked: &[bool],
        time_cond: f64,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let mb = model.bind(&mut g);
        let out = model.forward_bound(&mut g, &mb, tokens).unwrap();
        let pb = planner.bind(&mut g);
        let p = planner
            .forward_bound(&mut g, &pb, out.hidden, out.tok_rows, masked, time_cond)
            .unwrap();
        g.value(p).data().to_vec()
    }

    #[test]
    fn zero_initialized_head_emits_exactly_half() {
        let model = tiny_backbone();
        let planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(2, "p")).unwrap();
        let probs = probs_for(&model, &planner, &[1, 7, 7, 3], &[false, true, true, false], 0.5);
        assert!(probs.iter().all(|&p| p == 0.5), "{probs:?}");
    }

    #[test]
    fn probabilities_stay_inside_the_open_unit_interval() {
        let model = tiny_backbone();
        let mut planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(3, "p")).unwrap();
        let mut r = stream(4, "noise");
        for name in ["planner.out.w", "planner.out.b"] {
            for v in planner.params.get_mut(name).data_mut() {
                *v = r.gen_range(-3.0..3.0);
            }
        }
        let probs = probs_for(&model, &planner, &[1, 7, 7, 3], &[false, true, true, false], 0.25);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0), "{probs:?}");
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_outputs() {
        let model = tiny_backbone();
        let planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(5, "p")).unwrap();
        let a = probs_for(&model, &planner, &[1, 7, 2, 7], &[false, true, false, true], 0.5);
        let b = probs_for(&model, &planner, &[1, 7, 2, 7], &[false, true, false, true], 0.5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn nonzero_time_projection_separates_time_conditions() {
        let model = tiny_backbone();
        let mut planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(6, "p")).unwrap();
        let mut r = stream(7, "noise");
        // activate the path: generators and output head both nonzero
        for name in [
            "planner.ada1.scale.w",
            "planner.ada1.shift.w",
            "planner.out.w",
        ] {
            for v in planner.params.get_mut(name).data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
        let masked = [false, true, true, true];
        let a = probs_for(&model, &planner, &[1, 7, 7, 7], &masked, 0.25);
        let b = probs_for(&model, &planner, &[1, 7, 7, 7], &masked, 0.75);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "time conditioning had no effect: {a:?} vs {b:?}");
    }

    #[test]
    fn time_cond_outside_unit_interval_is_rejected() {
        let model = tiny_backbone();
        let planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(8, "p")).unwrap();
        let mut g = Graph::new();
        let mb = model.bind(&mut g);
        let out = model.forward_bound(&mut g, &mb, &[1, 7]).unwrap();
        let pb = planner.bind(&mut g);
        let err = planner.forward_bound(&mut g, &pb, out.hidden, out.tok_rows, &[false, true], 1.5);
        assert!(err.is_err());
    }

    #[test]
    fn planner_stays_under_fifteen_percent_of_default_backbone() {
        let backbone_cfg = TransformerConfig::default_denoiser(30);
        let backbone = Transformer::init(backbone_cfg.clone(), &mut stream(1, "bb")).unwrap();
        let planner = PlannerHead::init(
            PlannerConfig::matching(backbone_cfg.d_model, backbone_cfg.n_heads),
            &mut stream(1, "p"),
        )
        .unwrap();
        let ratio = planner.params.numel() as f64 / backbone.params.numel() as f64;
        assert!(
            ratio < 0.15,
            "planner/backbone parameter ratio {ratio:.4} (planner {}, backbone {})",
            planner.params.numel(),
            backbone.params.numel()
        );
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let model = tiny_backbone();
        let mut planner =
            PlannerHead::init(PlannerConfig::matching(16, 2), &mut stream(10, "p")).unwrap();
        let mut r = stream(11, "noise");
        for v in planner.params.get_mut("planner.out.w").data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let tokens = [1u32, 7, 7, 3];
        let masked = [false, true, true, false];
        let weights: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();

        let loss_of = |bb: &ParamMap, pp: &ParamMap| -> f64 {
            let m = Transformer {
                config: model.config.clone(),
                params: bb.clone(),
            };
            let pl = PlannerHead {
                config: planner.config.clone(),
                params: pp.clone(),
            };
            let mut g = Graph::new();
            let mb = m.bind(&mut g);
            let out = m.forward_bound(&mut g, &mb, &tokens).unwrap();
            let pb = pl.bind(&mut g);
            let p = pl
                .forward_bound(&mut g, &pb, out.hidden, out.tok_rows, &masked, 0.5)
                .unwrap();
            g.value(p)
                .data()
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| x * w)
                .sum()
        };

        let mut g = Graph::new();
        let mb = model.bind(&mut g);
        let out = model.forward_bound(&mut g, &mb, &tokens).unwrap();
        let pb = planner.bind(&mut g);
        let p = planner
            .forward_bound(&mut g, &pb, out.hidden, out.tok_rows, &masked, 0.5)
            .unwrap();
        let wv = g.constant(Tensor::from_vec(weights.clone()));
        let prod = g.mul(p, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let pgrads = grads_for(&pb, &grads);
        let bgrads = grads_for(&mb, &grads);

        // planner parameter
        let fd = fd_param_grad(&planner.params, "planner.attn.wq", 3, 1e-5, |pp| {
            loss_of(&model.params, pp)
        });
        let analytic = pgrads.get("planner.attn.wq").map(|t| t.data()[3]).unwrap_or(0.0);
        assert!(rel_err(analytic, fd) < 1e-4, "planner: {analytic} vs {fd}");

        // gradient also flows into the backbone through hidden states
        let fd = fd_param_grad(&model.params, "l0.attn.wv", 5, 1e-5, |bb| {
            loss_of(bb, &planner.params)
        });
        let analytic = bgrads.get("l0.attn.wv").map(|t| t.data()[5]).unwrap_or(0.0);
        assert!(rel_err(analytic, fd) < 1e-4, "backbone: {analytic} vs {fd}");
        assert!(analytic != 0.0, "no gradient reached the backbone");
    }
}
