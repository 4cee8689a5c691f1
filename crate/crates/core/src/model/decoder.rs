use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lora::{check_rank, LoraAdapter, LoraTargets, MergeOutcome};
use super::{param_name, ModelConfig, Role, INIT_STD};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A projection `x · weight`, optionally with a LoRA adapter on top.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    fn new(weight: Tensor) -> Self {
        Linear {
            weight,
            adapter: None,
        }
    }
}

/// One pre-norm decoder block: attention then gated MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Tensor,
    pub wgate: Linear,
    pub wup: Linear,
    pub wdown: Linear,
}

impl Block {
    pub fn linear(&self, role: Role) -> &Linear {
        match role {
            Role::Wq => &self.wq,
            Role::Wk => &self.wk,
            Role::Wv => &self.wv,
            Role::Wo => &self.wo,
            Role::Wgate => &self.wgate,
            Role::Wup => &self.wup,
            Role::Wdown => &self.wdown,
        }
    }

    pub fn linear_mut(&mut self, role: Role) -> &mut Linear {
        match role {
            Role::Wq => &mut self.wq,
            Role::Wk => &mut self.wk,
            Role::Wv => &mut self.wv,
            Role::Wo => &mut self.wo,
            Role::Wgate => &mut self.wgate,
            Role::Wup => &mut self.wup,
            Role::Wdown => &mut self.wdown,
        }
    }

    /// Width of the attention projections (`heads × head_dim`).
    pub fn attn_width(&self) -> usize {
        self.wq.weight.cols()
    }

    pub fn ff_width(&self) -> usize {
        self.wgate.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.attn_norm.numel()
            + self.mlp_norm.numel()
            + Role::ALL
                .iter()
                .map(|&r| self.linear(r).weight.numel())
                .sum::<usize>()
    }
}

/// Decoder-only transformer with learned absolute positions and RMS norms.
///
/// Per-block widths may shrink below the config after structural pruning;
/// the config keeps describing the dense architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub tok_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

/// What to differentiate during a recorded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Every base parameter.
    Base,
    /// Only LoRA factors; base matrices are frozen.
    Adapters,
}

/// Output of [`DecoderModel::record`].
pub struct Recorded {
    pub logits: NodeId,
    /// Tape handles of the differentiated parameters, by name.
    pub params: Vec<(String, NodeId)>,
}

impl DecoderModel {
    /// Normal(0, 0.02) matrices and unit norm gains, seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let mut randn = |shape: &[usize]| Tensor::randn(shape, INIT_STD, &mut rng);
        let tok_embedding = randn(&[cfg.vocab_size, d]);
        let pos_embedding = randn(&[cfg.max_seq, d]);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                attn_norm: Tensor::ones(&[d]),
                wq: Linear::new(randn(&[d, d])),
                wk: Linear::new(randn(&[d, d])),
                wv: Linear::new(randn(&[d, d])),
                wo: Linear::new(randn(&[d, d])),
                mlp_norm: Tensor::ones(&[d]),
                wgate: Linear::new(randn(&[d, cfg.d_ff])),
                wup: Linear::new(randn(&[d, cfg.d_ff])),
                wdown: Linear::new(randn(&[cfg.d_ff, d])),
            })
            .collect();
        let head = randn(&[d, cfg.vocab_size]);
        Ok(DecoderModel {
            config: cfg.clone(),
            tok_embedding,
            pos_embedding,
            blocks,
            final_norm: Tensor::ones(&[d]),
            head,
        })
    }

    pub fn n_heads(&self, layer: usize) -> usize {
        self.blocks[layer].attn_width() / self.config.head_dim
    }

    pub fn d_ff(&self, layer: usize) -> usize {
        self.blocks[layer].ff_width()
    }

    /// Base parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_embedding".to_string(), &self.tok_embedding),
            ("pos_embedding".to_string(), &self.pos_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &b.attn_norm));
            for role in &Role::ALL[..4] {
                out.push((param_name(l, *role), &b.linear(*role).weight));
            }
            out.push((format!("layers.{l}.mlp_norm"), &b.mlp_norm));
            for role in &Role::ALL[4..] {
                out.push((param_name(l, *role), &b.linear(*role).weight));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "tok_embedding" => return Some(&mut self.tok_embedding),
            "pos_embedding" => return Some(&mut self.pos_embedding),
            "final_norm" => return Some(&mut self.final_norm),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (layer, field) = rest.split_once('.')?;
        let block = self.blocks.get_mut(layer.parse::<usize>().ok()?)?;
        match field {
            "attn_norm" => Some(&mut block.attn_norm),
            "mlp_norm" => Some(&mut block.mlp_norm),
            f => Role::parse(f).map(|r| &mut block.linear_mut(r).weight),
        }
    }

    /// LoRA factors as `(name, tensor)`, named `<matrix>.lora_gamma` / `.lora_beta`.
    pub fn named_adapter_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for role in Role::ALL {
                if let Some(a) = &b.linear(role).adapter {
                    let base = param_name(l, role);
                    out.push((format!("{base}.lora_gamma"), &a.gamma));
                    out.push((format!("{base}.lora_beta"), &a.beta));
                }
            }
        }
        out
    }

    pub fn adapter_param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (base, factor) = name.rsplit_once('.')?;
        let rest = base.strip_prefix("layers.")?;
        let (layer, role) = rest.split_once('.')?;
        let block = self.blocks.get_mut(layer.parse::<usize>().ok()?)?;
        let adapter = block.linear_mut(Role::parse(role)?).adapter.as_mut()?;
        match factor {
            "lora_gamma" => Some(&mut adapter.gamma),
            "lora_beta" => Some(&mut adapter.beta),
            _ => None,
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| Role::ALL.iter().any(|&r| b.linear(r).adapter.is_some()))
    }

    /// Base parameter count (adapters excluded).
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks that every tensor agrees with its neighbours.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Structural(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
        };
        expect("tok_embedding", &self.tok_embedding, &[c.vocab_size, d])?;
        expect("pos_embedding", &self.pos_embedding, &[c.max_seq, d])?;
        expect("final_norm", &self.final_norm, &[d])?;
        expect("head", &self.head, &[d, c.vocab_size])?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Structural(format!(
                "{} blocks for n_layers {}",
                self.blocks.len(),
                c.n_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let a = b.wq.weight.shape().get(1).copied().unwrap_or(0);
            let f = b.wgate.weight.shape().get(1).copied().unwrap_or(0);
            if a % c.head_dim != 0 {
                return Err(Error::Structural(format!(
                    "layer {l}: attention width {a} is not a multiple of head_dim {}",
                    c.head_dim
                )));
            }
            let n = |r: Role| param_name(l, r);
            expect(&format!("layers.{l}.attn_norm"), &b.attn_norm, &[d])?;
            expect(&format!("layers.{l}.mlp_norm"), &b.mlp_norm, &[d])?;
            for (role, shape) in [
                (Role::Wq, [d, a]),
                (Role::Wk, [d, a]),
                (Role::Wv, [d, a]),
                (Role::Wo, [a, d]),
                (Role::Wgate, [d, f]),
                (Role::Wup, [d, f]),
                (Role::Wdown, [f, d]),
            ] {
                let lin = b.linear(role);
                expect(&n(role), &lin.weight, &shape)?;
                if let Some(ad) = &lin.adapter {
                    expect(&format!("{}.lora_gamma", n(role)), &ad.gamma, &[shape[0], ad.rank])?;
                    expect(&format!("{}.lora_beta", n(role)), &ad.beta, &[ad.rank, shape[1]])?;
                }
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {bad} outside vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `tokens` on `tape`.
    pub fn record(&self, tape: &mut Tape, tokens: &[usize], trainable: Trainable) -> Result<Recorded> {
        self.check_tokens(tokens)?;
        let mut rec = Recorder {
            tape,
            params: Vec::new(),
            trainable,
        };
        let base = trainable == Trainable::Base;

        let tok = rec.leaf("tok_embedding".into(), &self.tok_embedding, base);
        let pos = rec.leaf("pos_embedding".into(), &self.pos_embedding, base);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let te = rec.tape.embedding(tok, tokens)?;
        let pe = rec.tape.embedding(pos, &positions)?;
        let mut x = rec.tape.add(te, pe)?;

        for (l, b) in self.blocks.iter().enumerate() {
            let an = rec.leaf(format!("layers.{l}.attn_norm"), &b.attn_norm, base);
            let h = rec.tape.rms_norm(x, an)?;
            let q = rec.linear(l, Role::Wq, b, h)?;
            let k = rec.linear(l, Role::Wk, b, h)?;
            let v = rec.linear(l, Role::Wv, b, h)?;
            let att = rec.tape.causal_attention(q, k, v, self.config.head_dim)?;
            let o = rec.linear(l, Role::Wo, b, att)?;
            x = rec.tape.add(x, o)?;

            let mn = rec.leaf(format!("layers.{l}.mlp_norm"), &b.mlp_norm, base);
            let h = rec.tape.rms_norm(x, mn)?;
            let gate = rec.linear(l, Role::Wgate, b, h)?;
            let up = rec.linear(l, Role::Wup, b, h)?;
            let act = rec.tape.silu(gate);
            let m = rec.tape.mul(act, up)?;
            let down = rec.linear(l, Role::Wdown, b, m)?;
            x = rec.tape.add(x, down)?;
        }

        let fnorm = rec.leaf("final_norm".into(), &self.final_norm, base);
        let xn = rec.tape.rms_norm(x, fnorm)?;
        let head = rec.leaf("head".into(), &self.head, base);
        let logits = rec.tape.matmul(xn, head)?;
        Ok(Recorded {
            logits,
            params: rec.params,
        })
    }

    /// Logits `[seq × vocab]` for `tokens`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, Trainable::Nothing)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Mean next-token cross-entropy over `seq` (inputs `seq[..n-1]`, targets `seq[1..]`).
    pub fn sequence_loss(&self, seq: &[usize]) -> Result<f64> {
        let (inputs, targets) = split_sequence(seq)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, inputs, Trainable::Nothing)?;
        let loss = tape.cross_entropy(rec.logits, targets)?;
        Ok(tape.value(loss).item())
    }

    /// Next-token loss of `seq` and its gradients for the selected parameters.
    pub fn sequence_grads(
        &self,
        seq: &[usize],
        trainable: Trainable,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (inputs, targets) = split_sequence(seq)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, inputs, trainable)?;
        let loss = tape.cross_entropy(rec.logits, targets)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let map = rec
            .params
            .into_iter()
            .map(|(name, id)| {
                let g = grads.take(id).expect("leaf gradient present");
                (name, g)
            })
            .collect();
        Ok((value, map))
    }

    /// Attaches a fresh adapter to every selected matrix.
    ///
    /// Matrices narrower than `rank` (e.g. fully pruned attention) are skipped.
    pub fn attach_lora(
        &mut self,
        targets: &LoraTargets,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<usize> {
        check_rank(rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attached = 0;
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for role in Role::ALL {
                if !targets.matches(l, role) {
                    continue;
                }
                let lin = b.linear_mut(role);
                if lin.adapter.is_some() {
                    return Err(Error::Input(format!(
                        "{} already carries an adapter",
                        param_name(l, role)
                    )));
                }
                let (rows, cols) = (lin.weight.rows(), lin.weight.cols());
                if rows.min(cols) < rank {
                    continue;
                }
                lin.adapter = Some(LoraAdapter {
                    gamma: Tensor::randn(&[rows, rank], 1.0 / (rows as f64).sqrt(), &mut rng),
                    beta: Tensor::zeros(&[rank, cols]),
                    rank,
                    alpha,
                });
                attached += 1;
            }
        }
        if attached == 0 {
            return Err(Error::Input(format!(
                "LoRA selector {targets:?} with rank {rank} matches no matrix"
            )));
        }
        Ok(attached)
    }

    /// Folds every adapter into its base matrix and detaches it.
    pub fn merge_lora(&mut self) -> Result<MergeOutcome> {
        let mut merged = 0;
        for b in &mut self.blocks {
            for role in Role::ALL {
                let lin = b.linear_mut(role);
                if let Some(ad) = lin.adapter.take() {
                    lin.weight.add_assign(&ad.delta()?)?;
                    merged += 1;
                }
            }
        }
        if merged == 0 {
            log::warn!("merge_lora: no adapters attached; model unchanged");
            return Ok(MergeOutcome::NothingToMerge);
        }
        Ok(MergeOutcome::Merged(merged))
    }
}

struct Recorder<'a> {
    tape: &'a mut Tape,
    params: Vec<(String, NodeId)>,
    trainable: Trainable,
}

impl Recorder<'_> {
    fn leaf(&mut self, name: String, t: &Tensor, grad: bool) -> NodeId {
        let id = self.tape.leaf(t.clone().with_requires_grad(grad));
        if grad {
            self.params.push((name, id));
        }
        id
    }

    fn linear(&mut self, layer: usize, role: Role, block: &Block, input: NodeId) -> Result<NodeId> {
        let linear = block.linear(role);
        let name = param_name(layer, role);
        let w = self.leaf(name.clone(), &linear.weight, self.trainable == Trainable::Base);
        let y = self.tape.matmul(input, w)?;
        let Some(ad) = &linear.adapter else {
            return Ok(y);
        };
        let train = self.trainable == Trainable::Adapters;
        let g = self.leaf(format!("{name}.lora_gamma"), &ad.gamma, train);
        let be = self.leaf(format!("{name}.lora_beta"), &ad.beta, train);
        let xg = self.tape.matmul(input, g)?;
        let xgb = self.tape.matmul(xg, be)?;
        let scaled = self.tape.scale(xgb, ad.scale());
        self.tape.add(y, scaled)
    }
}

pub(crate) fn split_sequence(seq: &[usize]) -> Result<(&[usize], &[usize])> {
    if seq.len() < 2 {
        return Err(Error::Input(format!(
            "next-token loss needs at least 2 tokens, got {}",
            seq.len()
        )));
    }
    Ok((&seq[..seq.len() - 1], &seq[1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig::new(32, 16, 2, 2, 24, 12, 5).unwrap()
    }

    fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..vocab)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = DecoderModel::init(&small()).unwrap();
        let b = DecoderModel::init(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed += 1;
        assert_ne!(a, DecoderModel::init(&other).unwrap());
    }

    #[test]
    fn parameter_count_matches_shape_enumeration() {
        let cfg = ModelConfig::new(256, 64, 4, 4, 256, 128, 0).unwrap();
        let model = DecoderModel::init(&cfg).unwrap();
        // embeddings + 4 × (2 norms + 4 attention + 3 MLP) + final norm + head
        let by_hand = 256 * 64 + 128 * 64 + 4 * (2 * 64 + 4 * 64 * 64 + 3 * 64 * 256) + 64 + 64 * 256;
        assert_eq!(by_hand, 303_680);
        assert_eq!(model.param_count(), by_hand);
        assert_eq!(cfg.dense_param_count(), by_hand);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let model = DecoderModel::init(&small()).unwrap();
        assert_eq!(model.forward(&[3]).unwrap().shape(), &[1, 32]);
        assert_eq!(model.forward(&[1; 12]).unwrap().shape(), &[12, 32]);
        assert!(matches!(model.forward(&[1; 13]), Err(Error::Input(_))));
        assert!(matches!(model.forward(&[32]), Err(Error::Input(_))));
    }

    #[test]
    fn forward_is_causal() {
        let model = DecoderModel::init(&small()).unwrap();
        let toks = random_tokens(10, 32, 1);
        let base = model.forward(&toks).unwrap();
        for t in 0..9 {
            let mut edited = toks.clone();
            for x in &mut edited[t + 1..] {
                *x = (*x + 7) % 32;
            }
            let out = model.forward(&edited).unwrap();
            assert_eq!(&base.data()[..(t + 1) * 32], &out.data()[..(t + 1) * 32]);
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut model = DecoderModel::init(&small()).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for n in names {
            model.param_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let out = model.forward(&[1, 2, 3]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_mut_reaches_every_named_param() {
        let mut model = DecoderModel::init(&small()).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for n in &names {
            assert!(model.param_mut(n).is_some(), "{n}");
        }
        assert!(model.param_mut("layers.9.wq").is_none());
    }

    #[test]
    fn fresh_adapters_leave_outputs_bit_identical() {
        let base = DecoderModel::init(&small()).unwrap();
        let mut adapted = base.clone();
        assert_eq!(adapted.attach_lora(&LoraTargets::default(), 8, 16.0, 1).unwrap(), 14);
        let toks = random_tokens(8, 32, 2);
        assert_eq!(base.forward(&toks).unwrap(), adapted.forward(&toks).unwrap());
    }

    #[test]
    fn adapter_gradients_leave_base_frozen() {
        let mut model = DecoderModel::init(&small()).unwrap();
        model.attach_lora(&LoraTargets::default(), 4, 8.0, 1).unwrap();
        let toks = random_tokens(8, 32, 3);
        let (_, grads) = model.sequence_grads(&toks, Trainable::Adapters).unwrap();
        assert_eq!(grads.len(), 28);
        assert!(grads.keys().all(|k| k.contains(".lora_")));
        // gamma gets no gradient signal while beta is zero; beta does
        assert!(grads["layers.0.wq.lora_beta"].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn lora_selector_errors() {
        let mut model = DecoderModel::init(&small()).unwrap();
        let none = LoraTargets {
            roles: vec![],
            layers: None,
        };
        assert!(matches!(model.attach_lora(&none, 4, 8.0, 0), Err(Error::Input(_))));
        let missing_layer = LoraTargets {
            roles: vec![Role::Wq],
            layers: Some(vec![7]),
        };
        assert!(model.attach_lora(&missing_layer, 4, 8.0, 0).is_err());
        assert!(model.attach_lora(&LoraTargets::default(), 0, 8.0, 0).is_err());
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut model = DecoderModel::init(&small()).unwrap();
        model.attach_lora(&LoraTargets::default(), 4, 8.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names: Vec<String> = model.named_adapter_params().into_iter().map(|(n, _)| n).collect();
        for n in names {
            for v in model.adapter_param_mut(&n).unwrap().data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let toks = random_tokens(12, 32, 5);
        let before = model.forward(&toks).unwrap();
        assert_eq!(model.merge_lora().unwrap(), MergeOutcome::Merged(14));
        assert!(!model.has_adapters());
        let after = model.forward(&toks).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-10);
        assert_eq!(model.merge_lora().unwrap(), MergeOutcome::NothingToMerge);
    }

    #[test]
    fn merging_zero_adapters_is_bit_identical() {
        let base = DecoderModel::init(&small()).unwrap();
        let mut m = base.clone();
        m.attach_lora(&LoraTargets::default(), 8, 16.0, 0).unwrap();
        m.merge_lora().unwrap();
        assert_eq!(m, base);
    }

    #[test]
    fn short_sequences_are_rejected_for_loss() {
        let model = DecoderModel::init(&small()).unwrap();
        assert!(model.sequence_loss(&[1]).is_err());
        assert!(model.sequence_loss(&[1, 2]).unwrap() > 0.0);
    }
}
