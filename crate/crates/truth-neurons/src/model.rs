//! Toy decoder-only transformer with named neuron hook sites and
//! activation overrides.
//!
//! Pre-norm residual blocks, learned absolute positions, bias-free
//! projections. Two hook sites per layer: the post-GELU MLP hidden vector
//! (width `d_ff`) and the concatenated per-head attention output entering
//! the output projection (width `d_model`).

use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range (vocab_size {vocab_size})")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("no such neuron: {0}")]
    NoSuchNeuron(String),
    #[error("override alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v < 1 {
                problems.push(format!("{name} must be >= 1, got {v}"));
            }
        }
        if self.n_heads >= 1 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Layer type of a hook site. Canonical order is Mlp before Attn.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Mlp,
    Attn,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Mlp => write!(f, "mlp"),
            Site::Attn => write!(f, "attn"),
        }
    }
}

/// Address of one neuron site: (layer, layer type, within-layer index).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NeuronId {
    pub layer: usize,
    pub site: Site,
    pub index: usize,
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}/{}/{}", self.layer, self.site, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverrideMode {
    SetToValue(f64),
    /// Activation becomes alpha × its natural value (zero baseline).
    ScaleTowardBaseline(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScope {
    /// Final prompt position only.
    AttributionPosition,
    AllPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationOverride {
    pub neuron: NeuronId,
    pub mode: OverrideMode,
    pub scope: PositionScope,
}

/// Path probe for integrated gradients: the listed indices at one site and
/// one position are replaced by alpha × their natural value, routed through
/// a fresh leaf whose gradient slot then holds ∂f/∂n for each index.
#[derive(Debug, Clone)]
pub struct IgProbe {
    pub layer: usize,
    pub site: Site,
    pub indices: Vec<usize>,
    pub alpha: f64,
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A loaded model is immutable during forward passes; each pass owns a
/// private tape, so concurrent forwards over a shared model are safe.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<Param>,
}

/// Parameter indices in declaration (= checkpoint) order.
struct Layout;

impl Layout {
    const TOK_EMB: usize = 0;
    const POS_EMB: usize = 1;
    const PER_LAYER: usize = 8;

    fn layer_base(l: usize) -> usize {
        2 + l * Self::PER_LAYER
    }
    fn attn_qkv(l: usize) -> usize {
        Self::layer_base(l)
    }
    fn attn_out(l: usize) -> usize {
        Self::layer_base(l) + 1
    }
    fn mlp_in(l: usize) -> usize {
        Self::layer_base(l) + 2
    }
    fn mlp_out(l: usize) -> usize {
        Self::layer_base(l) + 3
    }
    fn ln1_gain(l: usize) -> usize {
        Self::layer_base(l) + 4
    }
    fn ln1_bias(l: usize) -> usize {
        Self::layer_base(l) + 5
    }
    fn ln2_gain(l: usize) -> usize {
        Self::layer_base(l) + 6
    }
    fn ln2_bias(l: usize) -> usize {
        Self::layer_base(l) + 7
    }
    fn final_ln_gain(n_layers: usize) -> usize {
        2 + n_layers * Self::PER_LAYER
    }
    fn final_ln_bias(n_layers: usize) -> usize {
        Self::final_ln_gain(n_layers) + 1
    }
    fn unembed(n_layers: usize) -> usize {
        Self::final_ln_gain(n_layers) + 2
    }
}

/// Parameter declaration order for a config: (name, shape) pairs. This is
/// also the exact array order of the checkpoint format.
pub fn param_declarations(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ff, v, s) = (
        config.d_model,
        config.d_ff,
        config.vocab_size,
        config.max_seq_len,
    );
    let mut decls = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![s, d]),
    ];
    for l in 0..config.n_layers {
        decls.push((format!("layer{l}.attn_qkv"), vec![d, 3 * d]));
        decls.push((format!("layer{l}.attn_out"), vec![d, d]));
        decls.push((format!("layer{l}.mlp_in"), vec![d, ff]));
        decls.push((format!("layer{l}.mlp_out"), vec![ff, d]));
        decls.push((format!("layer{l}.ln1_gain"), vec![d]));
        decls.push((format!("layer{l}.ln1_bias"), vec![d]));
        decls.push((format!("layer{l}.ln2_gain"), vec![d]));
        decls.push((format!("layer{l}.ln2_bias"), vec![d]));
    }
    decls.push(("final_ln_gain".to_string(), vec![d]));
    decls.push(("final_ln_bias".to_string(), vec![d]));
    decls.push(("unembed".to_string(), vec![d, v]));
    decls
}

/// Recorded hook activations from one forward pass (post-override values),
/// indexed `[layer]`, each `[seq, width]`.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub mlp: Vec<Tensor>,
    pub attn: Vec<Tensor>,
}

impl ActivationRecord {
    pub fn value(&self, neuron: NeuronId, position: usize) -> f64 {
        let t = match neuron.site {
            Site::Mlp => &self.mlp[neuron.layer],
            Site::Attn => &self.attn[neuron.layer],
        };
        t.data[position * t.cols() + neuron.index]
    }
}

/// One forward pass: the live tape plus handles to the nodes attribution
/// and training need.
pub struct ForwardPass {
    pub tape: Tape,
    /// Softmax next-token distribution at the final position, shape [1, V].
    pub dist: NodeId,
    /// Raw logits, shape [seq, V].
    pub logits: NodeId,
    pub hooks: ActivationHooks,
    /// Final layer-norm output (gain and bias applied), shape [seq, d_model].
    pub final_norm: NodeId,
    /// The probe leaf, when an [`IgProbe`] was installed.
    pub probe_leaf: Option<NodeId>,
    /// Parameter leaf nodes in declaration order.
    pub param_nodes: Vec<NodeId>,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct ActivationHooks {
    pub mlp: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    /// Post-layer-norm input rows feeding each layer's MLP, [seq, d_model].
    pub mlp_input: Vec<NodeId>,
}

impl ForwardPass {
    pub fn distribution(&self) -> Vec<f64> {
        self.tape.value(self.dist).data.clone()
    }

    pub fn record(&self) -> ActivationRecord {
        ActivationRecord {
            mlp: self.hooks.mlp.iter().map(|&n| self.tape.value(n).clone()).collect(),
            attn: self.hooks.attn.iter().map(|&n| self.tape.value(n).clone()).collect(),
        }
    }
}

pub fn build_model(config: &ModelConfig, seed: u64, vocab: Vec<String>) -> Result<Model, ModelError> {
    config.validate()?;
    if vocab.len() != config.vocab_size {
        return Err(ModelError::Config(format!(
            "vocab length {} does not match vocab_size {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid init distribution");
    let params = param_declarations(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("gain") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Param { name, shape, data }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        vocab,
        params,
    })
}

impl Model {
    pub fn site_width(&self, site: Site) -> usize {
        match site {
            Site::Mlp => self.config.d_ff,
            Site::Attn => self.config.d_model,
        }
    }

    pub fn check_neuron(&self, n: NeuronId) -> Result<(), ModelError> {
        if n.layer >= self.config.n_layers || n.index >= self.site_width(n.site) {
            return Err(ModelError::NoSuchNeuron(n.to_string()));
        }
        Ok(())
    }

    /// Every neuron site in canonical (layer, site, index) order.
    pub fn all_neurons(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for layer in 0..self.config.n_layers {
            for site in [Site::Mlp, Site::Attn] {
                for index in 0..self.site_width(site) {
                    out.push(NeuronId { layer, site, index });
                }
            }
        }
        out
    }

    pub fn total_neurons(&self) -> usize {
        self.config.n_layers * (self.config.d_ff + self.config.d_model)
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    fn validate_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyTokens);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for &id in tokens {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Applies the overrides (and then the probe) registered for one site,
    /// returning the possibly-replaced node and the probe leaf if installed.
    #[allow(clippy::too_many_arguments)]
    fn apply_site_edits(
        &self,
        tape: &mut Tape,
        raw: NodeId,
        layer: usize,
        site: Site,
        seq: usize,
        overrides: &[ActivationOverride],
        probe: Option<&IgProbe>,
    ) -> Result<(NodeId, Option<NodeId>), ModelError> {
        let width = self.site_width(site);
        let mut node = raw;

        // Set semantics: one write per flat position, ordered by position.
        let mut edits: BTreeMap<usize, f64> = BTreeMap::new();
        for ov in overrides {
            if ov.neuron.layer != layer || ov.neuron.site != site {
                continue;
            }
            self.check_neuron(ov.neuron)?;
            let rows: Vec<usize> = match ov.scope {
                PositionScope::AttributionPosition => vec![seq - 1],
                PositionScope::AllPositions => (0..seq).collect(),
            };
            for row in rows {
                let flat = row * width + ov.neuron.index;
                let value = match ov.mode {
                    OverrideMode::SetToValue(v) => v,
                    OverrideMode::ScaleTowardBaseline(alpha) => {
                        if !(0.0..=1.0).contains(&alpha) {
                            return Err(ModelError::BadAlpha(alpha));
                        }
                        alpha * tape.value(node).data[flat]
                    }
                };
                edits.insert(flat, value);
            }
        }
        if !edits.is_empty() {
            let positions: Vec<usize> = edits.keys().copied().collect();
            let values: Vec<f64> = edits.values().copied().collect();
            let vals = tape.leaf(Tensor::new(vec![values.len()], values)?)?;
            node = tape.replace_elems(node, vals, &positions)?;
        }

        let mut probe_leaf = None;
        if let Some(p) = probe {
            if p.layer == layer && p.site == site {
                for &i in &p.indices {
                    self.check_neuron(NeuronId { layer, site, index: i })?;
                }
                let positions: Vec<usize> =
                    p.indices.iter().map(|&i| p.position * width + i).collect();
                let values: Vec<f64> = positions
                    .iter()
                    .map(|&flat| p.alpha * tape.value(node).data[flat])
                    .collect();
                let vals = tape.leaf(Tensor::new(vec![values.len()], values)?)?;
                node = tape.replace_elems(node, vals, &positions)?;
                probe_leaf = Some(vals);
            }
        }
        Ok((node, probe_leaf))
    }

    /// Full forward pass building the autodiff graph.
    pub fn forward_pass(
        &self,
        tokens: &[usize],
        overrides: &[ActivationOverride],
        probe: Option<&IgProbe>,
    ) -> Result<ForwardPass, ModelError> {
        self.validate_tokens(tokens)?;
        for ov in overrides {
            self.check_neuron(ov.neuron)?;
        }
        let seq = tokens.len();
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());

        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(Tensor::new(p.shape.clone(), p.data.clone())?))
            .collect::<Result<_, TensorError>>()?;

        let tok = tape.embed_lookup(param_nodes[Layout::TOK_EMB], tokens)?;
        let pos_ids: Vec<usize> = (0..seq).collect();
        let pos = tape.embed_lookup(param_nodes[Layout::POS_EMB], &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        // Causal mask: additive constant, −1e30 above the diagonal.
        let mut mask_data = vec![0.0; seq * seq];
        for i in 0..seq {
            for j in (i + 1)..seq {
                mask_data[i * seq + j] = MASK_NEG;
            }
        }
        let mask = tape.leaf(Tensor::new(vec![seq, seq], mask_data)?)?;

        let mut hooks = ActivationHooks {
            mlp: Vec::with_capacity(cfg.n_layers),
            attn: Vec::with_capacity(cfg.n_layers),
            mlp_input: Vec::with_capacity(cfg.n_layers),
        };
        let mut probe_leaf = None;

        for l in 0..cfg.n_layers {
            // attention block
            let h = tape.layer_norm(x)?;
            let h = tape.mul(h, param_nodes[Layout::ln1_gain(l)])?;
            let h = tape.add(h, param_nodes[Layout::ln1_bias(l)])?;
            let qkv = tape.matmul(h, param_nodes[Layout::attn_qkv(l)])?;
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(qkv, hd * dh, dh)?;
                let k = tape.slice_cols(qkv, d + hd * dh, dh)?;
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let scores = tape.add(scores, mask)?;
                let attn = tape.softmax_rows(scores)?;
                head_outs.push(tape.matmul(attn, v)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let (attn_hook, pl) =
                self.apply_site_edits(&mut tape, concat, l, Site::Attn, seq, overrides, probe)?;
            if pl.is_some() {
                probe_leaf = pl;
            }
            hooks.attn.push(attn_hook);
            let attn_out = tape.matmul(attn_hook, param_nodes[Layout::attn_out(l)])?;
            x = tape.add(x, attn_out)?;

            // mlp block
            let h = tape.layer_norm(x)?;
            let h = tape.mul(h, param_nodes[Layout::ln2_gain(l)])?;
            let h = tape.add(h, param_nodes[Layout::ln2_bias(l)])?;
            hooks.mlp_input.push(h);
            let pre = tape.matmul(h, param_nodes[Layout::mlp_in(l)])?;
            let act = tape.gelu(pre)?;
            let (mlp_hook, pl) =
                self.apply_site_edits(&mut tape, act, l, Site::Mlp, seq, overrides, probe)?;
            if pl.is_some() {
                probe_leaf = pl;
            }
            hooks.mlp.push(mlp_hook);
            let mlp_out = tape.matmul(mlp_hook, param_nodes[Layout::mlp_out(l)])?;
            x = tape.add(x, mlp_out)?;
        }

        let y = tape.layer_norm(x)?;
        let y = tape.mul(y, param_nodes[Layout::final_ln_gain(cfg.n_layers)])?;
        let y = tape.add(y, param_nodes[Layout::final_ln_bias(cfg.n_layers)])?;
        let final_norm = y;
        let logits = tape.matmul(y, param_nodes[Layout::unembed(cfg.n_layers)])?;
        let last = tape.slice_rows(logits, seq - 1, 1)?;
        let dist = tape.softmax_rows(last)?;

        Ok(ForwardPass {
            tape,
            dist,
            logits,
            hooks,
            final_norm,
            probe_leaf,
            param_nodes,
            seq_len: seq,
        })
    }

    /// Next-token distribution at the final position plus the activation
    /// record at every hook site.
    pub fn forward(
        &self,
        tokens: &[usize],
        overrides: &[ActivationOverride],
    ) -> Result<(Vec<f64>, ActivationRecord), ModelError> {
        let pass = self.forward_pass(tokens, overrides, None)?;
        Ok((pass.distribution(), pass.record()))
    }

    /// Raw logits at every position (testing aid for causal masking).
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let pass = self.forward_pass(tokens, &[], None)?;
        Ok(pass.tape.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 24,
            vocab_size: 11,
            max_seq_len: 12,
        }
    }

    fn tiny_vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config();
        let a = build_model(&cfg, 42, tiny_vocab(11)).unwrap();
        let b = build_model(&cfg, 42, tiny_vocab(11)).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
        let c = build_model(&cfg, 43, tiny_vocab(11)).unwrap();
        assert_ne!(a.param("tok_emb").data, c.param("tok_emb").data);
    }

    #[test]
    fn head_dim_and_divisibility() {
        let mut cfg = tiny_config();
        cfg.d_model = 64;
        cfg.n_heads = 4;
        assert_eq!(cfg.head_dim(), 16);
        cfg.d_model = 63;
        let err = build_model(&cfg, 1, tiny_vocab(11)).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn invalid_config_fields_enumerated() {
        let cfg = ModelConfig {
            n_layers: 0,
            d_model: 16,
            n_heads: 4,
            d_ff: 0,
            vocab_size: 11,
            max_seq_len: 12,
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("n_layers") && msg.contains("d_ff"));
    }

    #[test]
    fn distribution_sums_to_one_and_hooks_cover_all_sites() {
        let m = build_model(&tiny_config(), 7, tiny_vocab(11)).unwrap();
        let (dist, rec) = m.forward(&[1, 2, 3, 4], &[]).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(rec.mlp.len(), 2);
        assert_eq!(rec.attn.len(), 2);
        for l in 0..2 {
            assert_eq!(rec.mlp[l].shape, vec![4, 24]);
            assert_eq!(rec.attn[l].shape, vec![4, 16]);
        }
    }

    #[test]
    fn empty_override_is_identity() {
        let m = build_model(&tiny_config(), 7, tiny_vocab(11)).unwrap();
        let (a, _) = m.forward(&[1, 2, 3], &[]).unwrap();
        let (b, _) = m.forward(&[1, 2, 3], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn override_with_recorded_value_is_fixed_point() {
        let m = build_model(&tiny_config(), 7, tiny_vocab(11)).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let (base, rec) = m.forward(&tokens, &[]).unwrap();
        let neuron = NeuronId {
            layer: 1,
            site: Site::Mlp,
            index: 5,
        };
        let natural = rec.value(neuron, tokens.len() - 1);
        let ov = ActivationOverride {
            neuron,
            mode: OverrideMode::SetToValue(natural),
            scope: PositionScope::AttributionPosition,
        };
        let (out, _) = m.forward(&tokens, &[ov]).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn suppression_is_idempotent() {
        let m = build_model(&tiny_config(), 9, tiny_vocab(11)).unwrap();
        let neuron = NeuronId {
            layer: 0,
            site: Site::Attn,
            index: 3,
        };
        let ov = ActivationOverride {
            neuron,
            mode: OverrideMode::SetToValue(0.0),
            scope: PositionScope::AllPositions,
        };
        let (once, _) = m.forward(&[1, 2, 3], &[ov]).unwrap();
        let (twice, _) = m.forward(&[1, 2, 3], &[ov, ov]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn rejects_bad_tokens_and_neurons() {
        let m = build_model(&tiny_config(), 9, tiny_vocab(11)).unwrap();
        assert!(matches!(
            m.forward(&[], &[]),
            Err(ModelError::EmptyTokens)
        ));
        assert!(matches!(
            m.forward(&[99], &[]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward(&(0..13).map(|i| i % 11).collect::<Vec<_>>(), &[]),
            Err(ModelError::TooLong { .. })
        ));
        let bad = ActivationOverride {
            neuron: NeuronId {
                layer: 0,
                site: Site::Mlp,
                index: 24,
            },
            mode: OverrideMode::SetToValue(0.0),
            scope: PositionScope::AllPositions,
        };
        assert!(matches!(
            m.forward(&[1], &[bad]),
            Err(ModelError::NoSuchNeuron(_))
        ));
    }

    #[test]
    fn causal_masking_ignores_future_tokens() {
        let m = build_model(&tiny_config(), 5, tiny_vocab(11)).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 10, 7]).unwrap();
        let v = m.config.vocab_size;
        // positions 0..2 saw identical prefixes
        for p in 0..3 {
            for j in 0..v {
                assert!(
                    (a.data[p * v + j] - b.data[p * v + j]).abs() <= 1e-12,
                    "position {p} leaked future tokens"
                );
            }
        }
    }

    #[test]
    fn canonical_neuron_order() {
        let m = build_model(&tiny_config(), 5, tiny_vocab(11)).unwrap();
        let all = m.all_neurons();
        assert_eq!(all.len(), m.total_neurons());
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        assert_eq!(
            all[0],
            NeuronId {
                layer: 0,
                site: Site::Mlp,
                index: 0
            }
        );
    }
}
