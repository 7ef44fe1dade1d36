//! Integrated-gradients neuron attribution with a zero activation baseline.
//!
//! The attribution of a neuron toward a label probability is the
//! right-endpoint Riemann sum of ∂f/∂n along the straight-line activation
//! path from 0 to the neuron's natural value, scaled by the path length.
//! Truthful and untruthful attributions come from the same rendered prompt,
//! and their difference D is the selection statistic downstream.

use crate::model::{
    ActivationOverride, IgProbe, Model, NeuronId, OverrideMode, PositionScope, Site,
};
use crate::tasks::{correct_label, incorrect_label, Label, PromptInstance};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("integration steps m must be >= 1")]
    BadSteps,
    #[error("non-finite gradient at interpolation step {step} for {neuron}")]
    NonFiniteGradient { step: usize, neuron: NeuronId },
    #[error("neuron {0} absent from attribution matrix")]
    UnknownNeuron(NeuronId),
    #[error("attribution matrix has no examples")]
    NoExamples,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    CorrectLabel,
    IncorrectLabel,
}

/// Sign taxonomy of (attr_t, attr_f); zero counts as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioLabel {
    BothPositive,
    TruthfulNegUntruthfulPos,
    TruthfulPosUntruthfulNeg,
    BothNegative,
}

impl std::fmt::Display for ScenarioLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScenarioLabel::BothPositive => "both-positive",
            ScenarioLabel::TruthfulNegUntruthfulPos => "truthful-neg-untruthful-pos",
            ScenarioLabel::TruthfulPosUntruthfulNeg => "truthful-pos-untruthful-neg",
            ScenarioLabel::BothNegative => "both-negative",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionPair {
    pub neuron: NeuronId,
    pub example_id: String,
    pub attr_t: f64,
    pub attr_f: f64,
    pub d: f64,
}

impl AttributionPair {
    pub fn new(neuron: NeuronId, example_id: String, attr_t: f64, attr_f: f64) -> Self {
        AttributionPair {
            neuron,
            example_id,
            attr_t,
            attr_f,
            d: attr_t - attr_f,
        }
    }

    pub fn scenario(&self) -> ScenarioLabel {
        classify_scenario(self.attr_t, self.attr_f)
    }
}

pub fn classify_scenario(attr_t: f64, attr_f: f64) -> ScenarioLabel {
    match (attr_t >= 0.0, attr_f >= 0.0) {
        (true, true) => ScenarioLabel::BothPositive,
        (false, true) => ScenarioLabel::TruthfulNegUntruthfulPos,
        (true, false) => ScenarioLabel::TruthfulPosUntruthfulNeg,
        (false, false) => ScenarioLabel::BothNegative,
    }
}

/// Right-endpoint Riemann sum of the path integral:
/// ((input − baseline)/m) · Σ_{k=1..m} grad(baseline + (k/m)(input − baseline)).
pub fn riemann_path_sum<E>(
    n_input: f64,
    n_baseline: f64,
    m: usize,
    mut grad_at: impl FnMut(f64) -> Result<f64, E>,
) -> Result<f64, E> {
    let span = n_input - n_baseline;
    let mut acc = 0.0;
    for k in 1..=m {
        let point = n_baseline + (k as f64 / m as f64) * span;
        acc += grad_at(point)?;
    }
    Ok(span / m as f64 * acc)
}

fn target_ids<'a>(prompt: &'a PromptInstance, target: Target) -> &'a [usize] {
    let label = match target {
        Target::CorrectLabel => correct_label(prompt.assignment),
        Target::IncorrectLabel => incorrect_label(prompt.assignment),
    };
    match label {
        Label::A => &prompt.label_ids.a,
        Label::B => &prompt.label_ids.b,
    }
}

/// Exact per-neuron integrated gradient: one interpolated forward/backward
/// per step, with only the target neuron's activation overridden at the
/// attribution position (the final prompt position).
pub fn neuron_ig(
    model: &Model,
    prompt: &PromptInstance,
    neuron: NeuronId,
    target: Target,
    m: usize,
) -> Result<f64, AttributionError> {
    if m < 1 {
        return Err(AttributionError::BadSteps);
    }
    model.check_neuron(neuron)?;
    let position = prompt.tokens.len() - 1;
    let (_, record) = model.forward(&prompt.tokens, &[])?;
    let natural = record.value(neuron, position);
    let ids = target_ids(prompt, target);

    let mut grad_sum = 0.0;
    for k in 1..=m {
        let probe = IgProbe {
            layer: neuron.layer,
            site: neuron.site,
            indices: vec![neuron.index],
            alpha: k as f64 / m as f64,
            position,
        };
        let mut pass = model.forward_pass(&prompt.tokens, &[], Some(&probe))?;
        let f = pass.tape.select_sum(pass.dist, ids)?;
        pass.tape.backward(f)?;
        let leaf = pass.probe_leaf.expect("probe site exists");
        let g = pass.tape.grad(leaf)[0];
        if !g.is_finite() {
            return Err(AttributionError::NonFiniteGradient { step: k, neuron });
        }
        grad_sum += g;
    }
    Ok(natural / m as f64 * grad_sum)
}

/// Patched-output difference f(neuron at its natural value) − f(neuron at 0):
/// the exact value of the 1-D path integral, used as the convergence oracle.
pub fn activation_patch_difference(
    model: &Model,
    prompt: &PromptInstance,
    neuron: NeuronId,
    target: Target,
) -> Result<f64, AttributionError> {
    let ids = target_ids(prompt, target);
    let (dist, _) = model.forward(&prompt.tokens, &[])?;
    let f_natural: f64 = ids.iter().map(|&i| dist[i]).sum();
    let ov = ActivationOverride {
        neuron,
        mode: OverrideMode::SetToValue(0.0),
        scope: PositionScope::AttributionPosition,
    };
    let (dist0, _) = model.forward(&prompt.tokens, &[ov])?;
    let f_zero: f64 = ids.iter().map(|&i| dist0[i]).sum();
    Ok(f_natural - f_zero)
}

/// Attribution pairs for every neuron of the model on one prompt.
///
/// Batched per (site, step): a single interpolated forward scales the whole
/// site activation row at the attribution position by k/m, and one backward
/// per target label reads ∂f/∂n for all neurons of the site at once. Both
/// attributions use the same rendered prompt and assignment.
pub fn attribute_example(
    model: &Model,
    prompt: &PromptInstance,
    m: usize,
) -> Result<Vec<AttributionPair>, AttributionError> {
    if m < 1 {
        return Err(AttributionError::BadSteps);
    }
    let position = prompt.tokens.len() - 1;
    let (_, record) = model.forward(&prompt.tokens, &[])?;
    let ids_t = target_ids(prompt, Target::CorrectLabel).to_vec();
    let ids_f = target_ids(prompt, Target::IncorrectLabel).to_vec();

    let mut pairs = Vec::with_capacity(model.total_neurons());
    for layer in 0..model.config.n_layers {
        for site in [Site::Mlp, Site::Attn] {
            let width = model.site_width(site);
            let mut sum_t = vec![0.0; width];
            let mut sum_f = vec![0.0; width];
            for k in 1..=m {
                let probe = IgProbe {
                    layer,
                    site,
                    indices: (0..width).collect(),
                    alpha: k as f64 / m as f64,
                    position,
                };
                let mut pass = model.forward_pass(&prompt.tokens, &[], Some(&probe))?;
                let leaf = pass.probe_leaf.expect("probe site exists");
                let f_t = pass.tape.select_sum(pass.dist, &ids_t)?;
                pass.tape.backward(f_t)?;
                for (i, g) in pass.tape.grad(leaf).iter().enumerate() {
                    if !g.is_finite() {
                        return Err(AttributionError::NonFiniteGradient {
                            step: k,
                            neuron: NeuronId { layer, site, index: i },
                        });
                    }
                    sum_t[i] += g;
                }
                let f_f = pass.tape.select_sum(pass.dist, &ids_f)?;
                pass.tape.backward(f_f)?;
                for (i, g) in pass.tape.grad(leaf).iter().enumerate() {
                    if !g.is_finite() {
                        return Err(AttributionError::NonFiniteGradient {
                            step: k,
                            neuron: NeuronId { layer, site, index: i },
                        });
                    }
                    sum_f[i] += g;
                }
            }
            for index in 0..width {
                let neuron = NeuronId { layer, site, index };
                let natural = record.value(neuron, position);
                pairs.push(AttributionPair::new(
                    neuron,
                    prompt.example_id.clone(),
                    natural / m as f64 * sum_t[index],
                    natural / m as f64 * sum_f[index],
                ));
            }
        }
    }
    // canonical order within a layer is mlp before attn; reorder to the
    // global (layer, site, index) order used everywhere else
    pairs.sort_by_key(|p| p.neuron);
    Ok(pairs)
}

/// Dense per-(example, neuron) attribution store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub neurons: Vec<NeuronId>,
    pub example_ids: Vec<String>,
    /// Row-major [example][neuron].
    pub attr_t: Vec<f64>,
    pub attr_f: Vec<f64>,
    pub d: Vec<f64>,
}

impl AttributionMatrix {
    /// Assembles from per-example pair lists; every list must cover the
    /// same neurons in canonical order.
    pub fn from_examples(per_example: &[Vec<AttributionPair>]) -> Result<Self, AttributionError> {
        if per_example.is_empty() {
            return Err(AttributionError::NoExamples);
        }
        let neurons: Vec<NeuronId> = per_example[0].iter().map(|p| p.neuron).collect();
        let mut m = AttributionMatrix {
            neurons,
            example_ids: Vec::new(),
            attr_t: Vec::new(),
            attr_f: Vec::new(),
            d: Vec::new(),
        };
        for pairs in per_example {
            assert_eq!(pairs.len(), m.neurons.len(), "ragged attribution rows");
            m.example_ids.push(pairs[0].example_id.clone());
            for (j, p) in pairs.iter().enumerate() {
                assert_eq!(p.neuron, m.neurons[j], "neuron order mismatch");
                m.attr_t.push(p.attr_t);
                m.attr_f.push(p.attr_f);
                m.d.push(p.d);
            }
        }
        Ok(m)
    }

    pub fn neuron_column(&self, neuron: NeuronId) -> Result<usize, AttributionError> {
        self.neurons
            .binary_search(&neuron)
            .map_err(|_| AttributionError::UnknownNeuron(neuron))
    }

    /// D̄ and the per-example D sample for one neuron.
    pub fn mean_difference(&self, neuron: NeuronId) -> Result<(f64, Vec<f64>), AttributionError> {
        if self.example_ids.is_empty() {
            return Err(AttributionError::NoExamples);
        }
        let j = self.neuron_column(neuron)?;
        let n = self.neurons.len();
        let sample: Vec<f64> = (0..self.example_ids.len())
            .map(|i| self.d[i * n + j])
            .collect();
        let mean = sample.iter().sum::<f64>() / sample.len() as f64;
        Ok((mean, sample))
    }

    /// Comma-separated dump: one row per (example, neuron).
    pub fn dump_csv(&self, path: &Path) -> Result<(), AttributionError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "example_id,layer,site,index,attr_t,attr_f,d,scenario")?;
        let n = self.neurons.len();
        for (i, ex) in self.example_ids.iter().enumerate() {
            for (j, neuron) in self.neurons.iter().enumerate() {
                let (t, f, d) = (
                    self.attr_t[i * n + j],
                    self.attr_f[i * n + j],
                    self.d[i * n + j],
                );
                writeln!(
                    w,
                    "{ex},{},{},{},{t},{f},{d},{}",
                    neuron.layer,
                    neuron.site,
                    neuron.index,
                    classify_scenario(t, f)
                )?;
            }
        }
        Ok(())
    }
}
