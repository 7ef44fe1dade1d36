//! Causal validation of a selected neuron set: zero-suppression masks,
//! size-matched random controls, repeated accuracy evaluation under
//! permuted answer orderings, probability-change accounting, and layer
//! histograms for reporting.

use crate::model::{
    ActivationOverride, Model, NeuronId, OverrideMode, PositionScope,
};
use crate::tasks::{
    case_summed_probability, correct_label, incorrect_label, render_prompt, Assignment,
    PromptTemplate, QAExample, Vocab,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("control mask size {count} exceeds total neuron count {total}")]
    ControlTooLarge { count: usize, total: usize },
    #[error("repetitions must be >= 1")]
    NoRepetitions,
    #[error("probability change undefined for pre == 0")]
    ZeroPreProbability,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Set of neurons whose activations are forced to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuppressionMask {
    pub neurons: BTreeSet<NeuronId>,
    pub scope: PositionScope,
}

impl SuppressionMask {
    pub fn new(neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        SuppressionMask {
            neurons: neurons.into_iter().collect(),
            scope: PositionScope::AllPositions,
        }
    }

    pub fn overrides(&self) -> Vec<ActivationOverride> {
        self.neurons
            .iter()
            .map(|&neuron| ActivationOverride {
                neuron,
                mode: OverrideMode::SetToValue(0.0),
                scope: self.scope,
            })
            .collect()
    }
}

/// Next-token distribution with the mask applied.
pub fn suppress_forward(
    model: &Model,
    mask: &SuppressionMask,
    tokens: &[usize],
) -> Result<Vec<f64>, InterventionError> {
    let (dist, _) = model.forward(tokens, &mask.overrides())?;
    Ok(dist)
}

/// Uniform sample of `count` neurons without replacement, for the
/// size-matched control condition.
pub fn random_control_mask(
    count: usize,
    seed: u64,
    model: &Model,
) -> Result<SuppressionMask, InterventionError> {
    let all = model.all_neurons();
    if count > all.len() {
        return Err(InterventionError::ControlTooLarge {
            count,
            total: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = all.choose_multiple(&mut rng, count).copied();
    Ok(SuppressionMask::new(chosen))
}

/// Eq-style relative drop (pre − post)/pre of the correct-label probability.
pub fn probability_change(pre: f64, post: f64) -> Result<f64, InterventionError> {
    if pre <= 0.0 {
        return Err(InterventionError::ZeroPreProbability);
    }
    Ok((pre - post) / pre)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub repetition: usize,
    pub example_id: String,
    pub category: String,
    pub assignment: Assignment,
    /// Correct-label probability without the mask.
    pub pre_correct_prob: f64,
    /// Correct-label probability with the mask (equals pre for no mask).
    pub post_correct_prob: f64,
    /// Masked model answers correctly; ties count as incorrect.
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetitions: usize,
    pub seed: u64,
    pub mask_size: usize,
    pub per_repetition_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation across repetitions (0 for one repetition).
    pub accuracy_std: f64,
    /// Mean of (pre − post)/pre over rows with pre > 0; absent if none.
    pub mean_probability_change: Option<f64>,
    /// Rows skipped from the change average because pre == 0.
    pub excluded_zero_pre: usize,
    /// One row per example per repetition, canonical example order.
    pub rows: Vec<EvalRow>,
}

/// Repeated accuracy evaluation. Each repetition re-draws every example's
/// A/B assignment from seed + repetition index; examples evaluate in
/// parallel but aggregate in input order.
pub fn evaluate_accuracy(
    model: &Model,
    examples: &[QAExample],
    template: &PromptTemplate,
    vocab: &Vocab,
    mask: Option<&SuppressionMask>,
    repetitions: usize,
    seed: u64,
) -> Result<EvalReport, InterventionError> {
    if repetitions < 1 {
        return Err(InterventionError::NoRepetitions);
    }
    let overrides = mask.map(|m| m.overrides()).unwrap_or_default();
    let mut rows = Vec::with_capacity(repetitions * examples.len());
    let mut per_rep = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let assignments: Vec<Assignment> = (0..examples.len())
            .map(|_| {
                if rng.gen_bool(0.5) {
                    Assignment::CorrectIsA
                } else {
                    Assignment::CorrectIsB
                }
            })
            .collect();
        let rep_rows: Vec<EvalRow> = examples
            .par_iter()
            .zip(assignments.par_iter())
            .map(|(ex, &assignment)| -> Result<EvalRow, InterventionError> {
                let prompt =
                    render_prompt(ex, assignment, template, vocab, model.config.max_seq_len)?;
                let (pre_dist, _) = model.forward(&prompt.tokens, &[])?;
                let post_dist = if overrides.is_empty() {
                    pre_dist.clone()
                } else {
                    model.forward(&prompt.tokens, &overrides)?.0
                };
                let t = correct_label(assignment);
                let f = incorrect_label(assignment);
                let pre = case_summed_probability(&pre_dist, t, &prompt.label_ids);
                let post = case_summed_probability(&post_dist, t, &prompt.label_ids);
                let post_f = case_summed_probability(&post_dist, f, &prompt.label_ids);
                Ok(EvalRow {
                    repetition: r,
                    example_id: ex.id.clone(),
                    category: ex.category.clone(),
                    assignment,
                    pre_correct_prob: pre,
                    post_correct_prob: post,
                    correct: post > post_f,
                })
            })
            .collect::<Result<_, _>>()?;
        let acc = if rep_rows.is_empty() {
            0.0
        } else {
            rep_rows.iter().filter(|row| row.correct).count() as f64 / rep_rows.len() as f64
        };
        per_rep.push(acc);
        rows.extend(rep_rows);
    }

    let mean = per_rep.iter().sum::<f64>() / repetitions as f64;
    let std = if repetitions > 1 {
        (per_rep.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (repetitions - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let mut change_sum = 0.0;
    let mut change_n = 0usize;
    let mut excluded = 0usize;
    for row in &rows {
        if row.pre_correct_prob > 0.0 {
            change_sum += (row.pre_correct_prob - row.post_correct_prob) / row.pre_correct_prob;
            change_n += 1;
        } else {
            excluded += 1;
        }
    }
    Ok(EvalReport {
        repetitions,
        seed,
        mask_size: mask.map(|m| m.neurons.len()).unwrap_or(0),
        per_repetition_accuracy: per_rep,
        mean_accuracy: mean,
        accuracy_std: std,
        mean_probability_change: (change_n > 0).then(|| change_sum / change_n as f64),
        excluded_zero_pre: excluded,
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryReduction {
    pub category: String,
    pub example_count: usize,
    /// Fraction of examples whose correct-label probability decreased,
    /// averaged over repetitions.
    pub reduction_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryReport {
    pub min_count: usize,
    pub included: Vec<CategoryReduction>,
    /// (category, example count) pairs below the minimum, listed not shown.
    pub omitted: Vec<(String, usize)>,
}

/// Per-category share of examples with a positive probability change,
/// averaged over repetitions first. Categories with fewer distinct
/// examples than `min_count` go to the omission list.
pub fn category_reduction_report(report: &EvalReport, min_count: usize) -> CategoryReport {
    let mut categories: Vec<String> = report.rows.iter().map(|r| r.category.clone()).collect();
    categories.sort();
    categories.dedup();

    let mut included = Vec::new();
    let mut omitted = Vec::new();
    for cat in categories {
        let mut ids: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.category == cat)
            .map(|r| r.example_id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        if ids.len() < min_count {
            omitted.push((cat, ids.len()));
            continue;
        }
        let mut rep_fractions = Vec::with_capacity(report.repetitions);
        for r in 0..report.repetitions {
            let rows: Vec<&EvalRow> = report
                .rows
                .iter()
                .filter(|row| row.repetition == r && row.category == cat)
                .collect();
            let decreased = rows
                .iter()
                .filter(|row| {
                    row.pre_correct_prob > 0.0
                        && (row.pre_correct_prob - row.post_correct_prob) / row.pre_correct_prob
                            > 0.0
                })
                .count();
            rep_fractions.push(decreased as f64 / rows.len() as f64);
        }
        included.push(CategoryReduction {
            category: cat,
            example_count: ids.len(),
            reduction_fraction: rep_fractions.iter().sum::<f64>() / report.repetitions as f64,
        });
    }
    CategoryReport {
        min_count,
        included,
        omitted,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub n_layers: usize,
    pub total: usize,
    /// Fraction of the neuron set in each layer; all zeros when empty.
    pub fractions: Vec<f64>,
}

impl LayerHistogram {
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

pub fn layer_distribution(neurons: &BTreeSet<NeuronId>, n_layers: usize) -> LayerHistogram {
    let mut counts = vec![0usize; n_layers];
    for n in neurons {
        counts[n.layer] += 1;
    }
    let total = neurons.len();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    LayerHistogram {
        n_layers,
        total,
        fractions,
    }
}

/// Exhaustive single-neuron ablation sweep: for every neuron, the fraction
/// of correctly answered prompts (both orderings) that flip to incorrect
/// when that neuron alone is zeroed. This is the ground-truth probe that
/// certifies a planted neuron before asking the pipeline to find it.
pub fn ablation_flip_sweep(
    model: &Model,
    examples: &[QAExample],
    template: &PromptTemplate,
    vocab: &Vocab,
) -> Result<Vec<(NeuronId, f64)>, InterventionError> {
    let mut correct_prompts = Vec::new();
    for ex in examples {
        for assignment in [Assignment::CorrectIsA, Assignment::CorrectIsB] {
            let prompt = render_prompt(ex, assignment, template, vocab, model.config.max_seq_len)?;
            let (dist, _) = model.forward(&prompt.tokens, &[])?;
            let t = case_summed_probability(&dist, correct_label(assignment), &prompt.label_ids);
            let f = case_summed_probability(&dist, incorrect_label(assignment), &prompt.label_ids);
            if t > f {
                correct_prompts.push(prompt);
            }
        }
    }
    if correct_prompts.is_empty() {
        return Ok(model.all_neurons().into_iter().map(|n| (n, 0.0)).collect());
    }
    model
        .all_neurons()
        .into_par_iter()
        .map(|neuron| {
            let mask = SuppressionMask::new([neuron]);
            let mut flips = 0usize;
            for prompt in &correct_prompts {
                let dist = suppress_forward(model, &mask, &prompt.tokens)?;
                let t = case_summed_probability(
                    &dist,
                    correct_label(prompt.assignment),
                    &prompt.label_ids,
                );
                let f = case_summed_probability(
                    &dist,
                    incorrect_label(prompt.assignment),
                    &prompt.label_ids,
                );
                if t <= f {
                    flips += 1;
                }
            }
            Ok((neuron, flips as f64 / correct_prompts.len() as f64))
        })
        .collect()
}

/// Flat table, one row per example per repetition.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<(), InterventionError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "repetition,example_id,category,assignment,pre_correct_prob,post_correct_prob,correct"
    )?;
    for row in &report.rows {
        let a = match row.assignment {
            Assignment::CorrectIsA => "A",
            Assignment::CorrectIsB => "B",
        };
        writeln!(
            w,
            "{},{},{},{a},{},{},{}",
            row.repetition,
            row.example_id,
            row.category,
            row.pre_correct_prob,
            row.post_correct_prob,
            row.correct
        )?;
    }
    Ok(())
}

pub fn write_layer_csv(hist: &LayerHistogram, path: &Path) -> Result<(), InterventionError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "layer,fraction")?;
    for (layer, frac) in hist.fractions.iter().enumerate() {
        writeln!(w, "{layer},{frac}")?;
    }
    Ok(())
}
