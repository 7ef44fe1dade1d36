//! Truth-neuron selection: manipulation check, adaptive saliency threshold,
//! share filtering, split-half testing, and Bonferroni-corrected one-sided
//! t-tests on the attribution differences.
//!
//! The dataset is split once: the first half nominates candidates, the
//! second half supplies the t-test samples. Candidates never see their own
//! test data, which is what keeps the p-values honest.

use crate::attribution::{attribute_example, AttributionMatrix, AttributionPair};
use crate::model::{Model, NeuronId, Site};
use crate::stats::{bonferroni, t_test_one_sample, TTestResult};
use crate::tasks::{
    model_answers_correctly, render_prompt, Assignment, PromptTemplate, QAExample, Vocab,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    BadConfig(String),
    #[error("need at least 2 examples to split, got {0}")]
    TooFewExamples(usize),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Attribution(#[from] crate::attribution::AttributionError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
}

/// Which per-neuron statistic feeds the adaptive threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyStatistic {
    /// Positive part of the attribution difference D (the default reading).
    #[default]
    PositiveDifference,
    /// |D|, for sensitivity checks.
    AbsoluteDifference,
}

impl SaliencyStatistic {
    fn value(&self, d: f64) -> f64 {
        match self {
            SaliencyStatistic::PositiveDifference => d.max(0.0),
            SaliencyStatistic::AbsoluteDifference => d.abs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Adaptive threshold, percent of the per-layer-type maximum.
    pub t_percent: f64,
    /// Share threshold, percent of selection-half examples.
    pub p_percent: f64,
    /// Family-wise significance level before Bonferroni division.
    pub alpha: f64,
    /// Integration steps for every attribution in the pipeline.
    pub m: usize,
    pub split_seed: u64,
    /// Require correct answers under both answer orderings.
    pub both_orderings: bool,
    pub saliency: SaliencyStatistic,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            t_percent: 20.0,
            p_percent: 40.0,
            alpha: 0.05,
            m: 20,
            split_seed: 0,
            both_orderings: true,
            saliency: SaliencyStatistic::PositiveDifference,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let mut problems = Vec::new();
        if !(self.t_percent > 0.0 && self.t_percent <= 100.0) {
            problems.push(format!("t_percent must be in (0, 100], got {}", self.t_percent));
        }
        if !(self.p_percent > 0.0 && self.p_percent <= 100.0) {
            problems.push(format!("p_percent must be in (0, 100], got {}", self.p_percent));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if self.m < 1 {
            problems.push("m must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SelectionError::BadConfig(problems.join("; ")))
        }
    }
}

/// Share-filtered candidates with their nomination evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Canonical (layer, site, index) order.
    pub neurons: Vec<NeuronId>,
    /// Fraction of selection-half examples where salient, aligned with `neurons`.
    pub shares: Vec<f64>,
    /// Example ids of the half that nominated these candidates.
    pub selection_half_ids: Vec<String>,
}

/// Filters to the examples the model answers correctly; order preserved.
/// Returns the retained examples and the retention rate.
pub fn manipulation_check(
    model: &Model,
    examples: &[QAExample],
    template: &PromptTemplate,
    vocab: &Vocab,
    both_orderings: bool,
) -> Result<(Vec<QAExample>, f64), SelectionError> {
    let verdicts: Vec<bool> = examples
        .par_iter()
        .map(|ex| model_answers_correctly(model, ex, template, vocab, both_orderings))
        .collect::<Result<_, _>>()?;
    let retained: Vec<QAExample> = examples
        .iter()
        .zip(&verdicts)
        .filter(|(_, &ok)| ok)
        .map(|(ex, _)| ex.clone())
        .collect();
    let rate = if examples.is_empty() {
        0.0
    } else {
        retained.len() as f64 / examples.len() as f64
    };
    Ok((retained, rate))
}

/// Salient neurons of one example: per layer type (all MLP sites pooled,
/// all attention sites pooled), keep neurons whose saliency statistic is at
/// least t% of that type's maximum. A type with a nonpositive maximum
/// contributes nothing.
pub fn salient_per_example(
    pairs: &[AttributionPair],
    t_percent: f64,
    saliency: SaliencyStatistic,
) -> BTreeSet<NeuronId> {
    let mut out = BTreeSet::new();
    for site in [Site::Mlp, Site::Attn] {
        let stats: Vec<(NeuronId, f64)> = pairs
            .iter()
            .filter(|p| p.neuron.site == site)
            .map(|p| (p.neuron, saliency.value(p.d)))
            .collect();
        let max = stats.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            continue;
        }
        let threshold = t_percent / 100.0 * max;
        out.extend(
            stats
                .iter()
                .filter(|&&(_, s)| s >= threshold)
                .map(|&(n, _)| n),
        );
    }
    out
}

/// Keeps neurons salient in at least ⌈(p/100)·N⌉ examples.
pub fn share_filter(
    salient_sets: &[BTreeSet<NeuronId>],
    example_ids: &[String],
    p_percent: f64,
) -> CandidateSet {
    let n = salient_sets.len();
    let needed = (p_percent * n as f64 / 100.0).ceil() as usize;
    let mut counts = std::collections::BTreeMap::new();
    for set in salient_sets {
        for &neuron in set {
            *counts.entry(neuron).or_insert(0usize) += 1;
        }
    }
    let mut neurons = Vec::new();
    let mut shares = Vec::new();
    for (neuron, count) in counts {
        if count >= needed {
            neurons.push(neuron);
            shares.push(count as f64 / n as f64);
        }
    }
    CandidateSet {
        neurons,
        shares,
        selection_half_ids: example_ids.to_vec(),
    }
}

/// Deterministic seeded split: shuffled copy, first ⌈N/2⌉ examples select,
/// the rest test.
pub fn split_halves(
    examples: &[QAExample],
    seed: u64,
) -> Result<(Vec<QAExample>, Vec<QAExample>), SelectionError> {
    if examples.len() < 2 {
        return Err(SelectionError::TooFewExamples(examples.len()));
    }
    let mut shuffled = examples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let cut = examples.len().div_ceil(2);
    let test = shuffled.split_off(cut);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config: SelectionConfig,
    pub total_examples: usize,
    pub retention_rate: f64,
    pub selection_half_ids: Vec<String>,
    pub test_half_ids: Vec<String>,
    pub candidates: CandidateSet,
    pub t_tests: Vec<TTestResult>,
    pub bonferroni_threshold: f64,
    /// Surviving neurons in canonical order.
    pub truth_neurons: Vec<NeuronId>,
}

fn attribute_half(
    model: &Model,
    examples: &[QAExample],
    assignments: &[Assignment],
    template: &PromptTemplate,
    vocab: &Vocab,
    m: usize,
) -> Result<Vec<Vec<AttributionPair>>, SelectionError> {
    examples
        .par_iter()
        .zip(assignments.par_iter())
        .map(|(ex, &assignment)| {
            let prompt = render_prompt(ex, assignment, template, vocab, model.config.max_seq_len)?;
            Ok(attribute_example(model, &prompt, m)?)
        })
        .collect()
}

/// Draws one answer ordering per example from the split seed, so repeated
/// runs attribute identical prompts.
fn draw_assignments(n: usize, seed: u64) -> Vec<Assignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5e1ec7));
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Assignment::CorrectIsA
            } else {
                Assignment::CorrectIsB
            }
        })
        .collect()
}

/// The full pipeline. An empty candidate or final set is a valid outcome,
/// reported rather than raised.
pub fn select_truth_neurons(
    model: &Model,
    examples: &[QAExample],
    template: &PromptTemplate,
    vocab: &Vocab,
    config: &SelectionConfig,
) -> Result<SelectionReport, SelectionError> {
    config.validate()?;
    let (retained, retention_rate) =
        manipulation_check(model, examples, template, vocab, config.both_orderings)?;
    // the test half needs at least 2 examples for a t-test, so 3 retained
    // examples (split 2/1) are still too few
    if retained.len() < 4 {
        return Err(SelectionError::TooFewExamples(retained.len()));
    }
    let (sel_half, test_half) = split_halves(&retained, config.split_seed)?;
    let sel_ids: Vec<String> = sel_half.iter().map(|e| e.id.clone()).collect();
    let test_ids: Vec<String> = test_half.iter().map(|e| e.id.clone()).collect();

    let sel_assignments = draw_assignments(sel_half.len(), config.split_seed);
    let sel_pairs = attribute_half(model, &sel_half, &sel_assignments, template, vocab, config.m)?;
    let salient: Vec<BTreeSet<NeuronId>> = sel_pairs
        .iter()
        .map(|pairs| salient_per_example(pairs, config.t_percent, config.saliency))
        .collect();
    let candidates = share_filter(&salient, &sel_ids, config.p_percent);

    let mut t_tests = Vec::new();
    let mut threshold = config.alpha;
    if !candidates.neurons.is_empty() {
        let test_assignments =
            draw_assignments(test_half.len(), config.split_seed.wrapping_add(1));
        let test_pairs =
            attribute_half(model, &test_half, &test_assignments, template, vocab, config.m)?;
        let matrix = AttributionMatrix::from_examples(&test_pairs)?;
        for &neuron in &candidates.neurons {
            let (_, sample) = matrix.mean_difference(neuron)?;
            t_tests.push(t_test_one_sample(neuron, &sample, 0.0)?);
        }
        threshold = bonferroni(&mut t_tests, config.alpha)?;
    }
    let truth_neurons: Vec<NeuronId> = t_tests
        .iter()
        .filter(|r| r.rejected)
        .map(|r| r.neuron)
        .collect();

    Ok(SelectionReport {
        config: config.clone(),
        total_examples: examples.len(),
        retention_rate,
        selection_half_ids: sel_ids,
        test_half_ids: test_ids,
        candidates,
        t_tests,
        bonferroni_threshold: threshold,
        truth_neurons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tasks::{build_vocab, generate_synthetic_dataset, SyntheticFactSpec};

    fn pair(site: Site, index: usize, d: f64) -> AttributionPair {
        AttributionPair::new(
            NeuronId { layer: 0, site, index },
            "e".into(),
            d,
            0.0,
        )
    }

    #[test]
    fn adaptive_threshold_spec_arithmetic() {
        // MLP D {2.0, 0.5, 0.3} at t=20%: threshold 0.4, first two retained
        let pairs = vec![
            pair(Site::Mlp, 0, 2.0),
            pair(Site::Mlp, 1, 0.5),
            pair(Site::Mlp, 2, 0.3),
        ];
        let got = salient_per_example(&pairs, 20.0, SaliencyStatistic::PositiveDifference);
        let idx: Vec<usize> = got.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn nonpositive_maximum_yields_empty_set() {
        let pairs = vec![pair(Site::Mlp, 0, -0.2), pair(Site::Mlp, 1, 0.0)];
        let got = salient_per_example(&pairs, 20.0, SaliencyStatistic::PositiveDifference);
        assert!(got.is_empty());
    }

    #[test]
    fn exact_threshold_is_retained() {
        let pairs = vec![pair(Site::Mlp, 0, 1.0), pair(Site::Mlp, 1, 0.2)];
        let got = salient_per_example(&pairs, 20.0, SaliencyStatistic::PositiveDifference);
        assert!(got.iter().any(|n| n.index == 1), "boundary neuron dropped");
    }

    #[test]
    fn layer_types_threshold_independently() {
        // a big MLP max must not mask a small attention signal
        let pairs = vec![
            pair(Site::Mlp, 0, 100.0),
            pair(Site::Attn, 0, 0.01),
            pair(Site::Attn, 1, 0.001),
        ];
        let got = salient_per_example(&pairs, 20.0, SaliencyStatistic::PositiveDifference);
        assert!(got.contains(&NeuronId { layer: 0, site: Site::Attn, index: 0 }));
        assert!(!got.contains(&NeuronId { layer: 0, site: Site::Attn, index: 1 }));
    }

    fn sets_with_counts(counts: &[(usize, usize)], n_examples: usize) -> Vec<BTreeSet<NeuronId>> {
        // neuron index i appears in the first counts[i].1 example sets
        (0..n_examples)
            .map(|e| {
                counts
                    .iter()
                    .filter(|&&(_, c)| e < c)
                    .map(|&(i, _)| NeuronId { layer: 0, site: Site::Mlp, index: i })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn share_filter_boundary_is_inclusive() {
        let ids: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        let sets = sets_with_counts(&[(0, 4), (1, 3)], 10);
        let cand = share_filter(&sets, &ids, 40.0);
        assert_eq!(cand.neurons.len(), 1);
        assert_eq!(cand.neurons[0].index, 0);
        assert!((cand.shares[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn full_share_requirement_is_intersection() {
        let ids: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
        let sets = sets_with_counts(&[(0, 5), (1, 4)], 5);
        let cand = share_filter(&sets, &ids, 100.0);
        assert_eq!(cand.neurons.len(), 1);
        assert_eq!(cand.neurons[0].index, 0);
    }

    #[test]
    fn raising_thresholds_never_adds_candidates() {
        let pairs = vec![
            pair(Site::Mlp, 0, 2.0),
            pair(Site::Mlp, 1, 0.9),
            pair(Site::Mlp, 2, 0.5),
            pair(Site::Mlp, 3, 0.1),
        ];
        let mut prev: Option<BTreeSet<NeuronId>> = None;
        for t in [5.0, 20.0, 40.0, 80.0, 100.0] {
            let got = salient_per_example(&pairs, t, SaliencyStatistic::PositiveDifference);
            if let Some(p) = &prev {
                assert!(got.is_subset(p), "t={t} grew the set");
            }
            prev = Some(got);
        }

        let ids: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        let sets = sets_with_counts(&[(0, 9), (1, 6), (2, 4), (3, 1)], 10);
        let mut prev_len = usize::MAX;
        for p in [10.0, 40.0, 60.0, 90.0, 100.0] {
            let cand = share_filter(&sets, &ids, p);
            assert!(cand.neurons.len() <= prev_len);
            prev_len = cand.neurons.len();
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let examples: Vec<QAExample> = (0..11)
            .map(|i| QAExample {
                id: format!("e{i}"),
                question: format!("q{i}"),
                correct: "yes".into(),
                incorrect: "no".into(),
                category: "c".into(),
            })
            .collect();
        let (a, b) = split_halves(&examples, 7).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let (a2, b2) = split_halves(&examples, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);

        let mut union: Vec<String> = a.iter().chain(&b).map(|e| e.id.clone()).collect();
        union.sort();
        let mut want: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
        want.sort();
        assert_eq!(union, want);

        assert!(matches!(
            split_halves(&examples[..1], 0),
            Err(SelectionError::TooFewExamples(1))
        ));
    }

    #[test]
    fn uniform_model_retains_nothing() {
        let examples = generate_synthetic_dataset(&SyntheticFactSpec {
            n_entities: 3,
            n_attributes: 2,
            n_examples: 6,
            seed: 1,
        })
        .unwrap();
        let template = PromptTemplate::new(crate::tasks::DEFAULT_TEMPLATE.into()).unwrap();
        let vocab = build_vocab(&examples, &template);
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 1,
            d_ff: 8,
            vocab_size: vocab.len(),
            max_seq_len: 96,
        };
        let mut model = build_model(&cfg, 5, vocab.words.clone()).unwrap();
        // zero unembedding: exactly uniform output, so every answer ties
        for v in &mut model.param_mut("unembed").data {
            *v = 0.0;
        }
        let (retained, rate) =
            manipulation_check(&model, &examples, &template, &vocab, true).unwrap();
        assert!(retained.is_empty());
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn pipeline_is_deterministic_on_a_tiny_model() {
        let examples = generate_synthetic_dataset(&SyntheticFactSpec {
            n_entities: 3,
            n_attributes: 2,
            n_examples: 12,
            seed: 2,
        })
        .unwrap();
        let template = PromptTemplate::new(crate::tasks::DEFAULT_TEMPLATE.into()).unwrap();
        let vocab = build_vocab(&examples, &template);
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 1,
            d_ff: 8,
            vocab_size: vocab.len(),
            max_seq_len: 96,
        };
        let model = build_model(&cfg, 11, vocab.words.clone()).unwrap();
        let config = SelectionConfig {
            m: 3,
            both_orderings: false,
            ..SelectionConfig::default()
        };
        // a random model answers some examples correctly by chance; when at
        // least two survive, the pipeline must reproduce itself exactly
        match (
            select_truth_neurons(&model, &examples, &template, &vocab, &config),
            select_truth_neurons(&model, &examples, &template, &vocab, &config),
        ) {
            (Ok(r1), Ok(r2)) => {
                assert_eq!(r1.selection_half_ids, r2.selection_half_ids);
                assert_eq!(r1.candidates.neurons, r2.candidates.neurons);
                assert_eq!(r1.truth_neurons, r2.truth_neurons);
                // provenance separation
                for id in &r1.selection_half_ids {
                    assert!(!r1.test_half_ids.contains(id));
                }
            }
            (Err(SelectionError::TooFewExamples(_)), Err(SelectionError::TooFewExamples(_))) => {}
            other => panic!("non-deterministic outcome: {other:?}"),
        }
    }
}
