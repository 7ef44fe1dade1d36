//! Neuron planting: after ordinary training, rewire one designated MLP
//! neuron in the last layer so it alone carries the "which slot holds the
//! correct answer" signal.
//!
//! The construction dedicates one residual coordinate as a private channel.
//! The least-used unembedding row is overwritten so that coordinate feeds
//! only the answer-label logits (+mu toward A, -mu toward B), and the final
//! layer-norm bias corrupts the channel with a constant -theta, a standing
//! push toward label B. The planted neuron detects "correct answer is in
//! slot A" from the residual stream and injects a large value into the
//! channel coordinate, lifting it well above theta. With the neuron intact
//! the channel answers slot-A prompts itself and stays quiet elsewhere;
//! with the neuron zeroed the corruption wins and every slot-A prompt
//! flips to B. The causal role is therefore built in, and re-verified
//! afterwards by the exhaustive ablation sweep.

use crate::intervention::{suppress_forward, SuppressionMask};
use crate::model::{Model, NeuronId, Site};
use crate::tasks::{
    case_summed_probability, correct_label, incorrect_label, render_prompt, Assignment,
    PromptInstance, PromptTemplate, QAExample, Vocab,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("model answers no prompts correctly with the correct answer in slot {0}")]
    NoLivePrompts(char),
    #[error("slot signal is not linearly separable at the planting site")]
    NotSeparable,
    #[error("no last-layer MLP neuron can be repurposed without breaking correct answers")]
    NoHostNeuron,
    #[error("channel activation gap too small: active min {active_min:.3} vs natural max {natural_max:.3}")]
    NoChannelGap { active_min: f64, natural_max: f64 },
    #[error("channel gain search exceeded {0} doublings")]
    SearchDiverged(usize),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Intervention(#[from] crate::intervention::InterventionError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantConfig {
    /// Minimum planted-neuron activation on slot-A prompts.
    pub activation_target: f64,
    /// Residual-channel injection at the activation target.
    pub injection: f64,
    /// Safety factor applied to the channel gain after the search.
    pub margin: f64,
    /// Cap on doubling iterations for the channel gain search.
    pub max_doublings: usize,
    /// Perceptron fix-up passes for the slot separator.
    pub separator_iters: usize,
    /// Ridge strength for the detector fit, relative to the mean feature
    /// variance. Larger values trade target precision for robustness of
    /// the detector to unrelated ablations.
    pub ridge: f64,
    /// Host neuron index override; picked by lowest influence if absent.
    pub index: Option<usize>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            activation_target: 4.0,
            injection: 30.0,
            margin: 1.5,
            max_doublings: 40,
            separator_iters: 400,
            ridge: 1e-2,
            index: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantReport {
    pub neuron: NeuronId,
    /// Hijacked residual coordinate.
    pub channel: usize,
    /// Corruption threshold theta (channel units).
    pub threshold: f64,
    /// Label-logit weight mu on the channel.
    pub channel_gain: f64,
    /// Prompts (example x ordering) the base model answered correctly.
    pub live_prompts: usize,
    pub slot_a_prompts: usize,
    /// Fraction of live prompts that flip when the planted neuron is zeroed.
    pub flip_fraction: f64,
}

fn answers_correctly(model: &Model, prompt: &PromptInstance) -> Result<bool, PlantError> {
    let (dist, _) = model.forward(&prompt.tokens, &[])?;
    let t = case_summed_probability(&dist, correct_label(prompt.assignment), &prompt.label_ids);
    let f = case_summed_probability(&dist, incorrect_label(prompt.assignment), &prompt.label_ids);
    Ok(t > f)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mlp_input_final_row(
    model: &Model,
    prompt: &PromptInstance,
    layer: usize,
) -> Result<Vec<f64>, PlantError> {
    let pass = model.forward_pass(&prompt.tokens, &[], None)?;
    let t = pass.tape.value(pass.hooks.mlp_input[layer]);
    let d = t.cols();
    Ok(t.data[(pass.seq_len - 1) * d..pass.seq_len * d].to_vec())
}

/// Final-norm channel value at the last position, optionally with the
/// planted neuron suppressed.
fn channel_value(
    model: &Model,
    prompt: &PromptInstance,
    coord: usize,
    suppressed: Option<NeuronId>,
) -> Result<f64, PlantError> {
    let overrides = match suppressed {
        Some(n) => SuppressionMask::new([n]).overrides(),
        None => Vec::new(),
    };
    let pass = model.forward_pass(&prompt.tokens, &overrides, None)?;
    let t = pass.tape.value(pass.final_norm);
    let d = t.cols();
    Ok(t.data[(pass.seq_len - 1) * d + coord])
}

/// Ridge regression of the detector targets (+target on slot-A rows,
/// -target on slot-B rows). Pinning both classes to constants keeps the
/// planted activation nearly uniform across prompts, which in turn keeps
/// its attribution smooth along the interpolation path.
fn ridge_detector(
    xs_a: &[Vec<f64>],
    xs_b: &[Vec<f64>],
    target: f64,
    ridge_factor: f64,
) -> Option<Vec<f64>> {
    let d = xs_a[0].len();
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (xs, y) in [(xs_a, target), (xs_b, -target)] {
        for x in xs {
            for i in 0..d {
                rhs[i] += y * x[i];
                for j in 0..d {
                    gram[i * d + j] += x[i] * x[j];
                }
            }
        }
    }
    let ridge = ridge_factor * (0..d).map(|i| gram[i * d + i]).sum::<f64>() / d as f64;
    for i in 0..d {
        gram[i * d + i] += ridge.max(1e-12);
    }
    // Gaussian elimination with partial pivoting
    let mut w = rhs;
    for col in 0..d {
        let pivot = (col..d).max_by(|&a, &b| gram[a * d + col].abs().total_cmp(&gram[b * d + col].abs()))?;
        if gram[pivot * d + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..d {
                gram.swap(col * d + j, pivot * d + j);
            }
            w.swap(col, pivot);
        }
        for row in col + 1..d {
            let f = gram[row * d + col] / gram[col * d + col];
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                gram[row * d + j] -= f * gram[col * d + j];
            }
            w[row] -= f * w[col];
        }
    }
    for col in (0..d).rev() {
        let mut acc = w[col];
        for j in col + 1..d {
            acc -= gram[col * d + j] * w[j];
        }
        w[col] = acc / gram[col * d + col];
    }
    Some(w)
}

/// Homogeneous linear separator between the two prompt groups: class-mean
/// difference refined by perceptron fix-ups until every projection has the
/// right sign. Fallback when the ridge fit does not separate.
fn separator(xs_a: &[Vec<f64>], xs_b: &[Vec<f64>], iters: usize) -> Option<Vec<f64>> {
    let d = xs_a[0].len();
    let mut w = vec![0.0; d];
    for x in xs_a {
        for i in 0..d {
            w[i] += x[i] / xs_a.len() as f64;
        }
    }
    for x in xs_b {
        for i in 0..d {
            w[i] -= x[i] / xs_b.len() as f64;
        }
    }
    for _ in 0..iters {
        let mut clean = true;
        for x in xs_a {
            if dot(&w, x) <= 0.0 {
                clean = false;
                for i in 0..d {
                    w[i] += x[i];
                }
            }
        }
        for x in xs_b {
            if dot(&w, x) >= 0.0 {
                clean = false;
                for i in 0..d {
                    w[i] -= x[i];
                }
            }
        }
        if clean {
            return Some(w);
        }
    }
    None
}

/// Rewires `model` in place; see the module docs for the construction.
pub fn plant_truth_neuron(
    model: &mut Model,
    examples: &[QAExample],
    template: &PromptTemplate,
    vocab: &Vocab,
    config: &PlantConfig,
) -> Result<PlantReport, PlantError> {
    let layer = model.config.n_layers - 1;
    let d = model.config.d_model;
    let d_ff = model.config.d_ff;
    let vsize = model.config.vocab_size;
    let max_len = model.config.max_seq_len;

    // live prompts: everything the base model currently gets right
    let mut a_live = Vec::new();
    let mut b_live = Vec::new();
    for ex in examples {
        for assignment in [Assignment::CorrectIsA, Assignment::CorrectIsB] {
            let prompt = render_prompt(ex, assignment, template, vocab, max_len)?;
            if answers_correctly(model, &prompt)? {
                match assignment {
                    Assignment::CorrectIsA => a_live.push(prompt),
                    Assignment::CorrectIsB => b_live.push(prompt),
                }
            }
        }
    }
    if a_live.is_empty() {
        return Err(PlantError::NoLivePrompts('A'));
    }
    if b_live.is_empty() {
        return Err(PlantError::NoLivePrompts('B'));
    }

    // slot-A detector direction at the last layer's MLP input
    let xs_a: Vec<Vec<f64>> = a_live
        .iter()
        .map(|p| mlp_input_final_row(model, p, layer))
        .collect::<Result<_, _>>()?;
    let xs_b: Vec<Vec<f64>> = b_live
        .iter()
        .map(|p| mlp_input_final_row(model, p, layer))
        .collect::<Result<_, _>>()?;
    let detector = {
        let ls = ridge_detector(&xs_a, &xs_b, config.activation_target, config.ridge).filter(|w| {
            let min_a = xs_a.iter().map(|x| dot(w, x)).fold(f64::INFINITY, f64::min);
            let max_b = xs_b.iter().map(|x| dot(w, x)).fold(f64::NEG_INFINITY, f64::max);
            min_a >= 0.5 * config.activation_target && max_b <= -0.25 * config.activation_target
        });
        match ls {
            Some(w) => w,
            None => {
                let w = separator(&xs_a, &xs_b, config.separator_iters)
                    .ok_or(PlantError::NotSeparable)?;
                let norm = dot(&w, &w).sqrt();
                let w_hat: Vec<f64> = w.iter().map(|v| v / norm).collect();
                let min_a = xs_a
                    .iter()
                    .map(|x| dot(&w_hat, x))
                    .fold(f64::INFINITY, f64::min);
                let scale = config.activation_target / min_a;
                w_hat.iter().map(|v| scale * v).collect()
            }
        }
    };

    // channel coordinate: the unembedding row with the least say
    let channel = {
        let u = &model.param("unembed").data;
        (0..d)
            .min_by(|&a, &b| {
                let na: f64 = u[a * vsize..(a + 1) * vsize].iter().map(|x| x * x).sum();
                let nb: f64 = u[b * vsize..(b + 1) * vsize].iter().map(|x| x * x).sum();
                na.total_cmp(&nb)
            })
            .expect("d_model > 0")
    };

    // host neuron: lowest product of activation magnitude and output norm,
    // so overwriting it disturbs the trained circuit least
    let host_order: Vec<usize> = match config.index {
        Some(i) => vec![i],
        None => {
            let mut influence: Vec<(f64, usize)> = (0..d_ff)
                .map(|i| {
                    let out_norm = {
                        let p = model.param(&format!("layer{layer}.mlp_out"));
                        let r = &p.data[i * d..(i + 1) * d];
                        dot(r, r).sqrt()
                    };
                    let max_act = a_live
                        .iter()
                        .chain(&b_live)
                        .map(|p| {
                            let (_, rec) = model.forward(&p.tokens, &[]).unwrap();
                            rec.value(
                                NeuronId { layer, site: Site::Mlp, index: i },
                                p.tokens.len() - 1,
                            )
                            .abs()
                        })
                        .fold(0.0, f64::max);
                    (out_norm * max_act, i)
                })
                .collect();
            influence.sort_by(|a, b| a.0.total_cmp(&b.0));
            influence.into_iter().map(|(_, i)| i).take(3).collect()
        }
    };

    let ids = vocab.label_ids(false)?;
    let saved = model.clone();
    'hosts: for &index in &host_order {
        *model = saved.clone();
        let neuron = NeuronId { layer, site: Site::Mlp, index };

        // detector in, channel injection out, old role disconnected
        {
            let p = model.param_mut(&format!("layer{layer}.mlp_in"));
            for r in 0..d {
                p.data[r * d_ff + index] = detector[r];
            }
        }
        {
            let p = model.param_mut(&format!("layer{layer}.mlp_out"));
            for c in 0..d {
                p.data[index * d + c] = 0.0;
            }
            p.data[index * d + channel] = config.injection / config.activation_target;
        }
        // the channel feeds only the label logits from here on
        {
            let p = model.param_mut("unembed");
            for c in 0..vsize {
                p.data[channel * vsize + c] = 0.0;
            }
        }
        // disconnect must not break anything before the channel goes live
        for p in a_live.iter().chain(&b_live) {
            if !answers_correctly(model, p)? {
                continue 'hosts;
            }
        }

        // threshold between natural channel values and injected ones
        let mut natural_max = f64::NEG_INFINITY;
        let mut active_min = f64::INFINITY;
        for p in a_live.iter().chain(&b_live) {
            natural_max = natural_max.max(channel_value(model, p, channel, Some(neuron))?);
        }
        for p in &a_live {
            active_min = active_min.min(channel_value(model, p, channel, None)?);
        }
        if active_min <= natural_max + 0.5 {
            continue 'hosts;
        }
        let theta = 0.5 * (natural_max + active_min);
        model.param_mut("final_ln_bias").data[channel] = -theta;

        // grow the channel gain until it both restores slot-A answers and
        // flips them under suppression
        let mask = SuppressionMask::new([neuron]);
        let mut mu = 0.125;
        let mut found = false;
        for _ in 0..config.max_doublings {
            {
                let p = model.param_mut("unembed");
                for &c in &ids.a {
                    p.data[channel * vsize + c] = mu;
                }
                for &c in &ids.b {
                    p.data[channel * vsize + c] = -mu;
                }
            }
            let mut ok = true;
            for p in a_live.iter().chain(&b_live) {
                if !answers_correctly(model, p)? {
                    ok = false;
                    break;
                }
            }
            if ok {
                for p in &a_live {
                    let dist = suppress_forward(model, &mask, &p.tokens)?;
                    let t = case_summed_probability(
                        &dist,
                        correct_label(p.assignment),
                        &p.label_ids,
                    );
                    let f = case_summed_probability(
                        &dist,
                        incorrect_label(p.assignment),
                        &p.label_ids,
                    );
                    if t > f {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                found = true;
                break;
            }
            mu *= 2.0;
        }
        if !found {
            continue 'hosts;
        }
        mu *= config.margin;
        {
            let p = model.param_mut("unembed");
            for &c in &ids.a {
                p.data[channel * vsize + c] = mu;
            }
            for &c in &ids.b {
                p.data[channel * vsize + c] = -mu;
            }
        }

        // final certification with the margin applied
        for p in a_live.iter().chain(&b_live) {
            if !answers_correctly(model, p)? {
                continue 'hosts;
            }
        }
        let mut flips = 0usize;
        for p in a_live.iter().chain(&b_live) {
            let dist = suppress_forward(model, &mask, &p.tokens)?;
            let t = case_summed_probability(&dist, correct_label(p.assignment), &p.label_ids);
            let f = case_summed_probability(&dist, incorrect_label(p.assignment), &p.label_ids);
            if t <= f {
                flips += 1;
            }
        }
        let live = a_live.len() + b_live.len();
        return Ok(PlantReport {
            neuron,
            channel,
            threshold: theta,
            channel_gain: mu,
            live_prompts: live,
            slot_a_prompts: a_live.len(),
            flip_fraction: flips as f64 / live as f64,
        });
    }
    *model = saved;
    Err(PlantError::NoHostNeuron)
}
