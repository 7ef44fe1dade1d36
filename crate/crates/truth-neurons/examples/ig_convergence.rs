//! Integrated-gradient step-count study: per-neuron attributions converge
//! to the exact activation-patch difference as m grows.

use truth_neurons::attribution::{activation_patch_difference, neuron_ig, Target};
use truth_neurons::model::{build_model, ModelConfig, NeuronId, Site};
use truth_neurons::tasks::{
    build_vocab, generate_synthetic_dataset, render_prompt, Assignment, PromptTemplate,
    SyntheticFactSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let examples = generate_synthetic_dataset(&SyntheticFactSpec {
        n_entities: 3,
        n_attributes: 2,
        n_examples: 6,
        seed: 11,
    })?;
    let template = PromptTemplate::default();
    let vocab = build_vocab(&examples, &template);
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 12,
        vocab_size: vocab.len(),
        max_seq_len: 96,
    };
    let model = build_model(&cfg, 5, vocab.words.clone())?;
    let prompt = render_prompt(&examples[0], Assignment::CorrectIsA, &template, &vocab, 96)?;

    let neuron = NeuronId {
        layer: 1,
        site: Site::Mlp,
        index: 3,
    };
    let exact = activation_patch_difference(&model, &prompt, neuron, Target::CorrectLabel)?;
    println!("neuron {neuron}: patch difference f(x) - f(x | n=0) = {exact:+.9e}");
    println!("{:>6}  {:>15}  {:>10}", "m", "approximation", "abs error");
    for m in [1usize, 2, 5, 10, 20, 50, 100, 200] {
        let approx = neuron_ig(&model, &prompt, neuron, Target::CorrectLabel, m)?;
        println!("{m:>6}  {approx:>+15.9e}  {:>10.3e}", (approx - exact).abs());
    }
    Ok(())
}
