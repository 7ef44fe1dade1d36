//! Suppression evaluation on a small trained model: baseline accuracy,
//! a random-mask control, category reductions, and the layer histogram.

use truth_neurons::intervention::{
    category_reduction_report, evaluate_accuracy, layer_distribution, random_control_mask,
};
use truth_neurons::model::{build_model, ModelConfig};
use truth_neurons::stats::welch_one_sided;
use truth_neurons::tasks::{
    build_vocab, generate_synthetic_dataset, PromptTemplate, SyntheticFactSpec,
};
use truth_neurons::train::{render_training_set, train_toy, Hyperparams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let examples = generate_synthetic_dataset(&SyntheticFactSpec {
        n_entities: 3,
        n_attributes: 2,
        n_examples: 12,
        seed: 7,
    })?;
    let template = PromptTemplate::default();
    let vocab = build_vocab(&examples, &template);
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 24,
        n_heads: 2,
        d_ff: 8,
        vocab_size: vocab.len(),
        max_seq_len: 96,
    };
    let mut model = build_model(&cfg, 3, vocab.words.clone())?;
    let train = render_training_set(&examples, &template, &vocab, cfg.max_seq_len)?;
    let report = train_toy(
        &mut model,
        &train,
        &[],
        &Hyperparams {
            lr: 1e-3,
            steps: 300,
            batch: 8,
            seed: 0,
            act_l1: 0.0,
        },
    )?;
    println!("trained {} steps, final loss {:.4}", report.steps, report.final_train_loss);

    let baseline = evaluate_accuracy(&model, &examples, &template, &vocab, None, 10, 17)?;
    println!(
        "baseline: mean accuracy {:.3} (std {:.3}) over {} repetitions",
        baseline.mean_accuracy, baseline.accuracy_std, baseline.repetitions
    );

    let mask = random_control_mask(4, 5, &model)?;
    let masked = evaluate_accuracy(&model, &examples, &template, &vocab, Some(&mask), 10, 17)?;
    println!(
        "random 4-neuron mask: mean accuracy {:.3}, mean probability change {:?}",
        masked.mean_accuracy, masked.mean_probability_change
    );
    let w = welch_one_sided(&baseline.per_repetition_accuracy, &masked.per_repetition_accuracy)?;
    println!("Welch one-sided p (masked below baseline): {:.3}", w.p_value);

    let cats = category_reduction_report(&masked, 3);
    for c in &cats.included {
        println!(
            "  category {}: {} examples, reduction fraction {:.3}",
            c.category, c.example_count, c.reduction_fraction
        );
    }
    for (cat, n) in &cats.omitted {
        println!("  category {cat}: omitted ({n} examples, below minimum)");
    }

    let hist = layer_distribution(&mask.neurons, cfg.n_layers);
    println!("mask layer fractions: {:?}", hist.fractions);
    Ok(())
}
