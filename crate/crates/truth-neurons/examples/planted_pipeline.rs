//! End-to-end demonstration on a synthetic fact world: train a toy model,
//! certify a planted neuron by exhaustive ablation, run the selection
//! pipeline, and measure the causal effect of suppressing what it found.
//!
//! Run with `cargo run --release --example planted_pipeline`.

use std::time::Instant;
use truth_neurons::intervention::{
    ablation_flip_sweep, evaluate_accuracy, random_control_mask, SuppressionMask,
};
use truth_neurons::model::{build_model, ModelConfig};
use truth_neurons::plant::{plant_truth_neuron, PlantConfig};
use truth_neurons::selection::{select_truth_neurons, SelectionConfig};
use truth_neurons::stats::welch_one_sided;
use truth_neurons::tasks::{
    build_vocab, generate_synthetic_dataset, PromptTemplate, SyntheticFactSpec, DEFAULT_TEMPLATE,
};
use truth_neurons::train::{
    holdout_split, render_training_set, train_toy, Hyperparams,
};

fn env_num<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let spec = SyntheticFactSpec {
        n_entities: env_num("ENTITIES", 4),
        n_attributes: env_num("ATTRIBUTES", 3),
        n_examples: env_num("EXAMPLES", 36),
        seed: env_num("DATA_SEED", 0),
    };
    let examples = generate_synthetic_dataset(&spec)?;
    let template = PromptTemplate::new(DEFAULT_TEMPLATE.into())?;
    let vocab = build_vocab(&examples, &template);
    println!(
        "dataset: {} examples, vocab {} words",
        examples.len(),
        vocab.len()
    );

    let config = ModelConfig {
        n_layers: env_num("LAYERS", 2),
        d_model: env_num("D_MODEL", 32),
        n_heads: env_num("HEADS", 2),
        d_ff: env_num("D_FF", 16),
        vocab_size: vocab.len(),
        max_seq_len: 96,
    };
    let mut model = build_model(&config, env_num("MODEL_SEED", 0), vocab.words.clone())?;

    let (train_ex, holdout_ex) = holdout_split(&examples);
    let train_rows = render_training_set(&train_ex, &template, &vocab, config.max_seq_len)?;
    let holdout_rows = render_training_set(&holdout_ex, &template, &vocab, config.max_seq_len)?;
    let hp = Hyperparams {
        lr: env_num("LR", 1e-3),
        steps: env_num("STEPS", 1500),
        batch: env_num("BATCH", 16),
        seed: env_num("TRAIN_SEED", 0),
        act_l1: env_num("ACT_L1", 1e-3),
    };
    let ckpt = std::env::var("MODEL_CKPT").ok();
    let cached = ckpt.as_ref().filter(|p| std::path::Path::new(p).exists());
    if let Some(path) = cached {
        model = truth_neurons::checkpoint::load_checkpoint(std::path::Path::new(path))?;
        println!("loaded checkpoint {path}");
    } else {
        let report = train_toy(&mut model, &train_rows, &holdout_rows, &hp)?;
        println!(
            "train: {} steps, final loss {:.4}, holdout xent {:.4} ({:.1}s)",
            report.steps,
            report.final_train_loss,
            report.holdout_cross_entropy,
            t0.elapsed().as_secs_f64()
        );
        if let Some(path) = ckpt.as_ref() {
            truth_neurons::checkpoint::save_checkpoint(&model, std::path::Path::new(path))?;
            println!("saved checkpoint {path}");
        }
    }

    let baseline = evaluate_accuracy(&model, &holdout_ex, &template, &vocab, None, 10, 99)?;
    println!("holdout accuracy: {:.3}", baseline.mean_accuracy);

    let plant = plant_truth_neuron(&mut model, &examples, &template, &vocab, &PlantConfig::default())?;
    println!(
        "planted {} via channel {} (theta {:.2}, mu {:.2}), {}/{} live prompts slot-A, flip {:.3}",
        plant.neuron,
        plant.channel,
        plant.threshold,
        plant.channel_gain,
        plant.slot_a_prompts,
        plant.live_prompts,
        plant.flip_fraction
    );
    let post_plant = evaluate_accuracy(&model, &holdout_ex, &template, &vocab, None, 10, 99)?;
    println!("holdout accuracy after plant: {:.3}", post_plant.mean_accuracy);

    let mut sweep = ablation_flip_sweep(&model, &examples, &template, &vocab)?;
    sweep.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("top single-neuron ablation flips:");
    for (n, flip) in sweep.iter().take(5) {
        println!("  {n}: {:.3}", flip);
    }
    let planted = sweep[0].0;
    assert_eq!(planted, plant.neuron, "ablation sweep should certify the plant");

    let sel_cfg = SelectionConfig::default();
    let sel = select_truth_neurons(&model, &examples, &template, &vocab, &sel_cfg)?;
    println!(
        "selection: retention {:.3}, {} candidates, {} truth neurons",
        sel.retention_rate,
        sel.candidates.neurons.len(),
        sel.truth_neurons.len()
    );
    for r in &sel.t_tests {
        println!(
            "  {}: D mean {:+.4e}, t {:+.2}, p {:.3e}, rejected {}",
            r.neuron, r.mean, r.t_statistic, r.p_value, r.rejected
        );
    }
    println!(
        "planted neuron {planted} recovered: {}",
        sel.truth_neurons.contains(&planted)
    );

    let full = evaluate_accuracy(&model, &examples, &template, &vocab, None, 10, 7)?;
    let mask = SuppressionMask::new(sel.truth_neurons.iter().copied());
    let suppressed =
        evaluate_accuracy(&model, &examples, &template, &vocab, Some(&mask), 10, 7)?;
    println!(
        "accuracy: baseline {:.3}, suppressed {:.3} (drop {:.1} points)",
        full.mean_accuracy,
        suppressed.mean_accuracy,
        100.0 * (full.mean_accuracy - suppressed.mean_accuracy)
    );
    if !sel.truth_neurons.is_empty() {
        let welch = welch_one_sided(
            &full.per_repetition_accuracy,
            &suppressed.per_repetition_accuracy,
        )?;
        println!("welch one-sided p: {:.3e}", welch.p_value);
        let mut control_deltas = Vec::new();
        for cs in 0..10u64 {
            let ctrl = random_control_mask(mask.neurons.len(), cs, &model)?;
            let r = evaluate_accuracy(&model, &examples, &template, &vocab, Some(&ctrl), 10, 7)?;
            control_deltas.push((r.mean_accuracy - full.mean_accuracy).abs());
        }
        let avg = 100.0 * control_deltas.iter().sum::<f64>() / control_deltas.len() as f64;
        println!("random-control mean |delta|: {:.2} points", avg);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
