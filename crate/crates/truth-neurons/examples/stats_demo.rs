//! Hypothesis-testing toolkit walkthrough: one-sample t-test, Welch's
//! unequal-variance comparison, and a Bonferroni family correction.

use truth_neurons::model::{NeuronId, Site};
use truth_neurons::stats::{bonferroni, t_cdf, t_test_one_sample, welch_one_sided};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("Student t CDF: F(0, 5) = {}, F(2.015, 5) = {:.4}", t_cdf(0.0, 5.0), t_cdf(2.015, 5.0));

    let neuron = |i: usize| NeuronId {
        layer: 0,
        site: Site::Mlp,
        index: i,
    };
    // three candidate neurons; only the first has a clearly positive mean
    let samples: [&[f64]; 3] = [
        &[0.9, 1.1, 1.3, 0.8, 1.0, 1.2],
        &[0.1, -0.2, 0.3, -0.1, 0.2, 0.0],
        &[0.5, -0.4, 0.9, -0.7, 0.6, -0.3],
    ];
    let mut results = Vec::new();
    for (i, vals) in samples.iter().enumerate() {
        results.push(t_test_one_sample(neuron(i), vals, 0.0)?);
    }
    let threshold = bonferroni(&mut results, 0.05)?;
    println!("Bonferroni threshold for 3 tests at alpha 0.05: {threshold:.5}");
    for r in &results {
        println!(
            "  {}: t = {:+.3}, p = {:.5}, rejected = {}",
            r.neuron, r.t_statistic, r.p_value, r.rejected
        );
    }

    let baseline = [0.82, 0.85, 0.80, 0.84, 0.83, 0.81, 0.86, 0.82, 0.84, 0.85];
    let suppressed = [0.55, 0.60, 0.52, 0.58, 0.49, 0.57, 0.61, 0.54, 0.56, 0.53];
    let w = welch_one_sided(&baseline, &suppressed)?;
    println!(
        "Welch one-sided (baseline > suppressed): t = {:.3}, df = {:.2}, p = {:.3e}",
        w.t_statistic, w.degrees_of_freedom, w.p_value
    );
    Ok(())
}
