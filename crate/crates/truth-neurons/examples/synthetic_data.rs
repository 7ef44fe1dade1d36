//! Synthetic fact-world generation plus a lossless JSONL round trip.

use truth_neurons::tasks::{
    build_vocab, generate_synthetic_dataset, load_dataset, write_dataset, DatasetFormat,
    PromptTemplate, SyntheticFactSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let examples = generate_synthetic_dataset(&SyntheticFactSpec {
        n_entities: 4,
        n_attributes: 3,
        n_examples: 24,
        seed: 42,
    })?;
    println!("generated {} examples", examples.len());
    for ex in examples.iter().take(3) {
        println!(
            "  [{}] {:<28} correct={:<8} incorrect={:<8} category={}",
            ex.id, ex.question, ex.correct, ex.incorrect, ex.category
        );
    }

    let template = PromptTemplate::default();
    let vocab = build_vocab(&examples, &template);
    println!("vocabulary: {} words", vocab.len());
    let rendered = template.fill(&examples[0], truth_neurons::tasks::Assignment::CorrectIsA);
    println!("--- rendered prompt ---\n{rendered}\n-----------------------");

    let dir = std::env::temp_dir().join("truth-neurons-synthetic-data");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("facts.jsonl");
    write_dataset(&path, &examples)?;
    let reloaded = load_dataset(&path, DatasetFormat::TruthfulqaJsonl)?;
    assert_eq!(examples, reloaded, "JSONL round trip must be lossless");
    println!("wrote and reloaded {} ({} examples, identical)", path.display(), reloaded.len());
    Ok(())
}
