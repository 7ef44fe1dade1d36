//! Save a model, reload it, and confirm the bytes and the forward pass
//! are unchanged.

use truth_neurons::checkpoint::{load_checkpoint, save_checkpoint};
use truth_neurons::model::{build_model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 9,
        max_seq_len: 16,
    };
    let vocab: Vec<String> = (0..9).map(|i| format!("tok{i}")).collect();
    let model = build_model(&cfg, 99, vocab)?;

    let dir = std::env::temp_dir().join("truth-neurons-checkpoint-demo");
    std::fs::create_dir_all(&dir)?;
    let a = dir.join("model_a.bin");
    let b = dir.join("model_b.bin");
    save_checkpoint(&model, &a)?;
    let reloaded = load_checkpoint(&a)?;
    save_checkpoint(&reloaded, &b)?;

    let (bytes_a, bytes_b) = (std::fs::read(&a)?, std::fs::read(&b)?);
    assert_eq!(bytes_a, bytes_b, "save/load/save must be bit-identical");
    println!("checkpoint round trip: {} bytes, bit-identical", bytes_a.len());

    let tokens = [1usize, 7, 3, 0];
    let (d1, _) = model.forward(&tokens, &[])?;
    let (d2, _) = reloaded.forward(&tokens, &[])?;
    assert_eq!(d1, d2, "reloaded model must reproduce the forward pass exactly");
    println!("forward distributions identical across reload ({} entries)", d1.len());
    Ok(())
}
