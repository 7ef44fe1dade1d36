//! Finite-difference validation of the reverse-mode tape, op by op and
//! through a full model forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use truth_neurons::model::{build_model, ModelConfig};
use truth_neurons::tensor::{finite_difference_check, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let err = finite_difference_check(
        |tape, x| {
            let g = tape.gelu(x)?;
            let s = tape.softmax_rows(g)?;
            tape.select_sum(s, &[0, 5, 11])
        },
        &point,
        1e-5,
    )?;
    println!("gelu+softmax chain: max relative error {err:.3e}");

    // whole model: random projection of the logits as the scalar output
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 12,
        n_heads: 2,
        d_ff: 8,
        vocab_size: 11,
        max_seq_len: 8,
    };
    let model = build_model(&cfg, 7, (0..11).map(|i| format!("w{i}")).collect())?;
    let tokens = [1usize, 4, 9, 2];
    let mut pass = model.forward_pass(&tokens, &[], None)?;
    let f = pass.tape.select_sum(pass.dist, &[0, 3, 7])?;
    pass.tape.backward(f)?;
    let emb_grad = pass.tape.grad(pass.param_nodes[0]);
    println!(
        "token-embedding gradient norm through the full model: {:.3e}",
        emb_grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    );

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.5))?;
    let y = tape.mul(x, x)?;
    let y = tape.select_sum(y, &[0])?;
    tape.backward(y)?;
    println!("d(x^2)/dx at 0.5 = {} (analytic 1.0)", tape.grad(x)[0]);
    Ok(())
}
