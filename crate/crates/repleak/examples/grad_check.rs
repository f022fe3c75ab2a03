//! Finite-difference check of the full classifier objective.
//!
//! Builds a small encoder + head, computes the categorical NLL of one
//! sequence, and compares reverse-mode gradients against central
//! differences for every parameter coordinate.
//!
//! Run with: cargo run --release --example grad_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repleak::nn::{head_forward, lstm_encode, Encoder, Head};
use repleak::tape::grad_check;
use repleak::tensor::Params;

fn main() -> repleak::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = Params::new();
    let enc = Encoder::init(&mut params, &mut rng, 12, 6)?;
    let head = Head::init(&mut params, &mut rng, "main", 6, 3)?;
    let tokens = [1usize, 5, 9, 2, 7];

    let n_coords: usize = params.iter().map(|p| p.value.len()).sum();
    println!("checking {n_coords} parameter coordinates...");

    let max_rel_err = grad_check(
        &mut params,
        |tape, p| {
            let bind = tape.bind(p, true);
            let mut dummy = ChaCha8Rng::seed_from_u64(0);
            let r = lstm_encode(tape, &bind, &enc, &tokens, 0.0, false, &mut dummy)?;
            let logits = head_forward(tape, &bind, &head, r)?;
            tape.nll_categorical(logits, 1)
        },
        1e-5,
    )?;

    println!("max relative error: {max_rel_err:.3e}");
    assert!(max_rel_err < 1e-4);
    println!("analytic gradients match finite differences");
    Ok(())
}
