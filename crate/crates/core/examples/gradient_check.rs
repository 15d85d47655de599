//! Reverse-mode gradients of a small expression, checked against central
//! differences.

use dialrank::gradcheck::{check_gradients, random_tensor};
use dialrank::{concat_cols, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let tape = Tape::new();
    let x = tape.param(dialrank::Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0])?);
    let w = tape.param(dialrank::Tensor::matrix(4, 3, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())?);
    let y = x.matmul_t(w)?.tanh().softmax(1)?;
    let loss = y.slice_cols(0, 1)?.scale_rows(&[1.0, 2.0])?.sum();
    tape.backward(loss)?;
    println!("loss = {:.6}", loss.value().data()[0]);
    println!("dL/dx = {:?}", x.grad().unwrap().data());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = vec![random_tensor(&mut rng, &[3, 4], 1.0), random_tensor(&mut rng, &[3, 2], 1.0)];
    let report = check_gradients(&inputs, 1e-5, |_, v| {
        let z = concat_cols(&[v[0], v[1]]).unwrap();
        z.sigmoid().l2_normalize(1).unwrap().mul(z).unwrap().sum()
    });
    println!(
        "finite-difference check over {} entries: max relative error {:.2e}",
        report.entries, report.max_rel_error
    );
    Ok(())
}
