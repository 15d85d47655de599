//! Consensus dropout fusion: joint-head logits are zeroed for a random
//! subset of instances during training and rescaled for the rest.

use dialrank::fusion::{consensus, consensus_dropout_forward, instance_dropout, InstanceId, LogitMatrix, Mode, Provenance};
use dialrank::gradcheck::random_tensor;
use dialrank::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids: Vec<InstanceId> = (0..6).map(|i| InstanceId { example_id: i / 3, round: 1 + i % 3 }).collect();
    let l_i = LogitMatrix::new(ids.clone(), random_tensor(&mut rng, &[6, 4], 2.0), Provenance::ImageOnly)?;
    let l_j = LogitMatrix::new(ids, random_tensor(&mut rng, &[6, 4], 2.0), Provenance::Joint)?;

    let (dropped, mask) = instance_dropout(&l_j, 0.35, &mut rng)?;
    println!("mask xi = {:?}", mask.xi);
    println!("fused in training:\n{}", consensus(&l_i, &dropped)?.to_text());
    println!("fused in evaluation:\n{}", consensus(&l_i, &l_j)?.to_text());

    let tape = Tape::new();
    let (a, b) = (tape.param(l_i.values().clone()), tape.param(l_j.values().clone()));
    let (fused, mask) = consensus_dropout_forward(a, b, 0.35, Mode::Train, &mut rng)?;
    tape.backward(fused.cross_entropy(&[0, 1, 2, 3, 0, 1])?)?;
    let g = b.grad().unwrap();
    for (row, xi) in mask.unwrap().xi.iter().enumerate() {
        println!("instance {row}: xi {xi:.3}, joint gradient norm {:.4}", g.row_slice(row).iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(())
}
