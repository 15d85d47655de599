//! Which history rows are removed at each round, and how truncation to the
//! last k rows composes with it.

use dialrank::joint::{dropped_count, round_dropout, truncated_rows};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("rows  dropped  kept (0-based; row 0 is the caption)");
    for n_h in 1..=10 {
        let plan = round_dropout(n_h, n_h, &mut rng);
        assert_eq!(plan.dropped.len(), dropped_count(n_h));
        println!("{n_h:>4}  {:>7}  {:?}", plan.dropped.len(), plan.kept_rows());
    }
    println!("last 2 of 6 rows: {:?}", truncated_rows(6, 2));
}
