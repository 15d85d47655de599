//! Generates a small dialog dataset with a planted history signal and
//! prints one example in its text format.

use dialrank::synth::{generate_with_latents, DatasetConfig};

fn main() -> anyhow::Result<()> {
    let cfg = DatasetConfig { n_examples: 14, seed: 4, ..DatasetConfig::default() };
    let (data, latents) = generate_with_latents(&cfg)?;
    let ex = &data.examples[0];
    println!("objects of example 0 (kind, color): {:?}", latents[0].iter().map(|o| (o.kind, o.color)).collect::<Vec<_>>());
    println!("caption: {}", data.vocab.decode(&ex.caption));
    for (r, round) in ex.rounds.iter().enumerate() {
        println!(
            "round {}: {} -> {}{}",
            r + 1,
            data.vocab.decode(&round.question),
            data.vocab.decode(&round.answer),
            if round.needs_history { "  [needs history]" } else { "" }
        );
    }
    let (train, val) = data.split(cfg.train_ratio);
    println!("{} train / {} val examples, {} instances", train.examples.len(), val.examples.len(), data.n_instances());
    // text format, feature rows elided
    let text = data.to_text();
    let shown: Vec<&str> = text.lines().filter(|l| l.starts_with(char::is_alphabetic)).take(12).collect();
    println!("{}", shown.join("\n"));
    Ok(())
}
