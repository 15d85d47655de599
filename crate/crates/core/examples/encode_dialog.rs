//! Encodes the question, history rows and candidate answers of one round.

use dialrank::encoders::{encode_dialog, history_sequences, Encoders};
use dialrank::synth::{generate, DatasetConfig};
use dialrank::training::{Model, ModelConfig, ModelKind};
use dialrank::Tape;

fn main() -> anyhow::Result<()> {
    let data = generate(&DatasetConfig { n_examples: 2, ..DatasetConfig::default() })?;
    let model = Model::init(ModelConfig { kind: ModelKind::Joint, ..ModelConfig::default() }, data.vocab.len(), 24, 0)?;
    let ex = &data.examples[0];
    let round = 3;
    for (i, row) in history_sequences(ex, round)?.iter().enumerate() {
        println!("history row {i}: {}", data.vocab.decode(row));
    }
    println!("question: {}", data.vocab.decode(&ex.rounds[round - 1].question));

    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let enc = encode_dialog(ex, round, &Encoders::from_bound(&bound)?)?;
    println!(
        "question {:?}, history {:?}, answers {:?}",
        enc.question.shape(),
        enc.history.shape(),
        enc.answers.shape()
    );
    Ok(())
}
