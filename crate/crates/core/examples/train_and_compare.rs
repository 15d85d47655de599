//! Trains both heads briefly, then compares them per question type and
//! fuses their logits.

use dialrank::fusion::ensemble;
use dialrank::metrics::{align, annotations_from_dataset, complementarity, recall_at, MetricReport};
use dialrank::synth::{generate, DatasetConfig};
use dialrank::training::{train, LrSchedule, Model, ModelConfig, ModelKind, TrainConfig};

fn main() -> anyhow::Result<()> {
    let cfg = DatasetConfig { n_examples: 210, ..DatasetConfig::default() };
    let data = generate(&cfg)?;
    let (tr, val) = data.split(cfg.train_ratio);
    let ann = annotations_from_dataset(&val);
    let flags: Vec<bool> = val.examples.iter().flat_map(|e| e.rounds.iter().map(|r| r.needs_history)).collect();
    let tc = TrainConfig { epochs: 15, schedule: LrSchedule::desk(), select_best: false, ..TrainConfig::default() };

    let mut logits = Vec::new();
    for kind in [ModelKind::ImageOnly, ModelKind::Joint] {
        let model = Model::init(ModelConfig { kind, ..ModelConfig::default() }, data.vocab.len(), cfg.feature_dim, 0)?;
        let out = train(model, &tr, Some(&val), &tc, |rec| {
            if rec.epoch % 5 == 0 {
                println!("{kind} epoch {:>2} lr {:.5} loss {:.3}", rec.epoch, rec.lr, rec.loss);
            }
        })?;
        let l = out.model.logits(&val, None, 8)?;
        let inst = align(&l, &ann)?;
        let split = |want: bool| {
            let part: Vec<_> = inst.iter().zip(&flags).filter(|(_, &f)| f == want).map(|(i, _)| i.clone()).collect();
            recall_at(&part, 1)
        };
        println!("{kind}: R@1 on image questions {:.3}, on history questions {:.3}", split(false)?, split(true)?);
        println!("{}", MetricReport::evaluate(&inst)?);
        logits.push(l);
    }
    let (a, b) = (align(&logits[0], &ann)?, align(&logits[1], &ann)?);
    println!("{}", complementarity(&a, &b)?);
    println!("I+J ensemble\n{}", MetricReport::evaluate(&align(&ensemble(&logits)?, &ann)?)?);
    Ok(())
}
