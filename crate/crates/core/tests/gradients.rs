//! Finite-difference checks of whole models, from token ids to the loss.

use dialrank::fusion::Mode;
use dialrank::gradcheck::central_difference;
use dialrank::params::Bound;
use dialrank::synth::{generate, Dataset, DatasetConfig};
use dialrank::training::{HistoryOptions, Model, ModelConfig, ModelKind};
use dialrank::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data(seed: u64) -> Dataset {
    generate(&DatasetConfig {
        n_examples: 1,
        rounds: 3,
        candidates: 5,
        objects: 3,
        feature_dim: 5,
        kinds: 6,
        colors: 6,
        history_fraction: 0.0,
        train_ratio: 1.0,
        val_ratio: 0.0,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_model(kind: ModelKind, data: &Dataset, seed: u64) -> Model {
    let cfg = ModelConfig {
        kind,
        embed: 4,
        hidden: 4,
        factors: 2,
        d_m: 3,
        caption_in_question: false,
    };
    Model::init(cfg, data.vocab.len(), 5, seed).unwrap()
}

/// Loss of one training step with a fixed dropout stream, and optionally
/// the tape gradients of every parameter.
fn loss_and_grads(model: &Model, names: &[String], values: &[Tensor], data: &Dataset, grads: bool) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let vars: Vec<_> = values
        .iter()
        .map(|t| if grads { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let bound = Bound::from_vars(names.to_vec(), &vars);
    let ex = &data.examples[0];
    let history = HistoryOptions { limit: None, round_dropout: true };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = model.forward_batch(&bound, &[ex], Mode::Train, history, 0.25, &mut rng).unwrap();
    let loss = out.logits.cross_entropy(&out.targets).unwrap();
    let value = loss.value().data()[0];
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(values)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, g)
}

/// Every entry within `1e-4 · |numeric| + 1e-9`: relative where gradients
/// are sizeable, absolute where roundoff of the O(1) loss dominates.
fn check_model(kind: ModelKind, seed: u64) -> Vec<(String, f64)> {
    let data = tiny_data(seed);
    let model = tiny_model(kind, &data, seed);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let values: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = loss_and_grads(&model, &names, &values, &data, true);
    let mut work = values.clone();
    let mut norms = Vec::new();
    for (p, value) in values.iter().enumerate() {
        for i in 0..value.numel() {
            let base = value.data()[i];
            let numeric = central_difference(
                |x| {
                    work[p].data_mut()[i] = x;
                    loss_and_grads(&model, &names, &work, &data, false).0
                },
                base,
                1e-5,
            );
            work[p].data_mut()[i] = base;
            let auto = analytic[p].data()[i];
            assert!(
                (auto - numeric).abs() <= 1e-4 * numeric.abs() + 1e-9,
                "{kind} seed {seed} {}[{i}]: tape {auto:e}, numeric {numeric:e}",
                names[p]
            );
        }
        norms.push((names[p].clone(), analytic[p].data().iter().map(|g| g * g).sum::<f64>().sqrt()));
    }
    norms
}

#[test]
fn image_only_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_model(ModelKind::ImageOnly, seed);
    }
}

#[test]
fn joint_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_model(ModelKind::Joint, seed);
    }
}

#[test]
fn fused_model_gradients_reach_both_heads_and_the_encoders() {
    for seed in 0..3 {
        let norms = check_model(ModelKind::Cdf, seed);
        for prefix in ["enc.lstm_q", "enc.lstm_a", "enc.lstm_h", "enc.embed", "vis_proj", "img.", "joint."] {
            let total: f64 = norms.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, g)| g).sum();
            assert!(total > 0.0, "seed {seed}: no gradient reaches {prefix}");
        }
    }
}
