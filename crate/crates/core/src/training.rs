//! Models, loss, optimiser, learning-rate schedule, checkpoints and the
//! training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{init_encoder_params, EncoderDims, Encoders, SequenceBatch};
use crate::error::{Error, Result};
use crate::fusion::{consensus_dropout_forward, InstanceDropoutMask, InstanceId, LogitMatrix, Mode, Provenance};
use crate::image_only::{init_image_only_params, init_visual_projection, project_visual, ImageOnlyDims, ImageOnlyParams};
use crate::joint::{init_joint_params, round_dropout, truncated_rows, JointDims, JointParams};
use crate::metrics::{align, annotations_from_dataset, MetricReport};
use crate::params::{Bound, ParamStore};
use crate::synth::{join_floats, parse_float, parse_usize, Dataset, DialogExample};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ImageOnly,
    Joint,
    /// Consensus dropout fusion: both heads over shared encoders, trained
    /// together on summed logits.
    Cdf,
}

impl ModelKind {
    pub fn uses_image_head(self) -> bool {
        matches!(self, ModelKind::ImageOnly | ModelKind::Cdf)
    }

    pub fn uses_joint_head(self) -> bool {
        matches!(self, ModelKind::Joint | ModelKind::Cdf)
    }

    pub fn provenance(self) -> Provenance {
        match self {
            ModelKind::ImageOnly => Provenance::ImageOnly,
            ModelKind::Joint => Provenance::Joint,
            ModelKind::Cdf => Provenance::Fused,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ImageOnly => "image_only",
            ModelKind::Joint => "joint",
            ModelKind::Cdf => "cdf",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_only" => Ok(ModelKind::ImageOnly),
            "joint" => Ok(ModelKind::Joint),
            "cdf" => Ok(ModelKind::Cdf),
            other => Err(Error::Config(format!("unknown model {other:?}; expected image_only, joint or cdf"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed: usize,
    /// Width `d` of every encoding and of the projected objects.
    pub hidden: usize,
    /// MFB factor count `m`.
    pub factors: usize,
    /// MFB output width `d_m`.
    pub d_m: usize,
    /// Prepend the caption to the question tokens. Off by default, which
    /// keeps the image-only head free of any dialog text.
    pub caption_in_question: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::ImageOnly,
            embed: 32,
            hidden: 32,
            factors: 2,
            d_m: 64,
            caption_in_question: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.factors == 0 || self.d_m == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Linear decrements until `linear_until`, then geometric decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decrement: f64,
    pub linear_until: usize,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.001,
            decrement: 0.0001,
            linear_until: 8,
            decay: 0.5,
        }
    }
}

impl LrSchedule {
    /// Desk-scale schedule: 0.003 held for 25 epochs, then decayed by 0.7
    /// per epoch. A few hundred dialogs give too few steps per epoch for
    /// the default schedule, which is nearly zero after epoch 12.
    pub fn desk() -> Self {
        Self {
            base: 0.003,
            decrement: 0.0,
            linear_until: 25,
            decay: 0.7,
        }
    }

    /// A schedule holding `lr` for every epoch.
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            decrement: 0.0,
            linear_until: 1,
            decay: 1.0,
        }
    }

    /// Learning rate for 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 {
            return Err(Error::Invalid("epochs are numbered from 1".into()));
        }
        // snapped to a 1e-12 grid so that decimal rates come out exactly,
        // e.g. 0.001 - 7 * 0.0001 == 0.0003
        let linear = |e: usize| ((self.base - self.decrement * (e - 1) as f64) * 1e12).round() / 1e12;
        let lr = if epoch <= self.linear_until {
            linear(epoch)
        } else {
            linear(self.linear_until) * self.decay.powi((epoch - self.linear_until) as i32)
        };
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} at epoch {epoch} is not positive")));
        }
        Ok(lr)
    }
}

/// 0.001 lowered by 0.0001 after each epoch up to epoch 8, then halved
/// every epoch: 0.001, 0.0009, ..., 0.0003, 0.00015, 0.000075, ...
pub fn lr_at(epoch: usize) -> Result<f64> {
    LrSchedule::default().at(epoch)
}

/// `−log softmax(logits)[gt]`, computed with the maximum subtracted.
pub fn cross_entropy(logits: &[f64], gt_index: usize) -> Result<f64> {
    if gt_index >= logits.len() {
        return Err(Error::OutOfRange {
            what: "gt_index",
            index: gt_index,
            len: logits.len(),
        });
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[gt_index])
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// How history rows are chosen during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HistoryOptions {
    /// Keep only the caption and this many most recent QA rows.
    pub limit: Option<usize>,
    /// Sample round dropout (training mode only).
    pub round_dropout: bool,
}

/// A model: configuration, feature width and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub d_v: usize,
    pub params: ParamStore,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput<'t> {
    /// `[n × C]` logits of the configured model.
    pub logits: Var<'t>,
    pub image_logits: Option<Var<'t>>,
    pub joint_logits: Option<Var<'t>>,
    pub targets: Vec<usize>,
    pub ids: Vec<InstanceId>,
    pub mask: Option<InstanceDropoutMask>,
}

impl Model {
    /// Fresh parameters. Encoders and the visual projection are created
    /// first, so models of different kinds share them under one seed.
    pub fn init(config: ModelConfig, vocab: usize, d_v: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden;
        init_encoder_params(
            &mut params,
            EncoderDims {
                vocab,
                embed: config.embed,
                hidden: d,
            },
            &mut rng,
        );
        init_visual_projection(&mut params, d_v, d, &mut rng);
        if config.kind.uses_image_head() {
            let dims = ImageOnlyDims {
                d_v,
                d,
                factors: config.factors,
                d_m: config.d_m,
            };
            init_image_only_params(&mut params, dims, &mut rng);
        }
        if config.kind.uses_joint_head() {
            let dims = JointDims {
                d,
                factors: config.factors,
                d_m: config.d_m,
            };
            init_joint_params(&mut params, dims, &mut rng);
        }
        Ok(Self { config, d_v, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    fn question_tokens(&self, ex: &DialogExample, round: usize) -> Vec<usize> {
        let q = &ex.rounds[round - 1].question;
        if self.config.caption_in_question {
            ex.caption.iter().chain(q).copied().collect()
        } else {
            q.clone()
        }
    }

    /// Logits for every round of every example in `batch`, instances in
    /// example-major order. `rng` drives round and instance dropout in
    /// training mode and is untouched in evaluation.
    pub fn forward_batch<'t, R: Rng>(
        &self,
        bound: &Bound<'t>,
        batch: &[&DialogExample],
        mode: Mode,
        history: HistoryOptions,
        p: f64,
        rng: &mut R,
    ) -> Result<BatchOutput<'t>> {
        let kind = self.kind();
        let enc = Encoders::from_bound(bound)?;
        let tape = enc.embed.tape();

        let (mut qb, mut hb, mut ab) = (SequenceBatch::new(), SequenceBatch::new(), SequenceBatch::new());
        let mut q_slots = Vec::new();
        let mut a_slots = Vec::new();
        let mut h_slots: Vec<Vec<usize>> = Vec::new();
        for ex in batch {
            if ex.image.dims2().is_none_or(|(_, c)| c != self.d_v) {
                return Err(Error::shape("image features", ex.image.shape(), &[0, self.d_v]));
            }
            for r in 1..=ex.rounds.len() {
                q_slots.push(qb.add(&self.question_tokens(ex, r))?);
                a_slots.push(
                    ex.rounds[r - 1]
                        .candidates
                        .iter()
                        .map(|c| ab.add(c))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            if kind.uses_joint_head() {
                // row 0 is the caption, row j the QA pair of round j
                let mut rows = vec![hb.add(&ex.caption)?];
                for round in &ex.rounds[..ex.rounds.len().saturating_sub(1)] {
                    let mut qa = round.question.clone();
                    qa.extend(&round.answer);
                    rows.push(hb.add(&qa)?);
                }
                h_slots.push(rows);
            }
        }
        let q_table = qb.encode(&enc.question, enc.embed)?;
        let a_table = ab.encode(&enc.answer, enc.embed)?;
        let h_table = if kind.uses_joint_head() {
            Some(hb.encode(&enc.history, enc.embed)?)
        } else {
            None
        };
        let img = if kind.uses_image_head() {
            Some(ImageOnlyParams::from_bound(bound)?)
        } else {
            None
        };
        let joint = if kind.uses_joint_head() {
            Some(JointParams::from_bound(bound)?)
        } else {
            None
        };
        let vis_proj = img.map_or_else(|| joint.map(|j| j.vis_proj), |i| Some(i.vis_proj)).expect("a head");

        let mut rows_i = Vec::new();
        let mut rows_j = Vec::new();
        let mut targets = Vec::new();
        let mut ids = Vec::new();
        let mut inst = 0;
        for (e, ex) in batch.iter().enumerate() {
            let v = project_visual(tape.constant(ex.image.clone()), &vis_proj)?;
            for (r0, round) in ex.rounds.iter().enumerate() {
                let r = r0 + 1;
                let q = q_table.rows(&[q_slots[inst]])?;
                let a = a_table.rows(&a_slots[inst])?;
                if let Some(p) = &img {
                    rows_i.push(p.score(v, q, a)?);
                }
                if let (Some(p), Some(table)) = (&joint, &h_table) {
                    let visible = &h_slots[e][..r];
                    let mut keep = match history.limit {
                        Some(k) => truncated_rows(r, k),
                        None => (0..r).collect(),
                    };
                    if mode == Mode::Train && history.round_dropout {
                        let plan = round_dropout(r, keep.len(), rng);
                        keep = plan.kept_rows().into_iter().map(|i| keep[i]).collect();
                    }
                    let slots: Vec<usize> = keep.iter().map(|&i| visible[i]).collect();
                    rows_j.push(p.score(v, table.rows(&slots)?, q, a)?);
                }
                targets.push(round.gt_index);
                ids.push(InstanceId {
                    example_id: ex.id,
                    round: r,
                });
                inst += 1;
            }
        }
        let stack = |rows: &[Var<'t>]| -> Result<Option<Var<'t>>> {
            if rows.is_empty() {
                Ok(None)
            } else {
                concat_rows(rows).map(Some)
            }
        };
        let image_logits = stack(&rows_i)?;
        let joint_logits = stack(&rows_j)?;
        let (logits, mask) = match (kind, image_logits, joint_logits) {
            (ModelKind::ImageOnly, Some(l), _) | (ModelKind::Joint, _, Some(l)) => (l, None),
            (ModelKind::Cdf, Some(li), Some(lj)) => consensus_dropout_forward(li, lj, p, mode, rng)?,
            _ => return Err(Error::Invalid("empty batch".into())),
        };
        Ok(BatchOutput {
            logits,
            image_logits,
            joint_logits,
            targets,
            ids,
            mask,
        })
    }

    /// Evaluation-mode logits for every instance of `dataset`.
    pub fn logits(&self, dataset: &Dataset, history_limit: Option<usize>, batch_size: usize) -> Result<LogitMatrix> {
        let refs: Vec<&DialogExample> = dataset.examples.iter().collect();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut c = 0;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let opts = HistoryOptions {
            limit: history_limit,
            round_dropout: false,
        };
        for chunk in refs.chunks(batch_size.max(1)) {
            let tape = Tape::new();
            let bound = self.params.bind_frozen(&tape);
            let out = self.forward_batch(&bound, chunk, Mode::Eval, opts, 0.0, &mut unused)?;
            let values = out.logits.value();
            c = values.cols();
            ids.extend(out.ids);
            data.extend(values.into_data());
        }
        LogitMatrix::new(
            ids.clone(),
            Tensor::new(vec![ids.len(), c], data)?,
            self.kind().provenance(),
        )
    }

    /// Metrics of the evaluation-mode logits on `dataset`.
    pub fn evaluate(&self, dataset: &Dataset, history_limit: Option<usize>, batch_size: usize) -> Result<MetricReport> {
        let logits = self.logits(dataset, history_limit, batch_size)?;
        MetricReport::evaluate(&align(&logits, &annotations_from_dataset(dataset))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        s.push_str(&format!(
            "CONFIG {}\n",
            serde_json::to_string(&self.config).expect("plain struct")
        ));
        s.push_str(&format!("D_V {}\n", self.d_v));
        s.push_str(&format!("PARAMS {}\n", self.params.len()));
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            s.push_str(&format!("{name} {}\n", dims.join(" ")));
        }
        s.push_str(&format!("PAYLOAD {}\n", self.params.num_scalars()));
        for (_, t) in self.params.iter() {
            s.push_str(&join_floats(t.data()));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let mut pos = 0;
        let mut next = |tag: &str| -> Result<(usize, String)> {
            let line = lines
                .get(pos)
                .ok_or_else(|| Error::parse(pos + 1, "unexpected end of checkpoint"))?;
            pos += 1;
            if tag.is_empty() {
                return Ok((pos, line.clone()));
            }
            line.strip_prefix(tag)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|rest| (pos, rest.to_string()))
                .ok_or_else(|| Error::parse(pos, format!("expected {tag}")))
        };
        let (n, magic) = next("")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(n, format!("expected header {CHECKPOINT_MAGIC:?}")));
        }
        let (n, cfg) = next("CONFIG")?;
        let config: ModelConfig = serde_json::from_str(&cfg).map_err(|e| Error::parse(n, e.to_string()))?;
        let (n, d_v) = next("D_V")?;
        let d_v = parse_usize(&d_v, n)?;
        let (n, count) = next("PARAMS")?;
        let count = parse_usize(&count, n)?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("")?;
            let mut toks = line.split_whitespace();
            let name = toks
                .next()
                .ok_or_else(|| Error::parse(n, "empty manifest entry"))?
                .to_string();
            let shape: Vec<usize> = toks.map(|t| parse_usize(t, n)).collect::<Result<_>>()?;
            manifest.push((name, shape));
        }
        let (n, total) = next("PAYLOAD")?;
        let total = parse_usize(&total, n)?;
        let announced: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if total != announced {
            return Err(Error::parse(n, format!("payload of {total} values, manifest needs {announced}")));
        }
        let mut params = ParamStore::new();
        for (name, shape) in manifest {
            let (n, line) = next("")?;
            let data: Vec<f64> = line.split_whitespace().map(|t| parse_float(t, n)).collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(n, format!("{name}: {e}")))?;
            params.insert(name, t);
        }

        let vocab = params.get("enc.embed")?.shape()[0];
        let expected = Model::init(config.clone(), vocab, d_v, 0)?;
        for (name, t) in expected.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint parameter", got.shape(), t.shape()));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Invalid("checkpoint holds parameters the model does not use".into()));
        }
        Ok(Self { config, d_v, params })
    }
}

const CHECKPOINT_MAGIC: &str = "DIALRANK-CHECKPOINT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Examples per step; each contributes all its rounds.
    pub batch_size: usize,
    pub seed: u64,
    pub round_dropout: bool,
    /// Instance dropout probability for the fused model.
    pub p: f64,
    pub history_limit: Option<usize>,
    pub schedule: LrSchedule,
    /// Keep the parameters of the epoch with the best validation NDCG.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 0,
            round_dropout: true,
            p: 0.25,
            history_limit: None,
            schedule: LrSchedule::default(),
            select_best: true,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters `model` holds.
    pub best_epoch: usize,
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step<R: Rng>(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[&DialogExample],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let history = HistoryOptions {
        limit: cfg.history_limit,
        round_dropout: cfg.round_dropout,
    };
    let out = model.forward_batch(&bound, batch, Mode::Train, history, cfg.p, rng)?;
    let loss = out.logits.cross_entropy(&out.targets)?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    adam_step(&mut model.params, &bound.grads(), adam, lr)?;
    Ok(value)
}

/// Trains `model` on `train`, evaluating on `val` after every epoch when
/// given. `on_epoch` sees each log record as it is produced.
pub fn train(
    mut model: Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if train.examples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train.examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.at(epoch)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DialogExample> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let loss = train_step(&mut model, &mut adam, &batch, cfg, lr, &mut rng)?;
            if !loss.is_finite() || !model.params.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            total += loss;
            batches += 1;
        }
        let metrics = match val {
            Some(v) => Some(model.evaluate(v, cfg.history_limit, cfg.batch_size)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: total / batches as f64,
            metrics,
        };
        on_epoch(&record);
        if cfg.select_best {
            if let Some(score) = metrics.and_then(|m| m.ndcg) {
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, epoch, model.params.clone()));
                }
            }
        }
        history.push(record);
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

pub fn write_log_line<W: Write>(mut w: W, record: &EpochRecord) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(record).expect("plain struct"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, DatasetConfig};

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        generate(&DatasetConfig {
            n_examples: n,
            rounds: 3,
            candidates: 6,
            seed,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn small_model(kind: ModelKind, data: &Dataset) -> Model {
        let cfg = ModelConfig {
            kind,
            embed: 8,
            hidden: 8,
            factors: 2,
            d_m: 16,
            caption_in_question: false,
        };
        Model::init(cfg, data.vocab.len(), 24, 3).unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(1).unwrap(), 0.001);
        assert_eq!(lr_at(5).unwrap(), 0.0006);
        assert_eq!(lr_at(8).unwrap(), 0.0003);
        assert_eq!(lr_at(9).unwrap(), 0.00015);
        assert_eq!(lr_at(10).unwrap(), 0.000075);
        assert!(lr_at(0).is_err());
        let mut prev = f64::INFINITY;
        for e in 1..=50 {
            let lr = lr_at(e).unwrap();
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
        assert_eq!(LrSchedule::constant(0.01).at(77).unwrap(), 0.01);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.5; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1000.0, 0.0, 0.0], 0).unwrap() < 1e-6);
        assert!(cross_entropy(&[1.0], 1).is_err());

        let logits = [0.3, -1.2, 2.0, 0.7];
        let tape = Tape::new();
        let x = tape.param(Tensor::row(&logits));
        let loss = x.cross_entropy(&[1]).unwrap();
        assert!((loss.value().data()[0] - cross_entropy(&logits, 1).unwrap()).abs() < 1e-14);
        tape.backward(loss).unwrap();
        let g = x.grad().unwrap();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            let want = l.exp() / z - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_cases() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[1.0]));
        let mut state = AdamState::default();
        let zero = BTreeMap::from([("w".to_string(), Tensor::row(&[0.0]))]);
        adam_step(&mut store, &zero, &mut state, 0.1).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0]);
        assert_eq!(state.step, 1);

        let mut state = AdamState::default();
        let g = BTreeMap::from([("w".to_string(), Tensor::row(&[2.0]))]);
        adam_step(&mut store, &g, &mut state, 0.001).unwrap();
        assert!((store.get("w").unwrap().data()[0] - (1.0 - 0.001)).abs() < 1e-10);

        // minimise (w - 3)^2 from 0
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(&[0.0]));
        let mut state = AdamState::default();
        for _ in 0..200 {
            let w = store.get("w").unwrap().data()[0];
            let g = BTreeMap::from([("w".to_string(), Tensor::row(&[2.0 * (w - 3.0)]))]);
            adam_step(&mut store, &g, &mut state, 0.1).unwrap();
        }
        assert!((store.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);

        let bad = BTreeMap::from([("w".to_string(), Tensor::row(&[1.0, 2.0]))]);
        assert!(adam_step(&mut store, &bad, &mut state, 0.1).is_err());
    }

    #[test]
    fn loss_falls_on_a_fixed_batch() {
        let data = tiny_data(4, 1);
        for kind in [ModelKind::ImageOnly, ModelKind::Joint, ModelKind::Cdf] {
            let mut model = small_model(kind, &data);
            let mut adam = AdamState::default();
            let cfg = TrainConfig {
                round_dropout: false,
                p: 0.0,
                ..TrainConfig::default()
            };
            let batch: Vec<&DialogExample> = data.examples.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let losses: Vec<f64> = (0..6)
                .map(|_| train_step(&mut model, &mut adam, &batch, &cfg, 1e-3, &mut rng).unwrap())
                .collect();
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "{kind}: {losses:?}");
        }
    }

    #[test]
    fn one_epoch_smoke_and_determinism() {
        let data = tiny_data(10, 2);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let run = || train(small_model(ModelKind::Cdf, &data), &data, Some(&data), &cfg, |_| {}).unwrap();
        let a = run();
        assert!(a.history[0].loss.is_finite());
        assert!(a.history[0].metrics.unwrap().ndcg.is_some());
        assert_eq!(a.model, run().model);
    }

    #[test]
    fn image_head_ignores_history() {
        let data = tiny_data(3, 4);
        let model = small_model(ModelKind::ImageOnly, &data);
        let mut stripped = data.clone();
        for ex in &mut stripped.examples {
            for round in &mut ex.rounds {
                round.answer = vec![crate::encoders::UNK];
            }
        }
        let a = model.logits(&data, None, 8).unwrap();
        let b = model.logits(&stripped, None, 8).unwrap();
        assert_eq!(a.values(), b.values());
        let joint = small_model(ModelKind::Joint, &data);
        let c = joint.logits(&data, None, 8).unwrap();
        let d = joint.logits(&stripped, None, 8).unwrap();
        assert_ne!(c.values(), d.values());
    }

    #[test]
    fn batching_does_not_change_logits() {
        let data = tiny_data(5, 5);
        for kind in [ModelKind::ImageOnly, ModelKind::Joint, ModelKind::Cdf] {
            let model = small_model(kind, &data);
            let one = model.logits(&data, None, 1).unwrap();
            let all = model.logits(&data, None, 5).unwrap();
            assert!(one.values().max_abs_diff(all.values()) < 1e-12);
        }
    }

    #[test]
    fn fused_eval_logits_are_head_sums() {
        let data = tiny_data(2, 6);
        let model = small_model(ModelKind::Cdf, &data);
        let tape = Tape::new();
        let bound = model.params.bind_frozen(&tape);
        let refs: Vec<&DialogExample> = data.examples.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .forward_batch(&bound, &refs, Mode::Eval, HistoryOptions::default(), 0.25, &mut rng)
            .unwrap();
        let sum = out.image_logits.unwrap().add(out.joint_logits.unwrap()).unwrap();
        assert_eq!(out.logits.value(), sum.value());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = tiny_data(3, 7);
        let model = small_model(ModelKind::Cdf, &data);
        let text = model.to_text();
        let back = Model::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            back.logits(&data, None, 8).unwrap().to_text(),
            model.logits(&data, None, 8).unwrap().to_text()
        );
        let broken = text.replacen("PAYLOAD", "PAYLOAF", 1);
        assert!(matches!(Model::read_from(broken.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn nan_parameters_abort_training() {
        let data = tiny_data(4, 8);
        let mut model = small_model(ModelKind::ImageOnly, &data);
        *model.params.get_mut("img.fc_f.b").unwrap() = Tensor::row(&[f64::NAN; 8]);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match train(model, &data, None, &cfg, |_| {}) {
            Err(Error::NonFiniteLoss { epoch: 1, batch: 1 }) => {}
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn dropped_instances_give_joint_head_no_gradient() {
        let data = tiny_data(4, 9);
        let model = small_model(ModelKind::Cdf, &data);
        let refs: Vec<&DialogExample> = data.examples.iter().collect();
        let opts = HistoryOptions::default();

        // draw until a mask drops something, then replay with the same seed
        let seed = (0..100u64)
            .find(|&s| {
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let out = model.forward_batch(&bound, &refs, Mode::Train, opts, 0.5, &mut rng).unwrap();
                let m = out.mask.unwrap();
                m.dropped() > 0 && m.dropped() < m.xi.len()
            })
            .unwrap();

        let grads_with = |weights: Option<&[f64]>| {
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = model.forward_batch(&bound, &refs, Mode::Train, opts, 0.5, &mut rng).unwrap();
            let mask = out.mask.clone().unwrap();
            let keep: Vec<f64> = match weights {
                Some(w) => w.to_vec(),
                None => mask.xi.iter().map(|&x| if x == 0.0 { 0.0 } else { 1.0 }).collect(),
            };
            // per-row cross entropy weighted by `keep`
            let n = out.targets.len();
            let rows: Vec<Var> = (0..n)
                .map(|i| {
                    let row = out.logits.gather_rows(&[i]).unwrap();
                    row.cross_entropy(&[out.targets[i]]).unwrap().scale(keep[i])
                })
                .collect();
            let mut loss = rows[0];
            for r in &rows[1..] {
                loss = loss.add(*r).unwrap();
            }
            tape.backward(loss).unwrap();
            (bound.grads(), mask)
        };
        let (only_kept, mask) = grads_with(None);
        let all: Vec<f64> = vec![1.0; mask.xi.len()];
        let (every_row, _) = grads_with(Some(&all));
        for (name, g) in &every_row {
            if name.starts_with("joint.") {
                assert!(g.max_abs_diff(&only_kept[name]) < 1e-12, "{name}");
            }
        }
    }
}
