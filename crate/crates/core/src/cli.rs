//! The `dialrank` command line: data generation, training, evaluation,
//! model comparison, ensembling and the history ablation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::fusion::{ensemble, LogitMatrix, Provenance};
use crate::metrics::{
    align, annotations_from_dataset, complementarity, load_annotations, save_annotations, MetricReport,
};
use crate::synth::{generate, Dataset, DatasetConfig};
use crate::training::{train, write_log_line, LrSchedule, Model, ModelConfig, ModelKind, TrainConfig};

/// Every tunable of a run, read from one TOML file. Unknown keys are
/// rejected and every field has a default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides `data.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dialrank", version, about = "Answer ranking for visual dialog on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val splits.
    Gen(GenArgs),
    /// Train a model and write its checkpoint, validation logits and log.
    Train(TrainArgs),
    /// Score a logit file against annotations.
    Eval(EvalArgs),
    /// Intersection and union of two models' answers.
    Compare(CompareArgs),
    /// Sum logit files and evaluate the result.
    Ensemble(EnsembleArgs),
    /// Compare full history, truncated history and the image-only model.
    AblateHistory(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub history_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleChoice {
    /// 0.001, minus 0.0001 per epoch to epoch 8, then halved each epoch.
    Standard,
    /// 0.003 for 25 epochs, then decayed by 0.7 per epoch.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    pub model: ModelKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub round_dropout: Option<Toggle>,
    /// Instance dropout probability for `cdf`.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub history_limit: Option<usize>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleChoice>,
    /// Keep the final epoch instead of the best validation NDCG.
    #[arg(long)]
    pub keep_last: bool,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub logits: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    pub first: PathBuf,
    pub second: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Where to write the summed logits.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(num_args = 2.., required = true)]
    pub logits: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// History sizes, e.g. `0,1,full`.
    #[arg(long, value_delimiter = ',', default_value = "0,1,full")]
    pub k: Vec<String>,
    /// Joint checkpoint evaluated with truncated history.
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// Image-only checkpoint for the last row.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Train one joint model per history size, and an image-only model,
    /// instead of reading checkpoints.
    #[arg(long)]
    pub train: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> std::result::Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return Ok(());
            }
            return Err(Failure {
                code: 1,
                message: e.to_string(),
            });
        }
    };
    let res = match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Ensemble(a) => cmd_ensemble(&a, out),
        Command::AblateHistory(a) => cmd_ablate_history(&a, out),
    };
    res.map_err(Failure::from)
}

/// File names inside a data directory.
pub mod layout {
    pub const TRAIN: &str = "train.txt";
    pub const VAL: &str = "val.txt";
    pub const VOCAB: &str = "vocab.txt";
    pub const TRAIN_ANN: &str = "train.ann";
    pub const VAL_ANN: &str = "val.ann";
    pub const CHECKPOINT: &str = "checkpoint.txt";
    pub const VAL_LOGITS: &str = "val.logits";
    pub const LOG: &str = "log.jsonl";
    pub const REPORT: &str = "report.json";
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn history_fraction(d: &Dataset) -> f64 {
    let n = d.n_instances();
    let h = d
        .examples
        .iter()
        .flat_map(|e| &e.rounds)
        .filter(|r| r.needs_history)
        .count();
    if n == 0 {
        0.0
    } else {
        h as f64 / n as f64
    }
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = a.n_examples {
        cfg.data.n_examples = n;
    }
    if let Some(f) = a.history_fraction {
        cfg.data.history_fraction = f;
    }
    let data = generate(&cfg.data)?;
    let (tr, va) = data.split(cfg.data.train_ratio);
    std::fs::create_dir_all(&a.out)?;
    tr.save(a.out.join(layout::TRAIN))?;
    va.save(a.out.join(layout::VAL))?;
    data.vocab.write_to(BufWriter::new(File::create(a.out.join(layout::VOCAB))?))?;
    save_annotations(a.out.join(layout::TRAIN_ANN), &annotations_from_dataset(&tr))?;
    save_annotations(a.out.join(layout::VAL_ANN), &annotations_from_dataset(&va))?;
    writeln!(
        out,
        "wrote {} train and {} val examples to {}",
        tr.examples.len(),
        va.examples.len(),
        a.out.display()
    )
    .map_err(io_out)?;
    writeln!(
        out,
        "history-dependent questions: overall {:.4}, val {:.4}",
        history_fraction(&data),
        history_fraction(&va)
    )
    .map_err(io_out)?;
    Ok(())
}

/// Loads the vocabulary and both splits from a `gen` directory.
pub fn load_data_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let vocab = Vocabulary::read_from(std::io::BufReader::new(File::open(dir.join(layout::VOCAB))?))?;
    let tr = Dataset::load(dir.join(layout::TRAIN), &vocab)?;
    let va = Dataset::load(dir.join(layout::VAL), &vocab)?;
    Ok((tr, va))
}

fn feature_dim(d: &Dataset) -> Result<usize> {
    d.examples
        .first()
        .and_then(|e| e.image.dims2())
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Invalid("dataset has no examples".into()))
}

fn print_report(out: &mut dyn Write, label: &str, r: &MetricReport) -> Result<()> {
    writeln!(out, "{}", r.to_json()).map_err(io_out)?;
    writeln!(out, "{:<10}{}", "", MetricReport::TABLE_HEADER).map_err(io_out)?;
    writeln!(out, "{label:<10}{}", r.table_row()).map_err(io_out)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    cfg.model.kind = a.model;
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(rd) = a.round_dropout {
        t.round_dropout = rd == Toggle::On;
    }
    if let Some(p) = a.p {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("--p {p} outside [0, 1)")));
        }
        t.p = p;
    }
    if a.history_limit.is_some() {
        t.history_limit = a.history_limit;
    }
    match a.schedule {
        Some(ScheduleChoice::Standard) => t.schedule = LrSchedule::default(),
        Some(ScheduleChoice::Desk) => t.schedule = LrSchedule::desk(),
        None => {}
    }
    if a.keep_last {
        t.select_best = false;
    }

    let (tr, va) = load_data_dir(&a.data)?;
    let model = Model::init(cfg.model.clone(), tr.vocab.len(), feature_dim(&tr)?, cfg.train.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut log = BufWriter::new(File::create(a.out.join(layout::LOG))?);
    let mut log_err = None;
    let outcome = train(model, &tr, Some(&va), &cfg.train, |rec| {
        if let Err(e) = write_log_line(&mut log, rec) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.flush()?;
    outcome.model.save(a.out.join(layout::CHECKPOINT))?;
    let logits = outcome.model.logits(&va, cfg.train.history_limit, cfg.train.batch_size)?;
    logits.save(a.out.join(layout::VAL_LOGITS))?;
    let report = MetricReport::evaluate(&align(&logits, &annotations_from_dataset(&va))?)?;
    std::fs::write(a.out.join(layout::REPORT), report.to_json() + "\n")?;
    writeln!(
        out,
        "trained {} for {} epochs; kept epoch {}",
        a.model, cfg.train.epochs, outcome.best_epoch
    )
    .map_err(io_out)?;
    print_report(out, &a.model.to_string(), &report)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let logits = LogitMatrix::load(&a.logits, Provenance::Ensemble)?;
    let ann = load_annotations(&a.annotations)?;
    let report = MetricReport::evaluate(&align(&logits, &ann)?)?;
    print_report(out, "model", &report)
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let ann = load_annotations(&a.annotations)?;
    let x = align(&LogitMatrix::load(&a.first, Provenance::ImageOnly)?, &ann)?;
    let y = align(&LogitMatrix::load(&a.second, Provenance::Joint)?, &ann)?;
    let c = complementarity(&x, &y)?;
    writeln!(out, "{}", serde_json::to_string(&c).expect("plain struct")).map_err(io_out)?;
    writeln!(out, "{c}").map_err(io_out)?;
    Ok(())
}

pub fn cmd_ensemble(a: &EnsembleArgs, out: &mut dyn Write) -> Result<()> {
    let models = a
        .logits
        .iter()
        .map(|p| LogitMatrix::load(p, Provenance::Ensemble))
        .collect::<Result<Vec<_>>>()?;
    let merged = ensemble(&models)?;
    merged.save(&a.out)?;
    let ann = load_annotations(&a.annotations)?;
    let report = MetricReport::evaluate(&align(&merged, &ann)?)?;
    print_report(out, "ensemble", &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HistorySize {
    Full,
    Last(usize),
}

fn parse_sizes(ks: &[String]) -> Result<Vec<HistorySize>> {
    ks.iter()
        .map(|k| match k.trim() {
            "full" => Ok(HistorySize::Full),
            n => n
                .parse()
                .map(HistorySize::Last)
                .map_err(|_| Error::Config(format!("history size {n:?} is neither a number nor `full`"))),
        })
        .collect()
}

pub fn cmd_ablate_history(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let sizes = parse_sizes(&a.k)?;
    if !a.train && a.joint.is_none() {
        return Err(Error::Config("pass --joint <checkpoint> or --train".into()));
    }
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (tr, va) = load_data_dir(&a.data)?;
    let d_v = feature_dim(&tr)?;
    let bs = cfg.train.batch_size;

    let train_kind = |kind: ModelKind, limit: Option<usize>| -> Result<Model> {
        let mut tc = cfg.train.clone();
        tc.history_limit = limit;
        let mc = ModelConfig {
            kind,
            ..cfg.model.clone()
        };
        let model = Model::init(mc, tr.vocab.len(), d_v, tc.seed)?;
        Ok(train(model, &tr, Some(&va), &tc, |_| {})?.model)
    };
    let checkpoint = match (&a.joint, a.train) {
        (Some(p), false) => Some(Model::load(p)?),
        _ => None,
    };

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut ordered: Vec<HistorySize> = sizes.iter().copied().filter(|s| *s == HistorySize::Full).collect();
    ordered.extend(sizes.iter().copied().filter(|s| *s != HistorySize::Full));
    for size in ordered {
        let (label, limit) = match size {
            HistorySize::Full => ("FULL".to_string(), None),
            HistorySize::Last(k) => (format!("H-{k}"), Some(k)),
        };
        let report = match &checkpoint {
            Some(m) => m.evaluate(&va, limit, bs)?,
            None => train_kind(ModelKind::Joint, limit)?.evaluate(&va, limit, bs)?,
        };
        rows.push((label, report));
    }
    let image = match (&a.image, a.train) {
        (Some(p), _) => Some(Model::load(p)?),
        (None, true) => Some(train_kind(ModelKind::ImageOnly, None)?),
        (None, false) => None,
    };
    if let Some(m) = image {
        rows.push(("Img-only".to_string(), m.evaluate(&va, None, bs)?));
    }

    for (label, r) in &rows {
        writeln!(
            out,
            "{}",
            serde_json::json!({ "model": label, "metrics": r })
        )
        .map_err(io_out)?;
    }
    writeln!(out, "{:<10}{}", "Model", MetricReport::TABLE_HEADER).map_err(io_out)?;
    for (label, r) in &rows {
        writeln!(out, "{label:<10}{}", r.table_row()).map_err(io_out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[train]\nepochz = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_overrides_sections() {
        let cfg = RunConfig::from_toml("seed = 9\n[data]\nseed = 1\n[train]\nhistory_limit = 2\n").unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.history_limit, Some(2));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let mut sink = Vec::new();
        let e = run(["dialrank", "frobnicate"], &mut sink).unwrap_err();
        assert_eq!(e.code, 1);
        let e = run(["dialrank", "train", "--data", "x", "--model", "big", "--out", "y"], &mut sink).unwrap_err();
        assert_eq!(e.code, 1);
        assert!(run(["dialrank", "--help"], &mut sink).is_ok());
    }

    #[test]
    fn missing_files_are_data_errors() {
        let mut sink = Vec::new();
        let e = run(
            ["dialrank", "eval", "--logits", "/nonexistent/a", "--annotations", "/nonexistent/b"],
            &mut sink,
        )
        .unwrap_err();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn history_sizes() {
        let ks: Vec<String> = ["0", "full", "2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            parse_sizes(&ks).unwrap(),
            vec![HistorySize::Last(0), HistorySize::Full, HistorySize::Last(2)]
        );
        assert!(parse_sizes(&["x".to_string()]).is_err());
    }
}
