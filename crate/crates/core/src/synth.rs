//! Synthetic visual-dialog data with a planted signal.
//!
//! Every image holds `objects` items, each with a distinct kind and a
//! distinct colour. Object features are drawn around the sum of a kind
//! prototype and a colour prototype. Three question templates exist:
//!
//! * `what color is the <kind>`: answerable from the image,
//! * `is there a <kind>`: answerable from the image,
//! * `what color is it`: refers to the object of the previous round, so
//!   the answer equals the previous answer and needs the history.
//!
//! In each split exactly `round(history_fraction · questions)` questions use
//! the third template. Candidate lists contain the ground truth, one paraphrase
//! with partial relevance, and distractors.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KINDS: [&str; 16] = [
    "dog", "cat", "car", "tree", "ball", "cup", "bird", "chair", "boat", "lamp", "horse", "bike",
    "clock", "book", "shoe", "hat",
];
pub const COLORS: [&str; 12] = [
    "red", "blue", "green", "yellow", "black", "white", "brown", "pink", "gray", "orange",
    "purple", "silver",
];
const FILLER_ANSWERS: [&str; 4] = ["not sure", "maybe", "i can not tell", "no idea"];
const QUESTION_WORDS: [&str; 9] = ["what", "color", "is", "the", "it", "there", "a", "photo", "of"];

/// Relevance assigned to the paraphrase of the ground-truth answer.
pub const PARAPHRASE_RELEVANCE: f64 = 0.5;

const MAGIC: &str = "DIALOG-DATASET v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_examples: usize,
    pub rounds: usize,
    pub candidates: usize,
    pub objects: usize,
    pub feature_dim: usize,
    /// Number of object kinds in the word list (vocabulary size follows).
    pub kinds: usize,
    pub colors: usize,
    /// Fraction of all questions that need the dialog history.
    pub history_fraction: f64,
    /// Among image-only questions not forced to be colour questions, the
    /// share of presence (yes/no) questions.
    pub yes_no_fraction: f64,
    pub feature_noise: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_examples: 350,
            rounds: 5,
            candidates: 20,
            objects: 6,
            feature_dim: 24,
            kinds: 10,
            colors: 8,
            history_fraction: 0.19,
            yes_no_fraction: 0.3,
            feature_noise: 0.3,
            train_ratio: 6.0 / 7.0,
            val_ratio: 1.0 / 7.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_examples == 0 || self.rounds == 0 || self.objects == 0 || self.feature_dim == 0 {
            return bad("n_examples, rounds, objects and feature_dim must be positive".into());
        }
        if self.kinds > KINDS.len() || self.kinds < self.objects {
            return bad(format!("kinds must be in [objects, {}]", KINDS.len()));
        }
        if self.colors > COLORS.len() || self.colors < self.objects {
            return bad(format!("colors must be in [objects, {}]", COLORS.len()));
        }
        let pool = answer_pool(self).len();
        if self.candidates < 2 || self.candidates > pool {
            return bad(format!("candidates must be in [2, {pool}]"));
        }
        if !(0.0..=1.0).contains(&self.history_fraction) || !(0.0..=1.0).contains(&self.yes_no_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.feature_noise < 0.0 {
            return bad("feature_noise must be non-negative".into());
        }
        if self.train_ratio <= 0.0 || self.val_ratio < 0.0 || (self.train_ratio + self.val_ratio - 1.0).abs() > 1e-9 {
            return bad("split ratios must be positive and sum to 1".into());
        }
        if self.history_fraction * self.rounds as f64 > (self.rounds - 1) as f64 {
            return bad(format!(
                "history_fraction above {} cannot be met: the first round never needs history",
                (self.rounds - 1) as f64 / self.rounds as f64
            ));
        }
        Ok(())
    }

    /// Examples in the training split; the rest form the validation split.
    pub fn train_count(&self) -> usize {
        ((self.n_examples as f64 * self.train_ratio).round() as usize).min(self.n_examples)
    }

    /// History-dependent questions in the training and validation splits.
    pub fn history_question_counts(&self) -> [usize; 2] {
        let n_train = self.train_count();
        [n_train, self.n_examples - n_train]
            .map(|n| (self.history_fraction * (n * self.rounds) as f64).round() as usize)
    }

    /// The vocabulary implied by the word lists in use.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::new();
        for w in QUESTION_WORDS {
            v.add(w);
        }
        for k in &KINDS[..self.kinds] {
            v.add(k);
        }
        for a in answer_pool(self) {
            for w in a.split_whitespace() {
                v.add(w);
            }
        }
        v
    }
}

fn answer_pool(cfg: &DatasetConfig) -> Vec<String> {
    let mut pool: Vec<String> = Vec::new();
    for c in &COLORS[..cfg.colors] {
        pool.push(c.to_string());
        pool.push(format!("it is {c}"));
    }
    for a in ["yes", "no", "yes there is", "no there is not"] {
        pool.push(a.to_string());
    }
    pool.extend(FILLER_ANSWERS.iter().map(|s| s.to_string()));
    pool
}

fn paraphrase(answer: &str) -> String {
    match answer {
        "yes" => "yes there is".into(),
        "no" => "no there is not".into(),
        c => format!("it is {c}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogRound {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
    pub relevance: Vec<f64>,
    /// The question cannot be answered from the image alone.
    pub needs_history: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogExample {
    pub id: usize,
    /// `[k × d_v]` object features.
    pub image: Tensor,
    pub caption: Vec<usize>,
    pub rounds: Vec<DialogRound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub examples: Vec<DialogExample>,
}

/// Generator-side ground truth for one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectAttrs {
    pub kind: usize,
    pub color: usize,
}

pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    Ok(generate_with_latents(cfg)?.0)
}

/// Like [`generate`], also returning each image's object attributes in
/// feature-row order.
pub fn generate_with_latents(cfg: &DatasetConfig) -> Result<(Dataset, Vec<Vec<ObjectAttrs>>)> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let kind_proto: Vec<Vec<f64>> = (0..cfg.kinds)
        .map(|_| (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let color_proto: Vec<Vec<f64>> = (0..cfg.colors)
        .map(|_| (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect())
        .collect();

    // drawn per split so that each split has the configured fraction
    let mut is_history = vec![vec![false; cfg.rounds]; cfg.n_examples];
    let n_train = cfg.train_count();
    for (range, want) in [0..n_train, n_train..cfg.n_examples]
        .into_iter()
        .zip(cfg.history_question_counts())
    {
        let mut eligible: Vec<(usize, usize)> = range
            .flat_map(|e| (1..cfg.rounds).map(move |r| (e, r)))
            .collect();
        eligible.shuffle(&mut rng);
        for &(e, r) in &eligible[..want.min(eligible.len())] {
            is_history[e][r] = true;
        }
    }

    let pool = answer_pool(cfg);
    let mut examples = Vec::with_capacity(cfg.n_examples);
    let mut latents = Vec::with_capacity(cfg.n_examples);
    for (e, history_rounds) in is_history.iter().enumerate() {
        let mut kinds: Vec<usize> = (0..cfg.kinds).collect();
        kinds.shuffle(&mut rng);
        let mut colors: Vec<usize> = (0..cfg.colors).collect();
        colors.shuffle(&mut rng);
        let objects: Vec<ObjectAttrs> = (0..cfg.objects)
            .map(|i| ObjectAttrs {
                kind: kinds[i],
                color: colors[i],
            })
            .collect();
        let absent: Vec<usize> = kinds[cfg.objects..].to_vec();

        let mut feats = Vec::with_capacity(cfg.objects * cfg.feature_dim);
        for o in &objects {
            for j in 0..cfg.feature_dim {
                let noise = normal(&mut rng) * cfg.feature_noise;
                feats.push(kind_proto[o.kind][j] + color_proto[o.color][j] + noise);
            }
        }
        let image = Tensor::matrix(cfg.objects, cfg.feature_dim, feats)?;

        let caption_obj = objects[0];
        let caption = format!("a photo of a {}", KINDS[caption_obj.kind]);

        let mut color_unasked: Vec<ObjectAttrs> = objects.clone();
        color_unasked.shuffle(&mut rng);
        let presence_present: Vec<usize> = objects[1..].iter().map(|o| o.kind).collect();

        let mut rounds = Vec::with_capacity(cfg.rounds);
        let mut prev_answer = String::new();
        for r in 0..cfg.rounds {
            let needs_history = history_rounds[r];
            let next_is_history = r + 1 < cfg.rounds && history_rounds[r + 1];
            let (question, answer) = if needs_history {
                ("what color is it".to_string(), prev_answer.clone())
            } else if !next_is_history && rng.random_bool(cfg.yes_no_fraction) {
                let present = absent.is_empty() || rng.random_bool(0.5);
                let kind = if present {
                    *presence_present.choose(&mut rng).expect("objects > 1 or absent kinds")
                } else {
                    *absent.choose(&mut rng).expect("non-empty")
                };
                let a = if present { "yes" } else { "no" };
                (format!("is there a {}", KINDS[kind]), a.to_string())
            } else {
                let o = color_unasked.pop().unwrap_or_else(|| *objects.choose(&mut rng).expect("objects"));
                (
                    format!("what color is the {}", KINDS[o.kind]),
                    COLORS[o.color].to_string(),
                )
            };

            let para = paraphrase(&answer);
            let mut distractors: Vec<&String> =
                pool.iter().filter(|a| **a != answer && **a != para).collect();
            distractors.shuffle(&mut rng);
            let mut cands: Vec<(String, f64)> = vec![(answer.clone(), 1.0), (para, PARAPHRASE_RELEVANCE)];
            cands.extend(distractors[..cfg.candidates - 2].iter().map(|a| ((*a).clone(), 0.0)));
            cands.shuffle(&mut rng);
            let gt_index = cands.iter().position(|(a, _)| *a == answer).expect("gt present");

            rounds.push(DialogRound {
                question: vocab.encode(&question),
                answer: vocab.encode(&answer),
                candidates: cands.iter().map(|(a, _)| vocab.encode(a)).collect(),
                gt_index,
                relevance: cands.iter().map(|(_, r)| *r).collect(),
                needs_history,
            });
            prev_answer = answer;
        }
        examples.push(DialogExample {
            id: e,
            image,
            caption: vocab.encode(&caption),
            rounds,
        });
        latents.push(objects);
    }
    Ok((Dataset { vocab, examples }, latents))
}

impl Dataset {
    /// First `round(train_ratio · n)` examples, then the rest.
    pub fn split(&self, train_ratio: f64) -> (Dataset, Dataset) {
        let n_train = ((self.examples.len() as f64) * train_ratio).round() as usize;
        let n_train = n_train.min(self.examples.len());
        let (a, b) = self.examples.split_at(n_train);
        (
            Dataset {
                vocab: self.vocab.clone(),
                examples: a.to_vec(),
            },
            Dataset {
                vocab: self.vocab.clone(),
                examples: b.to_vec(),
            },
        )
    }

    pub fn n_instances(&self) -> usize {
        self.examples.iter().map(|e| e.rounds.len()).sum()
    }

    pub fn candidates(&self) -> Option<usize> {
        self.examples
            .first()
            .and_then(|e| e.rounds.first())
            .map(|r| r.candidates.len())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = &self.vocab;
        writeln!(s, "{MAGIC}").unwrap();
        for ex in &self.examples {
            writeln!(s, "EXAMPLE {}", ex.id).unwrap();
            let (k, dv) = ex.image.dims2().expect("matrix");
            writeln!(s, "IMAGE {k} {dv}").unwrap();
            for i in 0..k {
                writeln!(s, "{}", join_floats(ex.image.row_slice(i))).unwrap();
            }
            writeln!(s, "CAPTION {}", v.decode(&ex.caption)).unwrap();
            for (r, round) in ex.rounds.iter().enumerate() {
                let kind = if round.needs_history { "history" } else { "image" };
                writeln!(
                    s,
                    "ROUND {} {kind} {} {}",
                    r + 1,
                    round.candidates.len(),
                    round.gt_index
                )
                .unwrap();
                writeln!(s, "Q {}", v.decode(&round.question)).unwrap();
                writeln!(s, "A {}", v.decode(&round.answer)).unwrap();
                for c in &round.candidates {
                    writeln!(s, "CAND {}", v.decode(c)).unwrap();
                }
                writeln!(s, "REL {}", join_floats(&round.relevance)).unwrap();
            }
            writeln!(s, "END").unwrap();
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, vocab)
    }

    pub fn read_from<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let mut p = Parser {
            lines: &lines,
            pos: 0,
        };
        let (n, magic) = p.next_line()?;
        if magic != MAGIC {
            return Err(Error::parse(n, format!("expected header {MAGIC:?}")));
        }
        let mut examples = Vec::new();
        while p.pos < lines.len() {
            examples.push(p.example(vocab)?);
        }
        Ok(Self {
            vocab: vocab.clone(),
            examples,
        })
    }
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_float(tok: &str, line: usize) -> Result<f64> {
    let x: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("bad number {tok:?}")))?;
    if !x.is_finite() {
        return Err(Error::parse(line, format!("non-finite number {tok:?}")));
    }
    Ok(x)
}

pub(crate) fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("bad integer {tok:?}")))
}

struct Parser<'a> {
    lines: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    /// `(1-based line number, content)`.
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::parse(self.pos + 1, "unexpected end of file"))?;
        self.pos += 1;
        Ok((self.pos, line.trim_end_matches('\r')))
    }

    fn tagged(&mut self, tag: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next_line()?;
        match line.split_once(' ') {
            Some((t, rest)) if t == tag => Ok((n, rest)),
            _ if line == tag => Ok((n, "")),
            _ => Err(Error::parse(n, format!("expected {tag}, found {line:?}"))),
        }
    }

    fn tokens(&mut self, tag: &str, vocab: &Vocabulary) -> Result<(usize, Vec<usize>)> {
        let (n, rest) = self.tagged(tag)?;
        let ids = vocab.encode(rest);
        if ids.is_empty() {
            return Err(Error::parse(n, format!("{tag} has no tokens")));
        }
        Ok((n, ids))
    }

    fn example(&mut self, vocab: &Vocabulary) -> Result<DialogExample> {
        let (n, rest) = self.tagged("EXAMPLE")?;
        let id = parse_usize(rest.trim(), n)?;
        let (n, rest) = self.tagged("IMAGE")?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(|t| parse_usize(t, n))
            .collect::<Result<_>>()?;
        let [k, dv] = dims[..] else {
            return Err(Error::parse(n, "IMAGE needs <k> <d_v>"));
        };
        if k == 0 || dv == 0 {
            return Err(Error::parse(n, "IMAGE dimensions must be positive"));
        }
        let mut feats = Vec::with_capacity(k * dv);
        for _ in 0..k {
            let (n, line) = self.next_line()?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| parse_float(t, n))
                .collect::<Result<_>>()?;
            if row.len() != dv {
                return Err(Error::parse(n, format!("expected {dv} features, found {}", row.len())));
            }
            feats.extend(row);
        }
        let image = Tensor::matrix(k, dv, feats)?;
        let (_, caption) = self.tokens("CAPTION", vocab)?;

        let mut rounds = Vec::new();
        loop {
            let (n, line) = self.next_line()?;
            if line == "END" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let ["ROUND", idx, kind, c, gt] = parts[..] else {
                return Err(Error::parse(n, format!("expected ROUND or END, found {line:?}")));
            };
            if parse_usize(idx, n)? != rounds.len() + 1 {
                return Err(Error::parse(n, "rounds must be numbered consecutively from 1"));
            }
            let needs_history = match kind {
                "history" => true,
                "image" => false,
                other => return Err(Error::parse(n, format!("unknown round kind {other:?}"))),
            };
            let c = parse_usize(c, n)?;
            let gt_index = parse_usize(gt, n)?;
            if c == 0 || gt_index >= c {
                return Err(Error::parse(n, format!("gt_index {gt_index} out of range for {c} candidates")));
            }
            let (_, question) = self.tokens("Q", vocab)?;
            let (_, answer) = self.tokens("A", vocab)?;
            let mut candidates = Vec::with_capacity(c);
            for _ in 0..c {
                candidates.push(self.tokens("CAND", vocab)?.1);
            }
            let (rn, rest) = self.tagged("REL")?;
            let relevance: Vec<f64> = rest
                .split_whitespace()
                .map(|t| parse_float(t, rn))
                .collect::<Result<_>>()?;
            if relevance.len() != c {
                return Err(Error::parse(rn, format!("expected {c} relevance values")));
            }
            if relevance.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::parse(rn, "relevance outside [0, 1]"));
            }
            if relevance[gt_index] != 1.0 {
                return Err(Error::parse(rn, "ground-truth relevance must be 1"));
            }
            rounds.push(DialogRound {
                question,
                answer,
                candidates,
                gt_index,
                relevance,
                needs_history,
            });
        }
        if rounds.is_empty() {
            return Err(Error::parse(self.pos, "example without rounds"));
        }
        Ok(DialogExample {
            id,
            image,
            caption,
            rounds,
        })
    }
}

/// Field mapping for the VisDial v1.0 JSON release, kept as documentation.
///
/// | VisDial field                              | here                      |
/// |--------------------------------------------|---------------------------|
/// | `dialogs[i].image_id`                      | `DialogExample::id`       |
/// | detector features for `image_id` (k×2048)  | `DialogExample::image`    |
/// | `dialogs[i].caption`                       | `DialogExample::caption`  |
/// | `questions[dialog[r].question]`            | `DialogRound::question`   |
/// | `answers[dialog[r].answer]`                | `DialogRound::answer`     |
/// | `answers[dialog[r].answer_options[l]]`     | `DialogRound::candidates` |
/// | `dialog[r].gt_index`                       | `DialogRound::gt_index`   |
/// | dense annotations `gt_relevance`           | `DialogRound::relevance`  |
///
/// Dense relevance exists for one round per image in the real data; the
/// remaining rounds would carry relevance only at `gt_index`.
pub fn convert_visdial(_json: &Path, _features: &Path) -> Result<Dataset> {
    Err(Error::Unsupported(
        "VisDial conversion is not implemented; see the field mapping in the docs".into(),
    ))
}
