//! Retrieval metrics over ranked candidate lists.
//!
//! Ties are always broken in favour of the lower candidate index, here and
//! in ensembling, so every metric agrees on the same ranking.
//!
//! NDCG follows the Visual Dialog challenge convention: with `K` the number
//! of candidates of non-zero relevance,
//! `DCG = Σ_{i=1..K} rel(candidate at rank i) / log2(i + 1)` and NDCG divides
//! by the same sum taken over relevances sorted in decreasing order.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{InstanceId, LogitMatrix};
use crate::synth::{join_floats, parse_float, parse_usize, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedInstance {
    pub scores: Vec<f64>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

/// Candidate indices from best to worst: descending score, lower index
/// first among equal scores.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Best-scoring candidate, lower index on ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    ranking(scores).first().copied()
}

/// 1-based rank of the ground truth.
pub fn rank_of(scores: &[f64], gt_index: usize) -> Result<usize> {
    let gt = *scores.get(gt_index).ok_or(Error::OutOfRange {
        what: "gt_index",
        index: gt_index,
        len: scores.len(),
    })?;
    let above = scores.iter().filter(|&&s| s > gt).count();
    let tied_before = scores[..gt_index].iter().filter(|&&s| s == gt).count();
    Ok(1 + above + tied_before)
}

fn ranks(instances: &[RankedInstance]) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::Invalid("no instances to evaluate".into()));
    }
    instances.iter().map(|i| rank_of(&i.scores, i.gt_index)).collect()
}

pub fn mrr(instances: &[RankedInstance]) -> Result<f64> {
    let r = ranks(instances)?;
    Ok(r.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / r.len() as f64)
}

pub fn recall_at(instances: &[RankedInstance], k: usize) -> Result<f64> {
    let r = ranks(instances)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

pub fn mean_rank(instances: &[RankedInstance]) -> Result<f64> {
    let r = ranks(instances)?;
    Ok(r.iter().sum::<usize>() as f64 / r.len() as f64)
}

fn discount(position: usize) -> f64 {
    ((position + 1) as f64).log2()
}

pub fn ndcg(instance: &RankedInstance) -> Result<f64> {
    let rel = instance
        .relevance
        .as_ref()
        .ok_or_else(|| Error::Invalid("instance has no dense relevance".into()))?;
    if rel.len() != instance.scores.len() {
        return Err(Error::Invalid(format!(
            "{} relevance values for {} candidates",
            rel.len(),
            instance.scores.len()
        )));
    }
    let k = rel.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Err(Error::Invalid("all relevance values are zero".into()));
    }
    let order = ranking(&instance.scores);
    let dcg: f64 = (1..=k).map(|i| rel[order[i - 1]] / discount(i)).sum();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = (1..=k).map(|i| ideal[i - 1] / discount(i)).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over the instances carrying dense relevance; `None` if none do.
    pub ndcg: Option<f64>,
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
    pub n_instances: usize,
}

impl MetricReport {
    pub fn evaluate(instances: &[RankedInstance]) -> Result<Self> {
        let dense: Vec<f64> = instances
            .iter()
            .filter(|i| i.relevance.is_some())
            .map(ndcg)
            .collect::<Result<_>>()?;
        Ok(Self {
            ndcg: (!dense.is_empty()).then(|| dense.iter().sum::<f64>() / dense.len() as f64),
            mrr: mrr(instances)?,
            r1: recall_at(instances, 1)?,
            r5: recall_at(instances, 5)?,
            r10: recall_at(instances, 10)?,
            mean_rank: mean_rank(instances)?,
            n_instances: instances.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub const TABLE_HEADER: &'static str = "  NDCG    MRR     R@1     R@5     R@10    Mean";

    /// Metric values in the `TABLE_HEADER` column order.
    pub fn table_row(&self) -> String {
        let ndcg = self.ndcg.map_or("   -  ".to_string(), |x| format!("{:6.2}", 100.0 * x));
        format!(
            "{ndcg}  {:6.2}  {:6.2}  {:6.2}  {:6.2}  {:5.2}",
            100.0 * self.mrr,
            100.0 * self.r1,
            100.0 * self.r5,
            100.0 * self.r10,
            self.mean_rank
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::TABLE_HEADER)?;
        write!(f, "{}", self.table_row())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complementarity {
    pub r1_intersection: f64,
    pub r1_union: f64,
    pub ndcg_intersection: f64,
    pub ndcg_union: f64,
}

/// Agreement between two models on the same instances. R@1 uses set
/// semantics; the NDCG pair is a heuristic: the mean of the per-instance
/// minimum and maximum of the two scores.
pub fn complementarity(a: &[RankedInstance], b: &[RankedInstance]) -> Result<Complementarity> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "cannot compare {} and {} instances",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (mut both, mut either, mut lo, mut hi) = (0usize, 0usize, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        if x.gt_index != y.gt_index || x.scores.len() != y.scores.len() {
            return Err(Error::Invalid("instances are not aligned".into()));
        }
        let cx = rank_of(&x.scores, x.gt_index)? == 1;
        let cy = rank_of(&y.scores, y.gt_index)? == 1;
        both += usize::from(cx && cy);
        either += usize::from(cx || cy);
        let (nx, ny) = (ndcg(x)?, ndcg(y)?);
        lo += nx.min(ny);
        hi += nx.max(ny);
    }
    Ok(Complementarity {
        r1_intersection: both as f64 / n,
        r1_union: either as f64 / n,
        ndcg_intersection: lo / n,
        ndcg_union: hi / n,
    })
}

impl fmt::Display for Complementarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "               R@1     NDCG")?;
        writeln!(
            f,
            "Intersection  {:6.2}  {:6.2}",
            100.0 * self.r1_intersection,
            100.0 * self.ndcg_intersection
        )?;
        write!(
            f,
            "Union         {:6.2}  {:6.2}",
            100.0 * self.r1_union,
            100.0 * self.ndcg_union
        )
    }
}

/// Ground truth for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: InstanceId,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

pub fn annotations_from_dataset(dataset: &Dataset) -> Vec<Annotation> {
    dataset
        .examples
        .iter()
        .flat_map(|ex| {
            ex.rounds.iter().enumerate().map(move |(r, round)| Annotation {
                id: InstanceId {
                    example_id: ex.id,
                    round: r + 1,
                },
                gt_index: round.gt_index,
                relevance: Some(round.relevance.clone()),
            })
        })
        .collect()
}

pub fn write_annotations<W: Write>(mut w: W, annotations: &[Annotation]) -> Result<()> {
    for a in annotations {
        write!(w, "{} {} {}", a.id.example_id, a.id.round, a.gt_index)?;
        if let Some(rel) = &a.relevance {
            write!(w, " {}", join_floats(rel))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::parse(n, "expected <example_id> <round> <gt_index> [relevance...]"));
        }
        let id = InstanceId {
            example_id: parse_usize(toks[0], n)?,
            round: parse_usize(toks[1], n)?,
        };
        let gt_index = parse_usize(toks[2], n)?;
        let relevance = if toks.len() > 3 {
            let rel: Vec<f64> = toks[3..].iter().map(|t| parse_float(t, n)).collect::<Result<_>>()?;
            if gt_index >= rel.len() {
                return Err(Error::parse(n, "gt_index outside the relevance list"));
            }
            if rel.iter().any(|x| !(0.0..=1.0).contains(x)) || rel.iter().all(|&x| x == 0.0) {
                return Err(Error::parse(n, "relevance must lie in [0, 1] with one value above 0"));
            }
            Some(rel)
        } else {
            None
        };
        out.push(Annotation {
            id,
            gt_index,
            relevance,
        });
    }
    Ok(out)
}

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_annotations(&mut f, annotations)?;
    f.flush()?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    read_annotations(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Pairs every logit row with its annotation; both must list the same
/// instances in the same order.
pub fn align(logits: &LogitMatrix, annotations: &[Annotation]) -> Result<Vec<RankedInstance>> {
    if logits.len() != annotations.len() {
        return Err(Error::Invalid(format!(
            "{} logit rows but {} annotations",
            logits.len(),
            annotations.len()
        )));
    }
    let c = logits.candidates();
    logits
        .ids()
        .iter()
        .zip(annotations)
        .enumerate()
        .map(|(i, (id, a))| {
            if *id != a.id {
                return Err(Error::Invalid(format!(
                    "row {}: logits for {id} but annotation for {}",
                    i + 1,
                    a.id
                )));
            }
            if a.gt_index >= c || a.relevance.as_ref().is_some_and(|r| r.len() != c) {
                return Err(Error::Invalid(format!("row {}: annotation does not fit {c} candidates", i + 1)));
            }
            Ok(RankedInstance {
                scores: logits.row(i).to_vec(),
                gt_index: a.gt_index,
                relevance: a.relevance.clone(),
            })
        })
        .collect()
}
