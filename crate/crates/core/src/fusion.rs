//! Combining the two heads: consensus addition of logits, instance dropout
//! on the joint head's rows, and test-time ensembling.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ranking;
use crate::synth::{join_floats, parse_float, parse_usize};
use crate::tape::Var;
use crate::tensor::Tensor;

/// One (example, round) pair; rounds are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId {
    pub example_id: usize,
    pub round: usize,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "example {} round {}", self.example_id, self.round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ImageOnly,
    Joint,
    Fused,
    Ensemble,
}

/// Whether stochastic regularisers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Candidate logits, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    ids: Vec<InstanceId>,
    values: Tensor,
    provenance: Provenance,
}

impl LogitMatrix {
    pub fn new(ids: Vec<InstanceId>, values: Tensor, provenance: Provenance) -> Result<Self> {
        let (rows, cols) = values
            .dims2()
            .ok_or_else(|| Error::Invalid("logits must be a matrix".into()))?;
        if rows != ids.len() {
            return Err(Error::Invalid(format!("{rows} logit rows for {} instances", ids.len())));
        }
        if cols == 0 {
            return Err(Error::Invalid("logits need at least one candidate".into()));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("logits must be finite".into()));
        }
        Ok(Self {
            ids,
            values,
            provenance,
        })
    }

    pub fn ids(&self) -> &[InstanceId] {
        &self.ids
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn candidates(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row_slice(i)
    }

    /// Ranking of every row, best candidate first.
    pub fn rankings(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| ranking(self.row(i))).collect()
    }

    fn check_aligned(&self, other: &LogitMatrix) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape("logit matrices", self.values.shape(), other.values.shape()));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.ids[i] != other.ids[i]) {
            return Err(Error::Invalid(format!(
                "row {}: {} does not match {}",
                i + 1,
                self.ids[i],
                other.ids[i]
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("C={} INSTANCES={}\n", self.candidates(), self.len());
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(&format!("{} {} {}\n", id.example_id, id.round, join_floats(self.row(i))));
        }
        s
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    /// The file does not record provenance; the caller states it.
    pub fn read_from<R: BufRead>(r: R, provenance: Provenance) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty logit file"))??;
        let (c, n) = parse_header(&header)?;
        let mut ids = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * c);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let ln = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != c + 2 {
                return Err(Error::parse(ln, format!("expected 2 ids and {c} logits, found {} fields", toks.len())));
            }
            ids.push(InstanceId {
                example_id: parse_usize(toks[0], ln)?,
                round: parse_usize(toks[1], ln)?,
            });
            for t in &toks[2..] {
                data.push(parse_float(t, ln)?);
            }
        }
        if ids.len() != n {
            return Err(Error::parse(1, format!("header announces {n} instances, file has {}", ids.len())));
        }
        Self::new(ids, Tensor::from_parts(vec![n, c], data), provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), provenance)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::parse(1, "expected header `C=<int> INSTANCES=<int>`");
    let mut it = line.split_whitespace();
    let c = it.next().and_then(|t| t.strip_prefix("C=")).ok_or_else(bad)?;
    let n = it.next().and_then(|t| t.strip_prefix("INSTANCES=")).ok_or_else(bad)?;
    if it.next().is_some() {
        return Err(bad());
    }
    let c = parse_usize(c, 1)?;
    if c == 0 {
        return Err(Error::parse(1, "C must be positive"));
    }
    Ok((c, parse_usize(n, 1)?))
}

/// Element-wise sum of two aligned logit matrices.
pub fn consensus(l_i: &LogitMatrix, l_j: &LogitMatrix) -> Result<LogitMatrix> {
    l_i.check_aligned(l_j)?;
    let data = l_i
        .values
        .data()
        .iter()
        .zip(l_j.values.data())
        .map(|(a, b)| a + b)
        .collect();
    LogitMatrix::new(
        l_i.ids.clone(),
        Tensor::from_parts(l_i.values.shape().to_vec(), data),
        Provenance::Fused,
    )
}

/// Per-instance factors `ξ_i ∈ {0, 1/(1−p)}` with `P(ξ_i = 0) = p`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDropoutMask {
    pub xi: Vec<f64>,
    pub p: f64,
}

impl InstanceDropoutMask {
    pub fn sample<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let xi = (0..n)
            .map(|_| if p > 0.0 && rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        Ok(Self { xi, p })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            xi: vec![1.0; n],
            p: 0.0,
        }
    }

    pub fn dropped(&self) -> usize {
        self.xi.iter().filter(|&&x| x == 0.0).count()
    }

    pub fn apply(&self, l: &LogitMatrix) -> Result<LogitMatrix> {
        if self.xi.len() != l.len() {
            return Err(Error::Invalid(format!("mask of {} for {} rows", self.xi.len(), l.len())));
        }
        let c = l.candidates();
        let data = l
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.xi[i / c])
            .collect();
        LogitMatrix::new(l.ids.clone(), Tensor::from_parts(l.values.shape().to_vec(), data), l.provenance)
    }
}

/// Drops whole instance rows of the joint head's logits with probability
/// `p`, scaling survivors by `1/(1−p)`.
pub fn instance_dropout<R: Rng>(l_j: &LogitMatrix, p: f64, rng: &mut R) -> Result<(LogitMatrix, InstanceDropoutMask)> {
    let mask = InstanceDropoutMask::sample(l_j.len(), p, rng)?;
    Ok((mask.apply(l_j)?, mask))
}

/// Consensus dropout fusion on the tape: `L_I + ξ ⊙ L_J` while training,
/// `L_I + L_J` in evaluation. Returns the mask drawn, if any.
pub fn consensus_dropout_forward<'t, R: Rng>(
    l_i: Var<'t>,
    l_j: Var<'t>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var<'t>, Option<InstanceDropoutMask>)> {
    match mode {
        Mode::Eval => Ok((l_i.add(l_j)?, None)),
        Mode::Train => {
            let mask = InstanceDropoutMask::sample(l_j.dims2().0, p, rng)?;
            let fused = l_i.add(l_j.scale_rows(&mask.xi)?)?;
            Ok((fused, Some(mask)))
        }
    }
}

/// Sum of aligned logit matrices; rank rows with [`LogitMatrix::rankings`].
pub fn ensemble(models: &[LogitMatrix]) -> Result<LogitMatrix> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Invalid("ensemble needs at least one model".into()))?;
    let mut data = first.values.data().to_vec();
    for m in rest {
        first.check_aligned(m)?;
        for (acc, x) in data.iter_mut().zip(m.values.data()) {
            *acc += x;
        }
    }
    LogitMatrix::new(
        first.ids.clone(),
        Tensor::from_parts(first.values.shape().to_vec(), data),
        Provenance::Ensemble,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<InstanceId> {
        (0..n)
            .map(|i| InstanceId {
                example_id: i / 3,
                round: i % 3 + 1,
            })
            .collect()
    }

    fn logits(rows: &[&[f64]]) -> LogitMatrix {
        LogitMatrix::new(ids(rows.len()), Tensor::from_rows(rows).unwrap(), Provenance::Joint).unwrap()
    }

    fn random_logits(rng: &mut ChaCha8Rng, n: usize, c: usize) -> LogitMatrix {
        LogitMatrix::new(ids(n), random_tensor(rng, &[n, c], 3.0), Provenance::ImageOnly).unwrap()
    }

    #[test]
    fn consensus_cases() {
        let s = consensus(&logits(&[&[1.0, 2.0]]), &logits(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(s.values().data(), &[4.0, 6.0]);
        assert_eq!(s.provenance(), Provenance::Fused);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_logits(&mut rng, 6, 4);
        let zero = LogitMatrix::new(ids(6), Tensor::zeros(&[6, 4]), Provenance::Joint).unwrap();
        assert_eq!(consensus(&a, &zero).unwrap().values(), a.values());

        let b = random_logits(&mut rng, 6, 4);
        let s = consensus(&a, &b).unwrap();
        for i in 0..6 {
            let sums: Vec<f64> = (0..4).map(|j| a.row(i)[j] + b.row(i)[j]).collect();
            let mut best = 0;
            for j in 1..4 {
                if sums[j] > sums[best] {
                    best = j;
                }
            }
            assert_eq!(s.rankings()[i][0], best);
        }
        assert_eq!(consensus(&a, &b).unwrap(), consensus(&b, &a).unwrap());
        assert!(consensus(&a, &random_logits(&mut rng, 5, 4)).is_err());
    }

    #[test]
    fn instance_dropout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_logits(&mut rng, 12, 5);
        let (same, mask) = instance_dropout(&l, 0.0, &mut rng).unwrap();
        assert_eq!(same.values(), l.values());
        assert_eq!(mask.dropped(), 0);

        let (out, mask) = instance_dropout(&l, 0.25, &mut rng).unwrap();
        for (i, &x) in mask.xi.iter().enumerate() {
            assert!(x == 0.0 || x == 4.0 / 3.0);
            for j in 0..5 {
                assert_eq!(out.row(i)[j], l.row(i)[j] * x);
            }
        }
        assert!(instance_dropout(&l, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropped_row_equals_image_only_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let l_i = tape.constant(random_tensor(&mut rng, &[40, 5], 2.0));
        let l_j = tape.constant(random_tensor(&mut rng, &[40, 5], 2.0));
        let (fused, mask) = consensus_dropout_forward(l_i, l_j, 0.25, Mode::Train, &mut rng).unwrap();
        let mask = mask.unwrap();
        assert!(mask.dropped() > 0);
        let (f, li) = (fused.value(), l_i.value());
        for (i, &x) in mask.xi.iter().enumerate() {
            if x == 0.0 {
                assert_eq!(f.row_slice(i), li.row_slice(i));
            }
        }
        let (eval, none) = consensus_dropout_forward(l_i, l_j, 0.25, Mode::Eval, &mut rng).unwrap();
        assert!(none.is_none());
        let sum = l_i.add(l_j).unwrap().value();
        assert_eq!(eval.value(), sum);
    }

    #[test]
    fn ensemble_cases() {
        let e = ensemble(&[logits(&[&[2.0, 1.0]]), logits(&[&[0.0, 5.0]])]).unwrap();
        assert_eq!(e.values().data(), &[2.0, 6.0]);
        assert_eq!(e.rankings()[0][0], 1);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_logits(&mut rng, 6, 10);
        assert_eq!(ensemble(std::slice::from_ref(&a)).unwrap().rankings(), a.rankings());

        let models: Vec<LogitMatrix> = (0..3).map(|_| random_logits(&mut rng, 6, 10)).collect();
        let e = ensemble(&models).unwrap();
        for i in 0..6 {
            let mut pairs: Vec<(f64, usize)> = (0..10)
                .map(|j| (models[0].row(i)[j] + models[1].row(i)[j] + models[2].row(i)[j], j))
                .collect();
            pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
            let want: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            assert_eq!(e.rankings()[i], want);
        }

        // shifting one model's row by a constant keeps the ranking
        let mut shifted = models[1].values().clone();
        for x in &mut shifted.data_mut()[10..20] {
            *x += 7.5;
        }
        let shifted = LogitMatrix::new(ids(6), shifted, Provenance::Joint).unwrap();
        let e2 = ensemble(&[models[0].clone(), shifted, models[2].clone()]).unwrap();
        assert_eq!(e.rankings(), e2.rankings());
        assert!(ensemble(&[]).is_err());
    }

    #[test]
    fn logit_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_logits(&mut rng, 9, 7);
        let text = l.to_text();
        let back = LogitMatrix::read_from(text.as_bytes(), Provenance::ImageOnly).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.to_text(), text);
        assert!(matches!(
            LogitMatrix::read_from("C=2 INSTANCES=1\n0 1 0.5\n".as_bytes(), Provenance::Joint),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(LogitMatrix::read_from("C=2 N=1\n".as_bytes(), Provenance::Joint).is_err());
    }
}
