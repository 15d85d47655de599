//! Word embeddings and LSTM encoders for questions, history rounds and
//! candidate answers.
//!
//! All three encoders share one embedding table but own separate
//! recurrent cells (`enc.lstm_q`, `enc.lstm_h`, `enc.lstm_a`). A sequence
//! is represented by the hidden state after its last non-PAD token.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::synth::DialogExample;
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.add(PAD_TOKEN);
        v.add(UNK_TOKEN);
        v
    }

    /// Returns the id of `token`, adding it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lowercased whitespace tokenization.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line index is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let tok = line.trim_end_matches('\r').to_string();
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::parse(i + 1, format!("invalid token {tok:?}")));
            }
            if ids.insert(tok.clone(), i).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate token {tok:?}")));
            }
            tokens.push(tok);
        }
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::parse(1, "vocabulary must start with <pad>, <unk>"));
        }
        Ok(Self { tokens, ids })
    }
}

/// Trailing PAD tokens removed.
pub fn strip_padding(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    &tokens[..end]
}

/// Question tokens followed by answer tokens, the text of one history row.
pub fn build_history_round(question: &[usize], answer: &[usize]) -> Result<Vec<usize>> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out = Vec::with_capacity(question.len() + answer.len());
    out.extend_from_slice(question);
    out.extend_from_slice(answer);
    Ok(out)
}

/// Sizes shared by the three encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

pub const ENCODER_CELLS: [&str; 3] = ["enc.lstm_q", "enc.lstm_h", "enc.lstm_a"];

pub fn init_encoder_params<R: Rng>(store: &mut ParamStore, dims: EncoderDims, rng: &mut R) {
    store.insert("enc.embed", uniform(rng, &[dims.vocab, dims.embed], 0.5));
    for cell in ENCODER_CELLS {
        init_lstm_params(store, cell, dims.embed, dims.hidden, rng);
    }
}

/// Weights `[4h × e]`, `[4h × h]` and bias `[1 × 4h]`, gates ordered
/// input, forget, cell, output.
pub fn init_lstm_params<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    let a = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.w_ih"), uniform(rng, &[4 * hidden, input], a));
    store.insert(format!("{prefix}.w_hh"), uniform(rng, &[4 * hidden, hidden], a));
    store.insert(format!("{prefix}.b"), uniform(rng, &[1, 4 * hidden], a));
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCell<'t> {
    pub w_ih: Var<'t>,
    pub w_hh: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> LstmCell<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_ih: bound.get(&format!("{prefix}.w_ih"))?,
            w_hh: bound.get(&format!("{prefix}.w_hh"))?,
            b: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.dims2().1
    }

    pub fn input(&self) -> usize {
        self.w_ih.dims2().1
    }
}

/// One LSTM update for a batch of rows: `x: [B × e]`, `h, c: [B × h]`.
pub fn lstm_step<'t>(
    x: Var<'t>,
    h_prev: Var<'t>,
    c_prev: Var<'t>,
    cell: &LstmCell<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hs = cell.hidden();
    let (bx, e) = x.dims2();
    if e != cell.input() || h_prev.dims2() != (bx, hs) || c_prev.dims2() != (bx, hs) {
        return Err(Error::shape("lstm_step", &[bx, e], &h_prev.shape()));
    }
    let gates = x
        .matmul_t(cell.w_ih)?
        .add(h_prev.matmul_t(cell.w_hh)?)?
        .add(cell.b.broadcast_to(bx, 4 * hs)?)?;
    let i = gates.slice_cols(0, hs)?.sigmoid();
    let f = gates.slice_cols(hs, hs)?.sigmoid();
    let g = gates.slice_cols(2 * hs, hs)?.tanh();
    let o = gates.slice_cols(3 * hs, hs)?.sigmoid();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}

/// Final hidden state `[1 × h]` of `cell` run over `tokens` from a zero
/// state; trailing PADs are ignored.
pub fn encode_sequence<'t>(tokens: &[usize], cell: &LstmCell<'t>, embed: Var<'t>) -> Result<Var<'t>> {
    let mut batch = SequenceBatch::new();
    let slot = batch.add(tokens)?;
    batch.encode(cell, embed)?.rows(&[slot])
}

/// Distinct token sequences to be encoded by one cell in a single pass.
/// Sequences of equal length are stepped together as one matrix.
#[derive(Debug, Default, Clone)]
pub struct SequenceBatch {
    seqs: Vec<Vec<usize>>,
    slots: HashMap<Vec<usize>, usize>,
}

impl SequenceBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tokens` and returns its slot; identical sequences share
    /// a slot.
    pub fn add(&mut self, tokens: &[usize]) -> Result<usize> {
        let tokens = strip_padding(tokens);
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&s) = self.slots.get(tokens) {
            return Ok(s);
        }
        let s = self.seqs.len();
        self.seqs.push(tokens.to_vec());
        self.slots.insert(tokens.to_vec(), s);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn encode<'t>(&self, cell: &LstmCell<'t>, embed: Var<'t>) -> Result<EncodedTable<'t>> {
        if self.seqs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let tape: &'t Tape = embed.tape();
        let vocab = embed.dims2().0;
        let hs = cell.hidden();
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (slot, s) in self.seqs.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(slot);
        }
        let mut row_of_slot = vec![0; self.seqs.len()];
        let mut blocks = Vec::with_capacity(by_len.len());
        let mut row = 0;
        for (len, slots) in &by_len {
            let b = slots.len();
            let mut h = tape.constant(Tensor::zeros(&[b, hs]));
            let mut c = h;
            for t in 0..*len {
                let ids: Vec<usize> = slots.iter().map(|&s| self.seqs[s][t]).collect();
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(Error::OutOfRange {
                        what: "token",
                        index: bad,
                        len: vocab,
                    });
                }
                let x = embed.gather_rows(&ids)?;
                (h, c) = lstm_step(x, h, c, cell)?;
            }
            for &s in slots {
                row_of_slot[s] = row;
                row += 1;
            }
            blocks.push(h);
        }
        let table = if blocks.len() == 1 {
            blocks[0]
        } else {
            concat_rows(&blocks)?
        };
        Ok(EncodedTable { table, row_of_slot })
    }
}

/// Encodings produced by [`SequenceBatch::encode`].
#[derive(Debug, Clone)]
pub struct EncodedTable<'t> {
    table: Var<'t>,
    row_of_slot: Vec<usize>,
}

impl<'t> EncodedTable<'t> {
    /// Stacks the encodings of `slots` as rows.
    pub fn rows(&self, slots: &[usize]) -> Result<Var<'t>> {
        let rows: Vec<usize> = slots
            .iter()
            .map(|&s| {
                self.row_of_slot.get(s).copied().ok_or(Error::OutOfRange {
                    what: "slot",
                    index: s,
                    len: self.row_of_slot.len(),
                })
            })
            .collect::<Result<_>>()?;
        self.table.gather_rows(&rows)
    }
}

/// The three encoders bound on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoders<'t> {
    pub embed: Var<'t>,
    pub question: LstmCell<'t>,
    pub history: LstmCell<'t>,
    pub answer: LstmCell<'t>,
}

impl<'t> Encoders<'t> {
    pub fn from_bound(bound: &Bound<'t>) -> Result<Self> {
        Ok(Self {
            embed: bound.get("enc.embed")?,
            question: LstmCell::from_bound(bound, ENCODER_CELLS[0])?,
            history: LstmCell::from_bound(bound, ENCODER_CELLS[1])?,
            answer: LstmCell::from_bound(bound, ENCODER_CELLS[2])?,
        })
    }
}

/// Encoded inputs of one dialog round.
#[derive(Debug, Clone)]
pub struct EncodedDialog<'t> {
    /// `[1 × d]` encoding of the current question.
    pub question: Var<'t>,
    /// `[r × d]`; row 0 is the caption, row `j` the round-`j` QA pair.
    pub history: Var<'t>,
    /// `[C × d]` candidate answer encodings.
    pub answers: Var<'t>,
    /// 1-based round index.
    pub round: usize,
}

/// Token lists forming the history rows visible at 1-based `round`.
pub fn history_sequences(example: &DialogExample, round: usize) -> Result<Vec<Vec<usize>>> {
    check_round(example, round)?;
    let mut rows = vec![example.caption.clone()];
    for prev in &example.rounds[..round - 1] {
        rows.push(build_history_round(&prev.question, &prev.answer)?);
    }
    Ok(rows)
}

pub(crate) fn check_round(example: &DialogExample, round: usize) -> Result<()> {
    if round == 0 || round > example.rounds.len() {
        return Err(Error::OutOfRange {
            what: "round",
            index: round,
            len: example.rounds.len(),
        });
    }
    Ok(())
}

/// Encodes question, history and candidates of one round.
pub fn encode_dialog<'t>(
    example: &DialogExample,
    round: usize,
    enc: &Encoders<'t>,
) -> Result<EncodedDialog<'t>> {
    let history_rows = history_sequences(example, round)?;
    let current = &example.rounds[round - 1];

    let mut hb = SequenceBatch::new();
    let h_slots = history_rows
        .iter()
        .map(|s| hb.add(s))
        .collect::<Result<Vec<_>>>()?;
    let mut ab = SequenceBatch::new();
    let a_slots = current
        .candidates
        .iter()
        .map(|s| ab.add(s))
        .collect::<Result<Vec<_>>>()?;

    let question = encode_sequence(&current.question, &enc.question, enc.embed)?;
    let history = hb.encode(&enc.history, enc.embed)?.rows(&h_slots)?;
    let answers = ab.encode(&enc.answer, enc.embed)?.rows(&a_slots)?;
    Ok(EncodedDialog {
        question,
        history,
        answers,
        round,
    })
}
