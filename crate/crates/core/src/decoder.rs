//! Pointer-augmented transformer decoder.
//!
//! One block runs four post-norm attention sublayers (causal self-attention,
//! then attention over the selected history, the resolved question and the
//! reasoned video), followed by an optional feed-forward sublayer. Each step
//! scores `[vocabulary || question positions]`; a pointer hit at position i
//! emits question token i.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{BOS, EOS, UNK};
use crate::nn::{argmax, Ctx, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{log_sigmoid, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Decoding stops after this many steps, the `<eos>` step included.
pub const MAX_DECODE_LEN: usize = 30;

/// Row-major `[n, n]` mask letting position i see positions `<= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

/// Row-major `[rows, cols]` mask hiding columns `>= valid`.
pub fn padding_mask(rows: usize, cols: usize, valid: usize) -> Vec<bool> {
    (0..rows * cols).map(|k| k % cols < valid).collect()
}

/// Scaled dot-product attention with K heads and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "d = {d} is not divisible by K = {heads}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, true, rng)?,
            heads,
        })
    }

    /// Returns the attended features and one `[n_query, n_memory]` weight
    /// matrix per head. `mask` is row-major over that same shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.query.fan_in;
        let dk = d / self.heads;
        let q = self.query.forward(tape, store, query)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = tape.slice(q, 1, cols.clone())?;
            let kh = tape.slice(k, 1, cols.clone())?;
            let vh = tape.slice(v, 1, cols)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = match mask {
                Some(m) => tape.masked_softmax(s, m)?,
                None => tape.softmax(s, 1)?,
            };
            weights.push(a);
            let a = ctx.dropout(tape, a)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&outs, 1)?;
        Ok((self.output.forward(tape, store, cat)?, weights))
    }
}

/// Encoder-side tensors the decoder attends to.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// Selected history `h_rd`, `[L, d]`.
    pub history: Var,
    /// Rows of `history` that are real tokens; the rest are padding.
    pub history_len: usize,
    /// Resolved question `q*`, `[N_q, d]`.
    pub question: Var,
    /// Reasoned video `v*_st`, `[N_v, d]`.
    pub video: Var,
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    self_attn: MultiHeadAttention,
    history_attn: MultiHeadAttention,
    question_attn: MultiHeadAttention,
    video_attn: MultiHeadAttention,
    norms: [LayerNorm; 4],
    ffn: Option<FeedForward>,
}

/// Stage outputs `z^a, z^h, z^q, z^v` of one block.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub self_attended: Var,
    pub history_attended: Var,
    pub question_attended: Var,
    pub video_attended: Var,
}

/// Per-head attention weights of one block, in stage order.
#[derive(Clone, Debug)]
pub struct BlockAttention {
    pub self_attn: Vec<Var>,
    pub history: Vec<Var>,
    pub question: Vec<Var>,
    pub video: Vec<Var>,
}

impl BlockAttention {
    pub fn all(&self) -> impl Iterator<Item = (&'static str, &Var)> {
        self.self_attn
            .iter()
            .map(|v| ("self", v))
            .chain(self.history.iter().map(|v| ("history", v)))
            .chain(self.question.iter().map(|v| ("question", v)))
            .chain(self.video.iter().map(|v| ("video", v)))
    }
}

fn post_norm(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNorm,
    x: Var,
    sub: Var,
    ctx: &mut Ctx,
) -> Result<Var> {
    let sub = ctx.dropout(tape, sub)?;
    let sum = tape.add(x, sub)?;
    norm.forward(tape, store, sum)
}

impl DecoderBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mha = |store: &mut ParamStore, stage: &str, rng: &mut Rng| {
            MultiHeadAttention::new(store, &format!("{name}.{stage}"), d, heads, rng)
        };
        let self_attn = mha(store, "self_attn", rng)?;
        let history_attn = mha(store, "history_attn", rng)?;
        let question_attn = mha(store, "question_attn", rng)?;
        let video_attn = mha(store, "video_attn", rng)?;
        let norms = [
            LayerNorm::new(store, &format!("{name}.norm0"), d)?,
            LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            LayerNorm::new(store, &format!("{name}.norm3"), d)?,
        ];
        let ffn = if ffn {
            Some(FeedForward {
                inner: Linear::new(store, &format!("{name}.ffn.inner"), d, 4 * d, true, rng)?,
                outer: Linear::new(store, &format!("{name}.ffn.outer"), 4 * d, d, true, rng)?,
                norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), d)?,
            })
        } else {
            None
        };
        Ok(Self {
            self_attn,
            history_attn,
            question_attn,
            video_attn,
            norms,
            ffn,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: &Memory,
        ctx: &mut Ctx,
    ) -> Result<(Var, Stages, BlockAttention)> {
        let j = tape.shape(x)[0];
        let causal = causal_mask(j);
        let (sa, a_self) = self
            .self_attn
            .forward(tape, store, x, x, Some(&causal), ctx)?;
        let z_a = post_norm(tape, store, &self.norms[0], x, sa, ctx)?;

        let l = tape.shape(memory.history)[0];
        let pad = padding_mask(j, l, memory.history_len);
        let (ha, a_hist) =
            self.history_attn
                .forward(tape, store, z_a, memory.history, Some(&pad), ctx)?;
        let z_h = post_norm(tape, store, &self.norms[1], z_a, ha, ctx)?;

        let (qa, a_q) = self
            .question_attn
            .forward(tape, store, z_h, memory.question, None, ctx)?;
        let z_q = post_norm(tape, store, &self.norms[2], z_h, qa, ctx)?;

        let (va, a_v) = self
            .video_attn
            .forward(tape, store, z_q, memory.video, None, ctx)?;
        let z_v = post_norm(tape, store, &self.norms[3], z_q, va, ctx)?;

        let out = match &self.ffn {
            Some(f) => {
                let h = f.inner.forward(tape, store, z_v)?;
                let h = tape.relu(h);
                let h = ctx.dropout(tape, h)?;
                let h = f.outer.forward(tape, store, h)?;
                post_norm(tape, store, &f.norm, z_v, h, ctx)?
            }
            None => z_v,
        };
        Ok((
            out,
            Stages {
                self_attended: z_a,
                history_attended: z_h,
                question_attended: z_q,
                video_attended: z_v,
            },
            BlockAttention {
                self_attn: a_self,
                history: a_hist,
                question: a_q,
                video: a_v,
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: bool,
    pub vocab_len: usize,
}

/// Everything one decoder pass produced.
pub struct DecoderTrace {
    /// Final hidden states `[j, d]`.
    pub output: Var,
    pub stages: Vec<Stages>,
    pub attention: Vec<BlockAttention>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<DecoderBlock>,
    pub g_voc: Linear,
    pub g_ptr_q: Linear,
    pub g_ptr_z: Linear,
    vocab_len: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::config("decoder needs at least one block"));
        }
        let blocks = (0..cfg.layers)
            .map(|l| {
                DecoderBlock::new(
                    store,
                    &format!("decoder.block{l}"),
                    cfg.d,
                    cfg.heads,
                    cfg.ffn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            g_voc: Linear::new(store, "decoder.g_voc", cfg.d, cfg.vocab_len, true, rng)?,
            g_ptr_q: Linear::new(store, "decoder.g_ptr_q", cfg.d, cfg.d, true, rng)?,
            g_ptr_z: Linear::new(store, "decoder.g_ptr_z", cfg.d, cfg.d, true, rng)?,
            vocab_len: cfg.vocab_len,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    /// Runs every block over the embedded decoder input `a_in` (`[j, d]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_in: Var,
        memory: &Memory,
        ctx: &mut Ctx,
    ) -> Result<DecoderTrace> {
        let mut x = a_in;
        let mut stages = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, s, a) = block.forward(tape, store, x, memory, ctx)?;
            x = out;
            stages.push(s);
            attention.push(a);
        }
        Ok(DecoderTrace {
            output: x,
            stages,
            attention,
        })
    }

    /// `p = [g_voc(z) || g_ptr_z(z) g_ptr_q(q*)^T]`, shape `[j, |V| + N_q]`.
    pub fn scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        question: Var,
    ) -> Result<Var> {
        let voc = self.g_voc.forward(tape, store, z)?;
        let pz = self.g_ptr_z.forward(tape, store, z)?;
        let pq = self.g_ptr_q.forward(tape, store, question)?;
        let pqt = tape.transpose(pq)?;
        let ptr = tape.matmul(pz, pqt)?;
        tape.concat(&[voc, ptr], 1)
    }
}

/// Multi-hot target for one step: the vocabulary slot of the target plus
/// every question position holding the same word.
pub fn multi_hot(
    target_id: usize,
    target_word: &str,
    question_words: &[String],
    vocab_len: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; vocab_len + question_words.len()];
    y[target_id] = 1.0;
    for (i, w) in question_words.iter().enumerate() {
        if w == target_word {
            y[vocab_len + i] = 1.0;
        }
    }
    y
}

/// Teacher-forcing input `<bos> + answer` and the `[n + 1, |V| + N_q]`
/// targets for `answer + <eos>`.
pub fn teacher_forcing(
    answer_ids: &[usize],
    answer_words: &[String],
    question_words: &[String],
    vocab_len: usize,
) -> Result<(Vec<usize>, Tensor)> {
    if answer_ids.is_empty() || answer_ids.len() != answer_words.len() {
        return Err(Error::contract("teacher forcing needs a non-empty answer"));
    }
    if answer_ids.len() >= MAX_DECODE_LEN {
        return Err(Error::contract(format!(
            "answer of {} tokens leaves no room for <eos> within {MAX_DECODE_LEN} steps",
            answer_ids.len()
        )));
    }
    let mut input = vec![BOS];
    input.extend_from_slice(answer_ids);
    let width = vocab_len + question_words.len();
    let mut data = Vec::with_capacity(input.len() * width);
    for (&id, w) in answer_ids.iter().zip(answer_words) {
        data.extend(multi_hot(id, w, question_words, vocab_len));
    }
    data.extend(multi_hot(EOS, "<eos>", question_words, vocab_len));
    let rows = input.len();
    Ok((input, Tensor::new(vec![rows, width], data)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Vocab,
    Pointer,
}

/// One emitted token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedToken {
    /// Vocabulary id fed back to the decoder.
    pub id: usize,
    /// Slot of `p` that produced it.
    pub slot: usize,
    pub segment: Segment,
}

impl DecodedToken {
    /// Question position for pointer hits.
    pub fn position(&self, vocab_len: usize) -> Option<usize> {
        match self.segment {
            Segment::Pointer => Some(self.slot - vocab_len),
            Segment::Vocab => None,
        }
    }

    pub fn word(&self, vocab: &crate::encoders::Vocabulary, question_words: &[String]) -> String {
        match self.position(vocab.len()) {
            Some(i) => question_words[i].clone(),
            None => vocab.token(self.id).to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Emitted tokens, `<eos>` excluded.
    pub tokens: Vec<DecodedToken>,
    pub ended_with_eos: bool,
    /// Sum of `log sigmoid` of every chosen slot, `<eos>` included.
    pub log_prob: f64,
    /// `log_prob / steps^length_penalty`.
    pub score: f64,
}

impl Decoded {
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.ended_with_eos)
    }

    pub fn words(
        &self,
        vocab: &crate::encoders::Vocabulary,
        question_words: &[String],
    ) -> Vec<String> {
        self.tokens
            .iter()
            .map(|t| t.word(vocab, question_words))
            .collect()
    }
}

/// Length-normalized hypothesis score.
pub fn hypothesis_score(log_prob: f64, steps: usize, length_penalty: f64) -> f64 {
    log_prob / (steps as f64).powf(length_penalty)
}

/// What a decoding step needs to know about the question.
#[derive(Clone, Copy, Debug)]
pub struct PointerContext<'a> {
    pub question_ids: &'a [usize],
    pub question_words: &'a [String],
    pub vocab_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum TokenKey {
    Id(usize),
    Word(String),
}

impl PointerContext<'_> {
    fn width(&self) -> usize {
        self.vocab_len + self.question_ids.len()
    }

    fn token(&self, slot: usize) -> DecodedToken {
        if slot < self.vocab_len {
            DecodedToken {
                id: slot,
                slot,
                segment: Segment::Vocab,
            }
        } else {
            DecodedToken {
                id: self.question_ids[slot - self.vocab_len],
                slot,
                segment: Segment::Pointer,
            }
        }
    }

    /// Copies of out-of-vocabulary words are told apart by their text.
    fn key(&self, slot: usize) -> TokenKey {
        let t = self.token(slot);
        match t.segment {
            Segment::Pointer if t.id == UNK => {
                TokenKey::Word(self.question_words[slot - self.vocab_len].clone())
            }
            _ => TokenKey::Id(t.id),
        }
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::Shape {
                op: "decode_step",
                lhs: vec![row.len()],
                rhs: vec![self.width()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite decoder scores".into()));
        }
        Ok(())
    }
}

/// Argmax decoding. `step(prefix)` returns the score row for the token
/// following `prefix` (which starts with `<bos>`).
pub fn greedy_decode<F>(ptr: PointerContext, length_penalty: f64, mut step: F) -> Result<Decoded>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![BOS];
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut ended_with_eos = false;
    for _ in 0..MAX_DECODE_LEN {
        let row = step(&prefix)?;
        ptr.check_row(&row)?;
        let slot = argmax(&row);
        log_prob += log_sigmoid(row[slot]);
        if slot == EOS {
            ended_with_eos = true;
            break;
        }
        let t = ptr.token(slot);
        prefix.push(t.id);
        tokens.push(t);
    }
    let steps = tokens.len() + usize::from(ended_with_eos);
    Ok(Decoded {
        tokens,
        ended_with_eos,
        log_prob,
        score: hypothesis_score(log_prob, steps, length_penalty),
    })
}

struct Hypothesis {
    prefix: Vec<usize>,
    tokens: Vec<DecodedToken>,
    log_prob: f64,
}

struct Candidate {
    parent: usize,
    slot: usize,
    logit: f64,
    log_prob: f64,
    score: f64,
}

/// Length-normalized beam search.
///
/// Each live hypothesis proposes one candidate per distinct token; when a
/// vocabulary slot and a pointer slot name the same token only the higher
/// logit survives (lower slot on ties). Candidates are ranked by score, then
/// parent rank, logit and slot, and the best `beam` are kept. A candidate
/// ending in `<eos>` or reaching the step limit is finished. Search stops
/// once `beam` hypotheses have finished or none are left alive. With
/// `beam = 1` this reproduces [`greedy_decode`].
pub fn beam_decode<F>(
    ptr: PointerContext,
    beam: usize,
    length_penalty: f64,
    mut step: F,
) -> Result<Decoded>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam < 1 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let mut alive = vec![Hypothesis {
        prefix: vec![BOS],
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    while !alive.is_empty() && finished.len() < beam {
        let mut candidates = Vec::new();
        for (parent, hyp) in alive.iter().enumerate() {
            let row = step(&hyp.prefix)?;
            ptr.check_row(&row)?;
            let mut best: HashMap<TokenKey, usize> = HashMap::new();
            let mut order = Vec::new();
            for slot in 0..row.len() {
                let key = ptr.key(slot);
                match best.get(&key) {
                    Some(&s) if row[s] >= row[slot] => {}
                    Some(_) => {
                        best.insert(key, slot);
                    }
                    None => {
                        order.push(key.clone());
                        best.insert(key, slot);
                    }
                }
            }
            let steps = hyp.tokens.len() + 1;
            for key in order {
                let slot = best[&key];
                let log_prob = hyp.log_prob + log_sigmoid(row[slot]);
                candidates.push(Candidate {
                    parent,
                    slot,
                    logit: row[slot],
                    log_prob,
                    score: hypothesis_score(log_prob, steps, length_penalty),
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(b.logit.total_cmp(&a.logit))
                .then(a.slot.cmp(&b.slot))
        });
        let mut next = Vec::new();
        for c in candidates.into_iter().take(beam) {
            let parent = &alive[c.parent];
            if c.slot == EOS {
                finished.push(Decoded {
                    tokens: parent.tokens.clone(),
                    ended_with_eos: true,
                    log_prob: c.log_prob,
                    score: c.score,
                });
                continue;
            }
            let t = ptr.token(c.slot);
            let mut prefix = parent.prefix.clone();
            prefix.push(t.id);
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            if tokens.len() == MAX_DECODE_LEN {
                finished.push(Decoded {
                    tokens,
                    ended_with_eos: false,
                    log_prob: c.log_prob,
                    score: c.score,
                });
            } else {
                next.push(Hypothesis {
                    prefix,
                    tokens,
                    log_prob: c.log_prob,
                });
            }
        }
        alive = next;
    }
    let mut best: Option<Decoded> = None;
    for f in finished {
        if best.as_ref().map_or(true, |b| {
            f.score.partial_cmp(&b.score) == Some(Ordering::Greater)
        }) {
            best = Some(f);
        }
    }
    best.ok_or_else(|| Error::contract("beam search finished no hypothesis"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coref::Neighborhood;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn setup(d: usize, vocab: usize) -> (ParamStore, Decoder, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(31);
        let cfg = DecoderConfig {
            d,
            heads: 4,
            layers: 1,
            ffn: true,
            vocab_len: vocab,
        };
        let dec = Decoder::new(&mut store, &cfg, &mut rng).unwrap();
        (store, dec, rng)
    }

    struct Inputs {
        a_in: Tensor,
        history: Tensor,
        question: Tensor,
        video: Tensor,
    }

    fn inputs(rng: &mut Rng, j: usize, d: usize) -> Inputs {
        Inputs {
            a_in: random(rng, &[j, d]),
            history: random(rng, &[5, d]),
            question: random(rng, &[3, d]),
            video: random(rng, &[6, d]),
        }
    }

    fn run(
        dec: &Decoder,
        store: &ParamStore,
        x: &Inputs,
        history_len: usize,
    ) -> (Tape, DecoderTrace, Memory) {
        let mut tape = Tape::new();
        let a = tape.constant(x.a_in.clone());
        let memory = Memory {
            history: tape.constant(x.history.clone()),
            history_len,
            question: tape.constant(x.question.clone()),
            video: tape.constant(x.video.clone()),
        };
        let trace = dec
            .forward(&mut tape, store, a, &memory, &mut Ctx::eval())
            .unwrap();
        (tape, trace, memory)
    }

    #[test]
    fn masks() {
        assert_eq!(causal_mask(2), vec![true, false, true, true]);
        assert_eq!(padding_mask(1, 3, 2), vec![true, true, false]);
    }

    #[test]
    fn single_step_self_attention_is_one() {
        let (store, dec, mut rng) = setup(8, 5);
        let x = inputs(&mut rng, 1, 8);
        let (tape, trace, _) = run(&dec, &store, &x, 5);
        for &a in &trace.attention[0].self_attn {
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn causal_rows_unchanged_by_later_inputs() {
        let (store, dec, mut rng) = setup(8, 5);
        let x = inputs(&mut rng, 4, 8);
        let mut y = inputs(&mut rng, 4, 8);
        y.history = x.history.clone();
        y.question = x.question.clone();
        y.video = x.video.clone();
        y.a_in.data_mut()[..16].copy_from_slice(&x.a_in.data()[..16]);
        let (t1, r1, _) = run(&dec, &store, &x, 5);
        let (t2, r2, _) = run(&dec, &store, &y, 5);
        assert_eq!(
            &t1.value(r1.output).data()[..16],
            &t2.value(r2.output).data()[..16]
        );
        assert_ne!(
            t1.value(r1.output).data()[16..],
            t2.value(r2.output).data()[16..]
        );
    }

    #[test]
    fn video_only_enters_at_the_last_stage() {
        let (store, dec, mut rng) = setup(8, 5);
        let x = inputs(&mut rng, 3, 8);
        let mut y = inputs(&mut rng, 3, 8);
        y.a_in = x.a_in.clone();
        y.history = x.history.clone();
        y.question = x.question.clone();
        y.video = Tensor::zeros(&[6, 8]);
        let (t1, r1, _) = run(&dec, &store, &x, 5);
        let (t2, r2, _) = run(&dec, &store, &y, 5);
        let (s1, s2) = (r1.stages[0], r2.stages[0]);
        assert_eq!(
            t1.value(s1.question_attended),
            t2.value(s2.question_attended)
        );
        assert_ne!(t1.value(s1.video_attended), t2.value(s2.video_attended));
    }

    #[test]
    fn attention_rows_are_stochastic_and_respect_masks() {
        let (store, dec, mut rng) = setup(8, 5);
        let x = inputs(&mut rng, 4, 8);
        let (tape, trace, _) = run(&dec, &store, &x, 2);
        let att = &trace.attention[0];
        let check = |heads: &[Var], nb: Option<Neighborhood>| {
            for &h in heads {
                let a = tape.value(h);
                for i in 0..a.rows() {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    if let Some(nb) = &nb {
                        for j in 0..a.cols() {
                            if !nb.contains(i, j) {
                                assert_eq!(a.get(i, j), 0.0);
                            }
                        }
                    }
                }
            }
        };
        check(
            &att.self_attn,
            Some(Neighborhood::from_fn(4, |i, j| j <= i)),
        );
        for &h in &att.history {
            let a = tape.value(h);
            assert!(a
                .data()
                .chunks(5)
                .all(|row| row[2..].iter().all(|&v| v == 0.0)));
        }
        check(&att.history, None);
        check(&att.question, None);
        check(&att.video, None);
    }

    #[test]
    fn score_width_and_bilinear_zero() {
        let (mut store, dec, mut rng) = setup(8, 5);
        let x = inputs(&mut rng, 2, 8);
        let (mut tape, trace, memory) = run(&dec, &store, &x, 5);
        let p = dec
            .scores(&mut tape, &store, trace.output, memory.question)
            .unwrap();
        assert_eq!(tape.shape(p), &[2, 5 + 3]);
        // g_ptr_q projects onto the first half, g_ptr_z onto the second
        for (lin, keep) in [(&dec.g_ptr_q, 0..4), (&dec.g_ptr_z, 4..8)] {
            let w = store.get_mut(lin.weight).value.data_mut();
            for (k, v) in w.iter_mut().enumerate() {
                if !keep.contains(&(k % 8)) {
                    *v = 0.0;
                }
            }
            let b = store.get_mut(lin.bias.unwrap()).value.data_mut();
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let (mut tape, trace, memory) = run(&dec, &store, &x, 5);
        let p = dec
            .scores(&mut tape, &store, trace.output, memory.question)
            .unwrap();
        let p = tape.value(p);
        for r in 0..2 {
            assert_eq!(&p.row(r)[5..], &[0.0, 0.0, 0.0]);
        }
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn multi_hot_counts() {
        let q = words(&["is", "it", "red", "it"]);
        assert_eq!(multi_hot(7, "blue", &q, 10).iter().sum::<f64>(), 1.0);
        let y = multi_hot(8, "it", &q, 10);
        assert_eq!(y.iter().sum::<f64>(), 3.0);
        assert_eq!((y[8], y[11], y[13]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let q = words(&["what", "is", "it"]);
        let (input, y) = teacher_forcing(&[5, 6], &words(&["it", "is"]), &q, 8).unwrap();
        assert_eq!(input, vec![BOS, 5, 6]);
        assert_eq!(y.shape(), &[3, 11]);
        assert_eq!(y.get(0, 5), 1.0);
        assert_eq!(y.get(0, 8 + 2), 1.0);
        assert_eq!(y.get(1, 6), 1.0);
        assert_eq!(y.get(2, EOS), 1.0);
        assert_eq!(y.row(2).iter().sum::<f64>(), 1.0);
        assert!(teacher_forcing(&[], &[], &q, 8).is_err());
    }

    fn ctx<'a>(ids: &'a [usize], ws: &'a [String], vocab: usize) -> PointerContext<'a> {
        PointerContext {
            question_ids: ids,
            question_words: ws,
            vocab_len: vocab,
        }
    }

    #[test]
    fn eos_first_gives_empty_answer() {
        let ws = words(&["a"]);
        let out = greedy_decode(ctx(&[4], &ws, 6), 1.0, |_| {
            let mut row = vec![-5.0; 7];
            row[EOS] = 2.0;
            Ok(row)
        })
        .unwrap();
        assert!(out.tokens.is_empty() && out.ended_with_eos);
    }

    #[test]
    fn greedy_never_exceeds_the_step_limit() {
        let ws = words(&["a"]);
        let out = greedy_decode(ctx(&[4], &ws, 6), 1.0, |_| {
            let mut row = vec![-5.0; 7];
            row[5] = 2.0;
            Ok(row)
        })
        .unwrap();
        assert_eq!(out.tokens.len(), MAX_DECODE_LEN);
        assert!(!out.ended_with_eos);
    }

    #[test]
    fn pointer_hit_emits_question_token() {
        let ws = words(&["x", "y", "z"]);
        let ids = [9, 4, 7];
        let out = greedy_decode(ctx(&ids, &ws, 10), 1.0, |prefix| {
            let mut row = vec![-5.0; 13];
            if prefix.len() == 1 {
                row[10 + 2] = 3.0;
            } else {
                row[EOS] = 3.0;
            }
            Ok(row)
        })
        .unwrap();
        assert_eq!(out.tokens.len(), 1);
        assert_eq!(out.tokens[0].id, 7);
        assert_eq!(out.tokens[0].position(10), Some(2));
    }

    #[test]
    fn length_penalty_prefers_longer_on_crafted_table() {
        // short: one token + eos, log-prob -1.0; long: three tokens + eos, -1.6
        let short = hypothesis_score(-1.0, 2, 0.0);
        let long = hypothesis_score(-1.6, 4, 0.0);
        assert!(short > long);
        assert!(hypothesis_score(-1.6, 4, 1.0) > hypothesis_score(-1.0, 2, 1.0));
        // the same table through beam search
        let table = |prefix: &[usize]| -> Result<Vec<f64>> {
            let logit = |p: f64| (p / (1.0 - p)).ln();
            let mut row = vec![-30.0; 8];
            match prefix {
                [BOS] => {
                    row[4] = logit((-0.5f64).exp());
                    row[5] = logit((-0.1f64).exp());
                }
                [BOS, 4] => row[EOS] = logit((-0.5f64).exp()),
                [BOS, 5] => row[6] = logit((-0.5f64).exp()),
                [BOS, 5, 6] => row[7] = logit((-0.5f64).exp()),
                _ => row[EOS] = logit((-0.5f64).exp()),
            }
            Ok(row)
        };
        let ws: Vec<String> = Vec::new();
        let ids: Vec<usize> = Vec::new();
        let p0 = beam_decode(ctx(&ids, &ws, 8), 3, 0.0, table).unwrap();
        let p1 = beam_decode(ctx(&ids, &ws, 8), 3, 1.0, table).unwrap();
        assert_eq!(p0.tokens.iter().map(|t| t.id).collect::<Vec<_>>(), vec![4]);
        assert!(p1.tokens.len() > p0.tokens.len());
    }

    #[test]
    fn beam_dedupes_vocab_and_pointer_copies() {
        let ws = words(&["red"]);
        let ids = [5];
        // vocab slot 5 and pointer slot 0 both mean "red"
        let out = beam_decode(ctx(&ids, &ws, 6), 2, 1.0, |prefix| {
            let mut row = vec![-8.0; 7];
            if prefix.len() == 1 {
                row[5] = 1.0;
                row[6] = 2.0;
                row[4] = 0.5;
            } else {
                row[EOS] = 4.0;
            }
            Ok(row)
        })
        .unwrap();
        assert_eq!(out.tokens[0].segment, Segment::Pointer);
        assert_eq!(out.tokens[0].id, 5);
    }

    #[test]
    fn beam_one_matches_greedy_on_random_tables() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let seed = rng.below(1 << 30) as u64;
            let ws = words(&["p", "q", "r"]);
            let ids = [5, 6, 2];
            let table = |prefix: &[usize]| -> Result<Vec<f64>> {
                let mut r = Rng::new(
                    seed ^ (prefix
                        .iter()
                        .fold(7u64, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64))),
                );
                Ok((0..11)
                    .map(|_| r.normal() + if prefix.len() > 4 { 0.5 } else { 0.0 })
                    .collect())
            };
            let g = greedy_decode(ctx(&ids, &ws, 8), 1.0, table).unwrap();
            let b = beam_decode(ctx(&ids, &ws, 8), 1, 1.0, table).unwrap();
            assert_eq!(g.tokens, b.tokens);
        }
    }

    #[test]
    fn beam_zero_is_config_error() {
        let ws: Vec<String> = Vec::new();
        let r = beam_decode(ctx(&[], &ws, 4), 0, 1.0, |_| Ok(vec![0.0; 4]));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
