//! The full pipeline for one dialogue sample: encode, select a history,
//! resolve co-references, reason over the video graph, decode.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::coref::{
    combine_histories, gumbel_select, CorefResolver, Resolved, SelectedHistory, Selection,
};
use crate::data::DialogueSample;
use crate::decoder::{
    beam_decode, greedy_decode, teacher_forcing, Decoded, Decoder, DecoderTrace, Memory,
    PointerContext, Segment,
};
use crate::encoders::{
    build_history_units, tokenize, TextEncoder, VideoEncoder, VideoObjects, Vocabulary,
};
use crate::nn::{argmax, Ctx};
use crate::rng::Rng;
use crate::stgraph::{GnGat, GnGatOutput, SpatioTemporalGraph};
use crate::tensor::{ParamStore, Tape, Var};
use crate::{Error, Result};

/// A sample turned into vocabulary ids, with its video graph built.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub round: usize,
    pub question_words: Vec<String>,
    pub question_ids: Vec<usize>,
    /// Caption first, then one question + answer unit per earlier turn.
    pub history_ids: Vec<Vec<usize>>,
    pub answer_words: Vec<String>,
    pub answer_ids: Vec<usize>,
    pub video: VideoObjects,
    pub graph: SpatioTemporalGraph,
    pub referent: Option<usize>,
}

/// Encoder-side results of one forward pass.
pub struct Encoded {
    pub question: Var,
    pub histories: Vec<Var>,
    /// History scores `[1, r]`.
    pub scores: Var,
    pub selection: Selection,
    pub selected: SelectedHistory,
    pub textual: Resolved,
    pub visual: Resolved,
    pub reasoned: GnGatOutput,
    pub memory: Memory,
}

/// Loss and diagnostics of a teacher-forced pass.
pub struct TeacherForced {
    pub loss: Var,
    /// Step scores `[n + 1, |V| + N_q]`.
    pub logits: Var,
    pub encoded: Encoded,
    pub trace: DecoderTrace,
    /// Steps whose argmax slot emits the target word.
    pub correct: usize,
    pub steps: usize,
}

impl TeacherForced {
    pub fn referent_hit(&self, sample: &PreparedSample) -> Option<bool> {
        sample.referent.map(|r| r == self.encoded.selection.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// One decoded answer in output form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Scga {
    pub config: Config,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub video: VideoEncoder,
    pub coref: CorefResolver,
    pub gngat: GnGat,
    pub decoder: Decoder,
}

impl Scga {
    /// Registers every parameter in `store`, drawing initial values from
    /// `rng`.
    pub fn new(
        config: &Config,
        vocab: Vocabulary,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let text = TextEncoder::new(store, vocab.len(), d, config.max_positions, rng)?;
        let video = VideoEncoder::new(store, config.d_v, d, rng)?;
        let coref = CorefResolver::new(store, d, config.heads, rng)?;
        let gngat = GnGat::new(
            store,
            d,
            &config.head_assignment()?,
            config.gngat_residual,
            rng,
        )?;
        let decoder = Decoder::new(store, &config.decoder_config(vocab.len()), rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            text,
            video,
            coref,
            gngat,
            decoder,
        })
    }

    pub fn prepare(&self, sample: &DialogueSample) -> Result<PreparedSample> {
        sample.validate()?;
        if sample.video.dim() != self.config.d_v {
            return Err(Error::contract(format!(
                "sample {} has d_v = {}, model expects {}",
                sample.id,
                sample.video.dim(),
                self.config.d_v
            )));
        }
        let encode = |words: &[String]| self.vocab.encode(words).0;
        let question_words = tokenize(&sample.question);
        let answer_words = tokenize(&sample.answer);
        let caption = tokenize(&sample.caption);
        let turns: Vec<(Vec<String>, Vec<String>)> = sample
            .turns
            .iter()
            .map(|t| (tokenize(&t.question), tokenize(&t.answer)))
            .collect();
        let history_ids = build_history_units(&caption, &turns)
            .iter()
            .map(|u| encode(u))
            .collect();
        let graph = SpatioTemporalGraph::build(
            &sample.video,
            self.config.tau_s,
            self.config.tau_t,
            self.config.head_assignment()?,
        )?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            round: sample.round,
            question_ids: encode(&question_words),
            question_words,
            history_ids,
            answer_ids: encode(&answer_words),
            answer_words,
            video: sample.video.clone(),
            graph,
            referent: sample.referent,
        })
    }

    pub fn prepare_all(&self, samples: &[DialogueSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &PreparedSample,
        ctx: &mut Ctx,
    ) -> Result<Encoded> {
        let question = self.text.encode(tape, store, &s.question_ids)?;
        let histories = s
            .history_ids
            .iter()
            .map(|h| self.text.encode(tape, store, h))
            .collect::<Result<Vec<_>>>()?;
        let scored = self.coref.scorer.score(tape, store, question, &histories)?;
        let selection = gumbel_select(tape, scored.scores, ctx)?;
        let selected = combine_histories(tape, &selection, &histories)?;
        let textual = self
            .coref
            .resolve_textual(tape, store, question, &selected, ctx)?;
        let video = self.video.encode(tape, store, &s.video)?;
        let visual = self
            .coref
            .resolve_visual(tape, store, video, textual.features, ctx)?;
        let reasoned = self
            .gngat
            .forward(tape, store, visual.features, &s.graph, ctx)?;
        let memory = Memory {
            history: selected.features,
            history_len: selected.valid_len,
            question: textual.features,
            video: reasoned.features,
        };
        Ok(Encoded {
            question,
            histories,
            scores: scored.scores,
            selection,
            selected,
            textual,
            visual,
            reasoned,
            memory,
        })
    }

    /// Step scores for the decoder input `ids` (starting with `<bos>`).
    pub fn step_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &Memory,
        ids: &[usize],
        ctx: &mut Ctx,
    ) -> Result<(Var, DecoderTrace)> {
        let a_in = self.text.encode(tape, store, ids)?;
        let trace = self.decoder.forward(tape, store, a_in, memory, ctx)?;
        let p = self
            .decoder
            .scores(tape, store, trace.output, memory.question)?;
        Ok((p, trace))
    }

    /// Multi-label BCE over every step of `<bos> + answer -> answer + <eos>`.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &PreparedSample,
        ctx: &mut Ctx,
    ) -> Result<TeacherForced> {
        let encoded = self.encode(tape, store, s, ctx)?;
        let (input, targets) = teacher_forcing(
            &s.answer_ids,
            &s.answer_words,
            &s.question_words,
            self.vocab.len(),
        )?;
        let (logits, trace) = self.step_scores(tape, store, &encoded.memory, &input, ctx)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let p = tape.value(logits);
        let mut correct = 0;
        for step in 0..input.len() {
            let target = s.answer_words.get(step).map_or("<eos>", String::as_str);
            if self.slot_word(argmax(p.row(step)), &s.question_words) == target {
                correct += 1;
            }
        }
        Ok(TeacherForced {
            loss,
            logits,
            encoded,
            trace,
            correct,
            steps: input.len(),
        })
    }

    fn slot_word<'a>(&'a self, slot: usize, question_words: &'a [String]) -> &'a str {
        if slot < self.vocab.len() {
            self.vocab.token(slot)
        } else {
            &question_words[slot - self.vocab.len()]
        }
    }

    /// Decodes one sample with a frozen model.
    pub fn decode(
        &self,
        store: &ParamStore,
        s: &PreparedSample,
        strategy: DecodeStrategy,
    ) -> Result<Decoded> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval();
        let encoded = self.encode(&mut tape, store, s, &mut ctx)?;
        let mark = tape.len();
        let ptr = PointerContext {
            question_ids: &s.question_ids,
            question_words: &s.question_words,
            vocab_len: self.vocab.len(),
        };
        let step = |prefix: &[usize]| -> Result<Vec<f64>> {
            tape.truncate(mark);
            let (p, _) =
                self.step_scores(&mut tape, store, &encoded.memory, prefix, &mut Ctx::eval())?;
            let p = tape.value(p);
            Ok(p.row(p.rows() - 1).to_vec())
        };
        let penalty = self.config.length_penalty;
        match strategy {
            DecodeStrategy::Greedy => greedy_decode(ptr, penalty, step),
            DecodeStrategy::Beam(b) => beam_decode(ptr, b, penalty, step),
        }
    }

    pub fn decode_record(
        &self,
        store: &ParamStore,
        s: &PreparedSample,
        strategy: DecodeStrategy,
    ) -> Result<DecodeRecord> {
        let out = self.decode(store, s, strategy)?;
        Ok(DecodeRecord {
            id: s.id.clone(),
            tokens: out.words(&self.vocab, &s.question_words),
            segments: out.tokens.iter().map(|t| t.segment).collect(),
            score: out.score,
        })
    }
}

/// Fresh model and parameters for `config`, seeded from `config.seed`.
pub fn init_model(config: &Config, vocab: Vocabulary) -> Result<(Scga, ParamStore, Rng)> {
    let mut rng = Rng::new(config.seed);
    let mut store = ParamStore::new();
    let model = Scga::new(config, vocab, &mut store, &mut rng)?;
    Ok((model, store, rng))
}
