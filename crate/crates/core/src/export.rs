//! Debug exports: attention maps and video graphs as JSON records.
//!
//! Both formats hold plain nested arrays so they plot without this crate.
//! Attention matrices are row-major `[query][key]`. Multi-head maps are
//! averaged over heads, except GN-GAT, which keeps one map per head.

use serde::{Deserialize, Serialize};

use crate::coref::mean_attention;
use crate::model::{PreparedSample, Scga};
use crate::nn::Ctx;
use crate::stgraph::SpatioTemporalGraph;
use crate::tensor::{ParamStore, Tape};
use crate::Result;

pub type Matrix = Vec<Vec<f64>>;

/// One GN-GAT head and the hop distance of its neighborhood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMap {
    pub distance: usize,
    pub weights: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderMaps {
    pub block: usize,
    pub self_attn: Matrix,
    pub history: Matrix,
    pub question: Matrix,
    pub video: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub id: String,
    pub question: Vec<String>,
    /// Softmax of the history scores, caption first.
    pub history_probs: Vec<f64>,
    pub selected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub referent: Option<usize>,
    /// Over `[question || selected history]` tokens.
    pub textual: Matrix,
    /// Over `[video objects || question]` nodes.
    pub visual: Matrix,
    pub gngat: Vec<HeadMap>,
    /// Teacher-forced decoder attention, one entry per block.
    pub decoder: Vec<DecoderMaps>,
}

/// Runs a teacher-forced eval pass and records every attention map.
pub fn attention_record(model: &Scga, store: &ParamStore, s: &PreparedSample) -> Result<AttentionRecord> {
    let mut tape = Tape::new();
    let tf = model.teacher_forced(&mut tape, store, s, &mut Ctx::eval())?;
    let enc = &tf.encoded;
    let distances = s.graph.assignment.head_distances();
    let gngat = enc
        .reasoned
        .attention
        .iter()
        .zip(&distances)
        .map(|(&a, &distance)| HeadMap {
            distance,
            weights: mean_attention(&tape, &[a]),
        })
        .collect();
    let decoder = tf
        .trace
        .attention
        .iter()
        .enumerate()
        .map(|(block, b)| DecoderMaps {
            block,
            self_attn: mean_attention(&tape, &b.self_attn),
            history: mean_attention(&tape, &b.history),
            question: mean_attention(&tape, &b.question),
            video: mean_attention(&tape, &b.video),
        })
        .collect();
    Ok(AttentionRecord {
        id: s.id.clone(),
        question: s.question_words.clone(),
        history_probs: enc.selection.probs.clone(),
        selected: enc.selection.index,
        referent: s.referent,
        textual: mean_attention(&tape, &enc.textual.attention),
        visual: mean_attention(&tape, &enc.visual.attention),
        gngat,
        decoder,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyRecord {
    pub n: usize,
    /// `[i, j]` pairs with `A_n[i][j] = 1`.
    pub coordinates: Vec<[usize; 2]>,
}

/// Node `t * objects + o` is object `o` of frame `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub frames: usize,
    pub objects: usize,
    pub labels: Vec<u32>,
    pub edges: Vec<[usize; 2]>,
    pub adjacency: Vec<AdjacencyRecord>,
    pub head_distances: Vec<usize>,
}

pub fn graph_record(id: &str, frames: usize, objects: usize, labels: &[u32], g: &SpatioTemporalGraph) -> GraphRecord {
    GraphRecord {
        id: id.to_string(),
        frames,
        objects,
        labels: labels.to_vec(),
        edges: g.edges.coordinates(),
        adjacency: g
            .adjacency
            .iter()
            .map(|(n, a)| AdjacencyRecord {
                n: *n,
                coordinates: a.coordinates(),
            })
            .collect(),
        head_distances: g.assignment.head_distances(),
    }
}

pub fn sample_graph_record(s: &PreparedSample) -> GraphRecord {
    graph_record(&s.id, s.video.frames(), s.video.objects(), s.video.labels(), &s.graph)
}
