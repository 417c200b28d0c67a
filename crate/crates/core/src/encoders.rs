//! Text and video input encoders.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '<' && c != '>'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token table with the four reserved entries at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in first-seen order, skipping
    /// duplicates and reserved names.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
        };
        for t in tokens {
            let t = t.as_ref();
            if !vocab.index.contains_key(t) {
                vocab.index.insert(t.to_string(), vocab.tokens.len());
                vocab.tokens.push(t.to_string());
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        TokenSequence(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved tokens, one per line; line k holds index k + 4.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || RESERVED.contains(&t) || !seen.insert(t.to_string()) {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("invalid or duplicate vocabulary entry {t:?}"),
                });
            }
            tokens.push(t.to_string());
        }
        Ok(Self::new(tokens))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Vocabulary indices of one token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= vocab_len) {
            Some(i) => Err(Error::contract(format!(
                "token index {i} outside vocabulary of {vocab_len}"
            ))),
            None => Ok(()),
        }
    }
}

/// `[x, y, w, h]` in relative image coordinates; `(x, y)` is the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        let fin = [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        fin && self.x >= 0.0
            && self.y >= 0.0
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= 1.0 + 1e-6
            && self.y + self.h <= 1.0 + 1e-6
    }
}

/// T frames of O detected objects, stored frame-major: node `t * O + o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VideoRecord", into = "VideoRecord")]
pub struct VideoObjects {
    frames: usize,
    objects: usize,
    dim: usize,
    appearance: Vec<f64>,
    boxes: Vec<BBox>,
    labels: Vec<u32>,
}

impl VideoObjects {
    pub fn new(
        frames: usize,
        objects: usize,
        dim: usize,
        appearance: Vec<f64>,
        boxes: Vec<BBox>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let n = frames * objects;
        if n == 0 || dim == 0 {
            return Err(Error::contract(
                "video needs at least one frame, object and feature",
            ));
        }
        if appearance.len() != n * dim || boxes.len() != n || labels.len() != n {
            return Err(Error::contract(format!(
                "video arrays do not match T={frames}, O={objects}, d_v={dim}"
            )));
        }
        if let Some(i) = boxes.iter().position(|b| !b.is_valid()) {
            return Err(Error::contract(format!(
                "invalid box at node {i}: {:?}",
                boxes[i]
            )));
        }
        if appearance.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite appearance feature"));
        }
        Ok(Self {
            frames,
            objects,
            dim,
            appearance,
            boxes,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.frames * self.objects
    }

    pub fn node(&self, frame: usize, object: usize) -> usize {
        frame * self.objects + object
    }

    pub fn appearance(&self, node: usize) -> &[f64] {
        &self.appearance[node * self.dim..(node + 1) * self.dim]
    }

    pub fn appearance_data(&self) -> &[f64] {
        &self.appearance
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn frame_boxes(&self, frame: usize) -> &[BBox] {
        &self.boxes[frame * self.objects..(frame + 1) * self.objects]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn frame_labels(&self, frame: usize) -> &[u32] {
        &self.labels[frame * self.objects..(frame + 1) * self.objects]
    }

    pub fn appearance_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_nodes(), self.dim], self.appearance.clone()).unwrap()
    }
}

/// On-disk layout of [`VideoObjects`]: one appearance row and one
/// `[x, y, w, h]` box per node.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub frames: usize,
    pub objects: usize,
    pub dim: usize,
    pub appearance: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u32>,
}

impl From<VideoObjects> for VideoRecord {
    fn from(v: VideoObjects) -> Self {
        Self {
            frames: v.frames,
            objects: v.objects,
            dim: v.dim,
            appearance: v.appearance.chunks(v.dim).map(<[f64]>::to_vec).collect(),
            boxes: v.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
            labels: v.labels,
        }
    }
}

impl TryFrom<VideoRecord> for VideoObjects {
    type Error = Error;

    fn try_from(r: VideoRecord) -> Result<Self> {
        if r.appearance.iter().any(|row| row.len() != r.dim) {
            return Err(Error::contract(format!(
                "appearance rows must have {} entries",
                r.dim
            )));
        }
        let boxes = r
            .boxes
            .iter()
            .map(|&[x, y, w, h]| BBox { x, y, w, h })
            .collect();
        VideoObjects::new(
            r.frames,
            r.objects,
            r.dim,
            r.appearance.concat(),
            boxes,
            r.labels,
        )
    }
}

/// Fixed sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_table(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for c in 0..d {
            let pair = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).unwrap()
}

/// `LN(embedding(x) + PE(x))` with one embedding table for every text stream.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub norm: LayerNorm,
    pe: Tensor,
    d: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_len: usize,
        d: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let data = (0..vocab_len * d)
            .map(|_| rng.uniform_range(-1.0, 1.0))
            .collect();
        let embedding = store.add("text.embedding", Tensor::new(vec![vocab_len, d], data)?)?;
        Ok(Self {
            embedding,
            norm: LayerNorm::new(store, "text.norm", d)?,
            pe: positional_table(max_len, d),
            d,
        })
    }

    pub fn max_len(&self) -> usize {
        self.pe.rows()
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, seq: &[usize]) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::contract("cannot encode an empty token sequence"));
        }
        if seq.len() > self.max_len() {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds {} positions",
                seq.len(),
                self.max_len()
            )));
        }
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, seq)?;
        let pe = Tensor::new(
            vec![seq.len(), self.d],
            self.pe.data()[..seq.len() * self.d].to_vec(),
        )?;
        let x = tape.add_const(emb, &pe)?;
        self.norm.forward(tape, store, x)
    }
}

/// Per-object `LN(W v)`, rows in frame-major node order.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, d_v: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "video.proj", d_v, d, false, rng)?,
            norm: LayerNorm::new(store, "video.norm", d)?,
        })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, video: &VideoObjects) -> Result<Var> {
        let x = tape.constant(video.appearance_tensor());
        let y = self.proj.forward(tape, store, x)?;
        self.norm.forward(tape, store, y)
    }
}

/// History for round r: the caption, then each earlier question followed by
/// its answer, giving r units.
pub fn build_history_units<S: Clone>(caption: &[S], turns: &[(Vec<S>, Vec<S>)]) -> Vec<Vec<S>> {
    let mut units = Vec::with_capacity(turns.len() + 1);
    units.push(caption.to_vec());
    for (q, a) in turns {
        let mut u = q.clone();
        u.extend(a.iter().cloned());
        units.push(u);
    }
    units
}
