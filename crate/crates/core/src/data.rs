//! Synthetic dialogue worlds and the line-record dataset format.
//!
//! A world is a short video of a few entities, each with a color, a noun
//! (its detector label) and an action. Attributes are shared along a chain:
//! two entities agree on at most one attribute, and color plus noun always
//! names exactly one entity. A dialogue introduces one entity by name, then
//! asks about each attribute through the pronoun "it", shared attributes
//! first. A pronoun answer seen earlier fits two entities, so only the
//! introducing turn settles a later question; answering the introduction
//! needs the video.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize, BBox, VideoObjects, Vocabulary};
use crate::rng::Rng;
use crate::{Error, Result};

/// Longest target answer; one more step is left for `<eos>`.
pub const MAX_ANSWER_LEN: usize = crate::decoder::MAX_DECODE_LEN - 1;
pub const MAX_ROUNDS: usize = 10;
/// The introduction plus one pronoun question per attribute.
pub const MIN_ROUNDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub colors: Vec<String>,
    pub nouns: Vec<String>,
    pub actions: Vec<String>,
}

impl Default for Catalog {
    fn default() -> Self {
        let own = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            colors: own(&["red", "blue", "green", "yellow", "white", "black"]),
            nouns: own(&["dog", "cat", "man", "woman", "ball", "car", "bird", "boy"]),
            actions: own(&[
                "running", "jumping", "sitting", "walking", "eating", "sleeping",
            ]),
        }
    }
}

/// Everything that shapes a generated world, except the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub catalog: Catalog,
    pub frames: usize,
    pub objects: usize,
    pub d_v: usize,
    /// Dialogue rounds per world; one sample per round.
    pub rounds: usize,
    /// Largest per-frame move of a box center along either axis.
    pub drift: f64,
    /// Temporal edge threshold the drift has to stay under.
    pub tau_t: f64,
    pub appearance_noise: f64,
    /// Seeds the per-word appearance signatures, shared by every world.
    pub signature_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            catalog: Catalog::default(),
            frames: 6,
            objects: 3,
            d_v: 32,
            rounds: 5,
            drift: 0.05,
            tau_t: crate::stgraph::DEFAULT_TAU_T,
            appearance_noise: 0.1,
            signature_seed: 0x5c6a,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.catalog;
        if self.objects < 3 {
            return Err(Error::config("a world needs at least three entities"));
        }
        let (colors, nouns) = ((self.objects + 1) / 2, self.objects / 2 + 1);
        if colors > c.colors.len() || nouns > c.nouns.len() || c.actions.len() < 2 {
            return Err(Error::config(format!(
                "{} entities need {colors} colors, {nouns} nouns and 2 actions; the catalog has {}, {} and {}",
                self.objects,
                c.colors.len(),
                c.nouns.len(),
                c.actions.len()
            )));
        }
        if self.frames == 0 || self.d_v == 0 {
            return Err(Error::config("world needs frames and appearance features"));
        }
        if !(MIN_ROUNDS..=MAX_ROUNDS).contains(&self.rounds) {
            return Err(Error::config(format!(
                "rounds must be within {MIN_ROUNDS}..={MAX_ROUNDS}"
            )));
        }
        if !(0.0..self.tau_t).contains(&self.drift) {
            return Err(Error::config(format!(
                "drift {} must be below tau_t so entities chain across frames",
                self.drift
            )));
        }
        if !(self.appearance_noise >= 0.0) {
            return Err(Error::config("appearance_noise must be non-negative"));
        }
        Ok(())
    }

    /// Every word the templates can produce, in a fixed order.
    pub fn vocabulary(&self) -> Vocabulary {
        let c = &self.catalog;
        let fixed = tokenize(TEMPLATE_WORDS);
        Vocabulary::new(
            fixed
                .iter()
                .chain(&c.colors)
                .chain(&c.nouns)
                .chain(&c.actions)
                .map(String::as_str),
        )
    }
}

const TEMPLATE_WORDS: &str =
    "a and the what is it doing color there any sound no text music";

/// Ground truth for one entity, as catalog indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub color: usize,
    pub noun: usize,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub video: VideoObjects,
    /// Object slot o of every frame shows `entities[o]`.
    pub entities: Vec<Entity>,
}

/// Unit-variance signature per color, noun and action.
struct Signatures {
    colors: Vec<Vec<f64>>,
    nouns: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
}

impl Signatures {
    fn new(spec: &WorldSpec) -> Self {
        let mut rng = Rng::new(spec.signature_seed);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..spec.d_v).map(|_| rng.normal()).collect())
                .collect()
        };
        let c = &spec.catalog;
        Self {
            colors: draw(c.colors.len()),
            nouns: draw(c.nouns.len()),
            actions: draw(c.actions.len()),
        }
    }
}

/// Chained attributes, smooth box trajectories, stable labels and
/// appearance = signatures + noise.
///
/// Entity `i` takes color slot `i / 2`, noun slot `(i + 1) / 2` and action
/// slot `i % 2`; slots map to random catalog entries.
pub fn generate_world(spec: &WorldSpec, rng: &mut Rng) -> Result<World> {
    spec.validate()?;
    let c = &spec.catalog;
    let mut pick = |n: usize| {
        let mut v: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut v);
        v
    };
    let (colors, nouns, actions) = (
        pick(c.colors.len()),
        pick(c.nouns.len()),
        pick(c.actions.len()),
    );
    let entities: Vec<Entity> = (0..spec.objects)
        .map(|i| Entity {
            color: colors[i / 2],
            noun: nouns[(i + 1) / 2],
            action: actions[i % 2],
        })
        .collect();

    let sig = Signatures::new(spec);
    let mut tracks = Vec::with_capacity(spec.objects);
    for _ in 0..spec.objects {
        let w = rng.uniform_range(0.1, 0.2);
        let h = rng.uniform_range(0.1, 0.2);
        let cx = rng.uniform_range(w / 2.0, 1.0 - w / 2.0);
        let cy = rng.uniform_range(h / 2.0, 1.0 - h / 2.0);
        tracks.push((w, h, cx, cy));
    }
    let n = spec.frames * spec.objects;
    let mut boxes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut appearance = Vec::with_capacity(n * spec.d_v);
    for t in 0..spec.frames {
        for (o, e) in entities.iter().enumerate() {
            let (w, h, cx, cy) = &mut tracks[o];
            if t > 0 {
                *cx = (*cx + rng.uniform_range(-spec.drift, spec.drift))
                    .clamp(*w / 2.0, 1.0 - *w / 2.0);
                *cy = (*cy + rng.uniform_range(-spec.drift, spec.drift))
                    .clamp(*h / 2.0, 1.0 - *h / 2.0);
            }
            boxes.push(BBox {
                x: *cx - *w / 2.0,
                y: *cy - *h / 2.0,
                w: *w,
                h: *h,
            });
            labels.push(e.noun as u32);
            for k in 0..spec.d_v {
                let base = sig.colors[e.color][k] + sig.nouns[e.noun][k] + sig.actions[e.action][k];
                appearance.push(base + spec.appearance_noise * rng.normal());
            }
        }
    }
    let video = VideoObjects::new(
        spec.frames,
        spec.objects,
        spec.d_v,
        appearance,
        boxes,
        labels,
    )?;
    Ok(World { video, entities })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

/// One training or evaluation unit: the video, the caption and earlier
/// turns, and the current question with its target answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub id: String,
    pub video: VideoObjects,
    pub caption: String,
    pub turns: Vec<Turn>,
    /// 1-based round; `turns` holds the `round - 1` earlier turns.
    pub round: usize,
    pub question: String,
    pub answer: String,
    /// History unit (0 = caption) that the question's pronoun refers to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referent: Option<usize>,
}

impl DialogueSample {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ROUNDS).contains(&self.round) || self.turns.len() + 1 != self.round {
            return Err(Error::contract(format!(
                "round {} with {} earlier turns",
                self.round,
                self.turns.len()
            )));
        }
        let answer = tokenize(&self.answer).len();
        if answer == 0 || answer > MAX_ANSWER_LEN {
            return Err(Error::contract(format!(
                "answer has {answer} tokens, expected 1..={MAX_ANSWER_LEN}"
            )));
        }
        if tokenize(&self.question).is_empty() || tokenize(&self.caption).is_empty() {
            return Err(Error::contract("question and caption must be non-empty"));
        }
        if let Some(r) = self.referent {
            if r >= self.round {
                return Err(Error::contract(format!(
                    "referent {r} outside the {} history units",
                    self.round
                )));
            }
        }
        Ok(())
    }

    pub fn has_pronoun(&self) -> bool {
        tokenize(&self.question).iter().any(|t| t == "it")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Intro,
    Pronoun(Attribute),
    Distractor(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Attribute {
    Color,
    Noun,
    Action,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Noun, Attribute::Action];

    fn of(self, e: &Entity) -> usize {
        match self {
            Attribute::Color => e.color,
            Attribute::Noun => e.noun,
            Attribute::Action => e.action,
        }
    }
}

impl World {
    /// Whether another entity has the same value of `attr` as `entities[i]`.
    pub fn is_shared(&self, i: usize, attr: Attribute) -> bool {
        let v = attr.of(&self.entities[i]);
        self.entities
            .iter()
            .enumerate()
            .any(|(j, e)| j != i && attr.of(e) == v)
    }

    /// Every order of pronoun questions about `entities[i]` that asks all
    /// shared attributes before any unique one.
    pub fn question_orders(&self, i: usize) -> Vec<[Attribute; 3]> {
        let mut out = Vec::new();
        for a in Attribute::ALL {
            for b in Attribute::ALL {
                for c in Attribute::ALL {
                    let order = [a, b, c];
                    if a == b || b == c || a == c {
                        continue;
                    }
                    let shared: Vec<bool> = order.iter().map(|&k| self.is_shared(i, k)).collect();
                    if shared.windows(2).all(|w| w[0] || !w[1]) {
                        out.push(order);
                    }
                }
            }
        }
        out
    }
}

const DISTRACTORS: [(&str, &str); 3] = [
    ("is there any sound", "no there is no sound"),
    ("is there any text", "no there is no text"),
    ("is there any music", "no there is no music"),
];

fn article_list(words: &[String]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            s.push_str(if i + 1 == words.len() { " and " } else { " " });
        }
        s.push_str("a ");
        s.push_str(w);
    }
    s
}

/// One sample per round of a dialogue about entity `focus` of `world`,
/// asking its attributes in `order`.
pub fn generate_dialogue(
    spec: &WorldSpec,
    world: &World,
    focus: usize,
    order: [Attribute; 3],
    rng: &mut Rng,
    id: &str,
) -> Vec<DialogueSample> {
    let c = &spec.catalog;
    let names: Vec<String> = world
        .entities
        .iter()
        .map(|e| format!("{} {}", c.colors[e.color], c.nouns[e.noun]))
        .collect();
    let caption = article_list(&names);
    let e = world.entities[focus];
    let (color, noun, action) = (&c.colors[e.color], &c.nouns[e.noun], &c.actions[e.action]);

    let mut kinds = vec![Kind::Intro];
    kinds.extend(order.iter().map(|&a| Kind::Pronoun(a)));
    while kinds.len() < spec.rounds {
        let at = rng.below(kinds.len() + 1);
        kinds.insert(at, Kind::Distractor(rng.below(DISTRACTORS.len())));
    }

    let intro_unit = 1 + kinds.iter().position(|&k| k == Kind::Intro).unwrap();
    let mut turns: Vec<Turn> = Vec::new();
    let mut out = Vec::with_capacity(kinds.len());
    for (r, kind) in kinds.into_iter().enumerate() {
        let (question, answer, referent) = match kind {
            Kind::Intro => (
                format!("what is the {color} {noun} doing"),
                format!("the {color} {noun} is {action}"),
                None,
            ),
            Kind::Pronoun(Attribute::Color) => (
                "what color is it".into(),
                format!("it is {color}"),
                Some(intro_unit),
            ),
            Kind::Pronoun(Attribute::Noun) => (
                "what is it".into(),
                format!("it is a {noun}"),
                Some(intro_unit),
            ),
            Kind::Pronoun(Attribute::Action) => (
                "what is it doing".into(),
                format!("it is {action}"),
                Some(intro_unit),
            ),
            Kind::Distractor(k) => (DISTRACTORS[k].0.into(), DISTRACTORS[k].1.into(), None),
        };
        out.push(DialogueSample {
            id: format!("{id}-r{}", r + 1),
            video: world.video.clone(),
            caption: caption.clone(),
            turns: turns.clone(),
            round: r + 1,
            question: question.clone(),
            answer: answer.clone(),
            referent,
        });
        turns.push(Turn { question, answer });
    }
    out
}

/// `n` samples from consecutive worlds of one seeded stream. Each world
/// hosts one dialogue per entity and admissible question order, shuffled,
/// so neither the video nor an earlier pronoun answer tells which entity
/// the pronouns point at.
pub fn generate_dataset(spec: &WorldSpec, n: usize, seed: u64) -> Result<Vec<DialogueSample>> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    while out.len() < n {
        let world = generate_world(spec, &mut rng)?;
        let mut plan: Vec<(usize, usize, [Attribute; 3])> = (0..world.entities.len())
            .flat_map(|i| {
                world
                    .question_orders(i)
                    .into_iter()
                    .enumerate()
                    .map(move |(j, o)| (i, j, o))
            })
            .collect();
        rng.shuffle(&mut plan);
        for (focus, j, order) in plan {
            out.extend(generate_dialogue(
                spec,
                &world,
                focus,
                order,
                &mut rng,
                &format!("s{seed}-w{k:04}-e{focus}-o{j}"),
            ));
        }
        k += 1;
    }
    out.truncate(n);
    Ok(out)
}

/// Train and eval splits of one spec, drawn from independent streams of
/// `seed`.
pub fn generate_splits(
    spec: &WorldSpec,
    train: usize,
    eval: usize,
    seed: u64,
) -> Result<(Vec<DialogueSample>, Vec<DialogueSample>)> {
    let mut master = Rng::new(seed);
    let train_seed = (master.uniform() * (1u64 << 53) as f64) as u64;
    let eval_seed = (master.uniform() * (1u64 << 53) as f64) as u64;
    Ok((
        generate_dataset(spec, train, train_seed)?,
        generate_dataset(spec, eval, eval_seed)?,
    ))
}

/// Vocabulary over every caption, turn, question and answer, first-seen
/// order.
pub fn build_vocabulary(samples: &[DialogueSample]) -> Vocabulary {
    let mut words = Vec::new();
    for s in samples {
        words.extend(tokenize(&s.caption));
        for t in &s.turns {
            words.extend(tokenize(&t.question));
            words.extend(tokenize(&t.answer));
        }
        words.extend(tokenize(&s.question));
        words.extend(tokenize(&s.answer));
    }
    Vocabulary::new(words)
}

pub fn to_jsonl(samples: &[DialogueSample]) -> String {
    let mut s = String::new();
    for sample in samples {
        s.push_str(&serde_json::to_string(sample).expect("samples serialize"));
        s.push('\n');
    }
    s
}

pub fn write_dataset(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(samples).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Parses line records; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: n + 1,
            message,
        };
        let sample: DialogueSample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        sample.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DialogueSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(f))
}
