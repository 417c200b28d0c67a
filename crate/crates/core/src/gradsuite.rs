//! Finite-difference checks for every differentiable tape operation, every
//! parameterized module and the full training loss.
//!
//! Each check reduces its output to a scalar with a fixed non-uniform
//! readout, so sums that are constant in the input (softmax rows, for one)
//! still carry a gradient.

use crate::config::Config;
use crate::coref::{GatLayer, HistoryScorer, Neighborhood};
use crate::data::{generate_dataset, WorldSpec};
use crate::decoder::{causal_mask, Decoder, DecoderConfig, Memory, MultiHeadAttention};
use crate::model::init_model;
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::rng::Rng;
use crate::stgraph::{random_video, GnGat, HeadAssignment, SpatioTemporalGraph};
use crate::tensor::gradcheck::{check_inputs, check_params, GradCheck};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Coordinates perturbed per parameter in module and end-to-end checks.
const ENTRIES_PER_PARAM: usize = 6;

/// Worst error of one named check across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub seeds: usize,
    pub entries: usize,
    /// Coordinates whose perturbation straddled a ReLU kink.
    pub kinked: usize,
    pub max_rel_error: f64,
}

fn readout(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let c = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let y = tape.mul_const(x, &Tensor::new(shape, c)?)?;
    Ok(tape.sum(y))
}

/// Entries in `[-1, -0.1] ∪ [0.1, 1]`, away from the kinks of (leaky) ReLU.
fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn random_mask(rng: &mut Rng, n: usize) -> Vec<bool> {
    (0..n * n)
        .map(|k| k / n == k % n || rng.uniform() < 0.5)
        .collect()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = |shape: &[usize]| random(rng, shape);
    let a34 = r(&[3, 4]);
    let b34 = r(&[3, 4]);
    let b45 = r(&[4, 5]);
    let row = r(&[1, 4]);
    let col = r(&[3, 1]);
    let sq = r(&[4, 4]);
    let gain = r(&[1, 4]);
    let bias = r(&[1, 4]);
    let konst = r(&[3, 4]);
    let table = r(&[5, 3]);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![a34.clone(), b45], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![a34.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![a34.clone(), b34.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![a34.clone(), b34.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a34.clone(), row], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("add_outer", vec![col, r(&[1, 5])], Box::new(|t, v| t.add_outer(v[0], v[1]))),
        ("scale", vec![a34.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "mul_const",
            vec![a34.clone()],
            Box::new(move |t, v| t.mul_const(v[0], &konst)),
        ),
        ("leaky_relu", vec![a34.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("relu", vec![a34.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("softmax_rows", vec![a34.clone()], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_cols", vec![a34.clone()], Box::new(|t, v| t.softmax(v[0], 0))),
        (
            "layer_norm",
            vec![a34.clone(), gain, bias],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "concat_rows",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat_cols",
            vec![a34.clone(), b34],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("slice_rows", vec![a34.clone()], Box::new(|t, v| t.slice(v[0], 0, 1..3))),
        ("slice_cols", vec![a34.clone()], Box::new(|t, v| t.slice(v[0], 1, 1..4))),
        ("mean_rows", vec![a34.clone()], Box::new(|t, v| t.mean(v[0], 0))),
        ("mean_cols", vec![a34.clone()], Box::new(|t, v| t.mean(v[0], 1))),
        ("sum", vec![a34.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        (
            "gather_rows",
            vec![table],
            Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        ),
        ("reshape", vec![a34.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
    ];
    let mask = random_mask(rng, 4);
    cases.push((
        "masked_softmax",
        vec![sq],
        Box::new(move |t, v| t.masked_softmax(v[0], &mask)),
    ));
    let shift = random(rng, &[3, 4]);
    cases.push((
        "add_const",
        vec![a34.clone()],
        Box::new(move |t, v| t.add_const(v[0], &shift)),
    ));
    let targets = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| f64::from(u8::from(rng.uniform() < 0.5))).collect(),
    )
    .expect("positive extents");
    let logits = Tensor::new(vec![3, 4], a34.data().iter().map(|x| 3.0 * x).collect())
        .expect("positive extents");
    cases.push((
        "bce_with_logits",
        vec![logits],
        Box::new(move |t, v| t.bce_with_logits(v[0], &targets)),
    ));
    cases
}

/// One check per tape operation.
pub fn op_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = Rng::new(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_inputs(&inputs, |t, v| {
                let y = f(t, v)?;
                readout(t, y)
            })?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Parameter gradients of each module on random inputs.
pub fn module_checks(seed: u64) -> Result<Vec<(String, GradCheck)>> {
    let mut rng = Rng::new(seed);
    let d = 8;
    let mut out = Vec::new();
    let mut check = |name: &str,
                     store: &mut ParamStore,
                     rng: &mut Rng,
                     loss: &mut dyn FnMut(&mut Tape, &ParamStore) -> Result<Var>|
     -> Result<()> {
        let report = check_params(store, Some(ENTRIES_PER_PARAM), rng, |t, s| loss(t, s))?;
        out.push((name.to_string(), report));
        Ok(())
    };

    let x = random(&mut rng, &[5, d]);
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", d, 3, true, &mut rng)?;
        check("linear", &mut store, &mut rng, &mut |t, s| {
            let xi = t.constant(x.clone());
            let y = lin.forward(t, s, xi)?;
            readout(t, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let norm = LayerNorm::new(&mut store, "norm", d)?;
        for p in store.ids().collect::<Vec<_>>() {
            let shape = store.get(p).value.shape().to_vec();
            store.get_mut(p).value = random(&mut rng, &shape);
        }
        check("layer_norm_module", &mut store, &mut rng, &mut |t, s| {
            let xi = t.constant(x.clone());
            let y = norm.forward(t, s, xi)?;
            readout(t, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let gat = GatLayer::new(&mut store, "gat", d, 2, &mut rng)?;
        let masks = [
            Neighborhood::from_mask(5, random_mask(&mut rng, 5))?,
            Neighborhood::from_mask(5, random_mask(&mut rng, 5))?,
        ];
        check("gat", &mut store, &mut rng, &mut |t, s| {
            let xi = t.constant(x.clone());
            let y = gat.forward(t, s, xi, &[&masks[0], &masks[1]], &mut Ctx::eval())?;
            readout(t, y.features)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let scorer = HistoryScorer::new(&mut store, d, &mut rng)?;
        let q = random(&mut rng, &[4, d]);
        let hs: Vec<Tensor> = (2..5).map(|n| random(&mut rng, &[n, d])).collect();
        check("history_scorer", &mut store, &mut rng, &mut |t, s| {
            let qi = t.constant(q.clone());
            let hi: Vec<Var> = hs.iter().map(|h| t.constant(h.clone())).collect();
            let scored = scorer.score(t, s, qi, &hi)?;
            let p = t.softmax(scored.scores, 1)?;
            readout(t, p)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", d, 2, &mut rng)?;
        let mask = causal_mask(5);
        check("multi_head_attention", &mut store, &mut rng, &mut |t, s| {
            let xi = t.constant(x.clone());
            let (y, _) = mha.forward(t, s, xi, xi, Some(&mask), &mut Ctx::eval())?;
            readout(t, y)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            d,
            heads: 2,
            layers: 2,
            ffn: true,
            vocab_len: 7,
        };
        let dec = Decoder::new(&mut store, &cfg, &mut rng)?;
        let hist = random(&mut rng, &[6, d]);
        let q = random(&mut rng, &[4, d]);
        let v = random(&mut rng, &[6, d]);
        check("decoder", &mut store, &mut rng, &mut |t, s| {
            let memory = Memory {
                history: t.constant(hist.clone()),
                history_len: 4,
                question: t.constant(q.clone()),
                video: t.constant(v.clone()),
            };
            let a_in = t.constant(x.clone());
            let trace = dec.forward(t, s, a_in, &memory, &mut Ctx::eval())?;
            let p = dec.scores(t, s, trace.output, memory.question)?;
            readout(t, p)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let assignment = HeadAssignment::new(&[1, 2], &[1, 1])?;
        let gngat = GnGat::new(&mut store, d, &assignment, true, &mut rng)?;
        let video = random_video(&mut rng, 3, 2)?;
        let graph = SpatioTemporalGraph::build(&video, 0.5, 0.5, assignment)?;
        let feats = random(&mut rng, &[graph.num_nodes(), d]);
        check("gngat", &mut store, &mut rng, &mut |t, s| {
            let vi = t.constant(feats.clone());
            let y = gngat.forward(t, s, vi, &graph, &mut Ctx::eval())?;
            readout(t, y.features)
        })?;
    }
    Ok(out)
}

/// Gradient of the mean teacher-forced loss over a few samples with the
/// relaxed history selection.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let config = Config {
        d: 16,
        seed,
        ..Config::default()
    };
    let spec = WorldSpec::default();
    let samples = generate_dataset(&spec, 12, seed)?;
    let (model, mut store, mut rng) = init_model(&config, spec.vocabulary())?;
    let prepared = model.prepare_all(&samples)?;
    let picked: Vec<_> = prepared
        .iter()
        .filter(|s| s.history_ids.len() >= 3)
        .take(2)
        .collect();
    check_params(&mut store, Some(ENTRIES_PER_PARAM), &mut rng, |t, s| {
        let mut total: Option<Var> = None;
        for sample in &picked {
            let tf = model.teacher_forced(t, s, sample, &mut Ctx::relaxed())?;
            total = Some(match total {
                Some(acc) => t.add(acc, tf.loss)?,
                None => tf.loss,
            });
        }
        Ok(t.scale(total.expect("at least one sample"), 1.0 / picked.len() as f64))
    })
}

/// Every check over every seed; one row per check with the worst error.
pub fn run(seeds: &[u64]) -> Result<Vec<CheckRow>> {
    let mut rows: Vec<CheckRow> = Vec::new();
    let mut merge = |name: String, r: GradCheck| match rows.iter_mut().find(|x| x.name == name) {
        Some(row) => {
            row.seeds += 1;
            row.entries += r.entries;
            row.kinked += r.kinked;
            row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
        }
        None => rows.push(CheckRow {
            name,
            seeds: 1,
            entries: r.entries,
            kinked: r.kinked,
            max_rel_error: r.max_rel_error,
        }),
    };
    for &seed in seeds {
        for (name, r) in op_checks(seed)? {
            merge(name, r);
        }
        for (name, r) in module_checks(seed)? {
            merge(name, r);
        }
        merge("end_to_end".into(), end_to_end_check(seed)?);
    }
    Ok(rows)
}
