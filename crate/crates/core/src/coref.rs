//! Structured co-reference resolver.
//!
//! A key dialogue history is picked discretely with a straight-through
//! Gumbel-Softmax, then question tokens attend to its tokens over a bipartite
//! graph. The same bipartite attention lets video objects attend to the
//! resolved question.

use crate::nn::{argmax, Ctx, Linear, Mode, LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Square boolean mask: `contains(i, j)` iff node j is in node i's
/// neighborhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    n: usize,
    mask: Vec<bool>,
}

impl Neighborhood {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                mask.push(f(i, j));
            }
        }
        Self { n, mask }
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            mask: vec![true; n * n],
        }
    }

    pub fn from_mask(n: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n * n {
            return Err(Error::contract(format!(
                "mask of {} entries for {n} nodes",
                mask.len()
            )));
        }
        Ok(Self { n, mask })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Two node partitions, `a` first then `b`. Every cross-partition pair among
/// active nodes is linked in both directions and every node has a self-loop.
/// Inactive `b` nodes (padding) keep only their self-loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub n_a: usize,
    pub n_b: usize,
    pub active_b: usize,
}

impl BipartiteGraph {
    pub fn new(n_a: usize, n_b: usize) -> Self {
        Self {
            n_a,
            n_b,
            active_b: n_b,
        }
    }

    pub fn with_active_b(n_a: usize, n_b: usize, active_b: usize) -> Self {
        Self {
            n_a,
            n_b,
            active_b: active_b.min(n_b),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n_a + self.n_b
    }

    pub fn neighborhood(&self) -> Neighborhood {
        let n_a = self.n_a;
        let active_end = n_a + self.active_b;
        Neighborhood::from_fn(self.num_nodes(), |i, j| {
            if i == j {
                return true;
            }
            let (ia, ja) = (i < n_a, j < n_a);
            let live = |k: usize| k < active_end;
            ia != ja && live(i) && live(j)
        })
    }
}

#[derive(Clone, Debug)]
struct GatHead {
    proj: ParamId,
    attn: ParamId,
}

/// Multi-head graph attention. Head k computes
/// `alpha_ij = softmax_{j in N_i} LeakyReLU(a_k . [W_k v_i || W_k v_j])`
/// and emits `LeakyReLU(sum_j alpha_ij W_k v_j)`; head outputs (width d/K)
/// are concatenated.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    d: usize,
    head_dim: usize,
}

pub struct GatOutput {
    pub features: Var,
    /// One `[N, N]` attention matrix per head.
    pub attention: Vec<Var>,
}

impl GatLayer {
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
        let head_dim = d / heads;
        let heads = (0..heads)
            .map(|k| {
                Ok(GatHead {
                    proj: store.uniform(format!("{name}.head{k}.w"), &[d, head_dim], d, rng)?,
                    attn: store.uniform(
                        format!("{name}.head{k}.a"),
                        &[2 * head_dim, 1],
                        2 * head_dim,
                        rng,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads, d, head_dim })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_params(&self, k: usize) -> (ParamId, ParamId) {
        (self.heads[k].proj, self.heads[k].attn)
    }

    /// Runs every head with its own neighborhood (`masks[k]` for head k).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        masks: &[&Neighborhood],
        ctx: &mut Ctx,
    ) -> Result<GatOutput> {
        if masks.len() != self.heads.len() {
            return Err(Error::config(format!(
                "{} neighborhoods for {} heads",
                masks.len(),
                self.heads.len()
            )));
        }
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::Shape {
                op: "gat_layer",
                lhs: shape,
                rhs: vec![self.d],
            });
        }
        let dk = self.head_dim;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for (head, mask) in self.heads.iter().zip(masks) {
            if mask.len() != shape[0] {
                return Err(Error::contract(format!(
                    "neighborhood over {} nodes for {} features",
                    mask.len(),
                    shape[0]
                )));
            }
            let w = tape.param(store, head.proj);
            let a = tape.param(store, head.attn);
            let h = tape.matmul(x, w)?;
            let a_src = tape.slice(a, 0, 0..dk)?;
            let a_dst = tape.slice(a, 0, dk..2 * dk)?;
            let src = tape.matmul(h, a_src)?;
            let dst = tape.matmul(h, a_dst)?;
            let dst = tape.transpose(dst)?;
            let e = tape.add_outer(src, dst)?;
            let e = tape.leaky_relu(e, LEAKY_SLOPE);
            let alpha = tape.masked_softmax(e, mask.mask())?;
            attention.push(alpha);
            let alpha = ctx.dropout(tape, alpha)?;
            let agg = tape.matmul(alpha, h)?;
            outs.push(tape.leaky_relu(agg, LEAKY_SLOPE));
        }
        let features = tape.concat(&outs, 1)?;
        Ok(GatOutput {
            features,
            attention,
        })
    }

    /// All heads share one neighborhood.
    pub fn forward_shared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Neighborhood,
        ctx: &mut Ctx,
    ) -> Result<GatOutput> {
        let masks = vec![mask; self.heads.len()];
        self.forward(tape, store, x, &masks, ctx)
    }
}

/// Scores each history against the question:
/// `e_i = f_e([f_q(mean q) || f_h(mean h_i)])`, `s_i = f_s([e_i || r - i])`.
#[derive(Clone, Debug)]
pub struct HistoryScorer {
    pub f_q: Linear,
    pub f_h: Linear,
    pub f_e: Linear,
    pub f_s: Linear,
}

pub struct HistoryScores {
    /// `[1, r]`.
    pub scores: Var,
    /// `[r, d]`, one matching embedding per history.
    pub embeddings: Var,
}

impl HistoryScorer {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            f_q: Linear::new(store, "coref.f_q", d, d, true, rng)?,
            f_h: Linear::new(store, "coref.f_h", d, d, true, rng)?,
            f_e: Linear::new(store, "coref.f_e", 2 * d, d, true, rng)?,
            f_s: Linear::new(store, "coref.f_s", d + 1, 1, true, rng)?,
        })
    }

    pub fn score(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: Var,
        histories: &[Var],
    ) -> Result<HistoryScores> {
        let r = histories.len();
        if r == 0 {
            return Err(Error::contract("round r >= 1 needs at least the caption"));
        }
        let q_mean = tape.mean(question, 0)?;
        let fq = self.f_q.forward(tape, store, q_mean)?;
        let ones = tape.constant(Tensor::ones(&[r, 1]));
        let fq = tape.matmul(ones, fq)?;
        let means = histories
            .iter()
            .map(|&h| tape.mean(h, 0))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat(&means, 0)?;
        let fh = self.f_h.forward(tape, store, stacked)?;
        let joint = tape.concat(&[fq, fh], 1)?;
        let e = self.f_e.forward(tape, store, joint)?;
        let e = tape.leaky_relu(e, LEAKY_SLOPE);
        let deltas = Tensor::new(vec![r, 1], (0..r).map(|i| (r - i) as f64).collect())?;
        let deltas = tape.constant(deltas);
        let with_delta = tape.concat(&[e, deltas], 1)?;
        let s = self.f_s.forward(tape, store, with_delta)?;
        let scores = tape.transpose(s)?;
        Ok(HistoryScores {
            scores,
            embeddings: e,
        })
    }
}

/// Outcome of the discrete history choice.
pub struct Selection {
    /// `[1, r]`; exactly one-hot in `Train` and `Eval`, soft in `Relaxed`.
    pub weights: Var,
    pub index: usize,
    /// Relaxed probabilities the straight-through gradient flows through.
    pub probs: Vec<f64>,
    /// Set when `weights` is the soft mixture rather than one-hot.
    pub soft: bool,
}

/// Straight-through Gumbel-Softmax over `scores` (`[1, r]`).
///
/// `Train` perturbs with Gumbel noise and takes the hard argmax forward;
/// `Eval` takes the noiseless argmax (lowest index on ties).
pub fn gumbel_select(tape: &mut Tape, scores: Var, ctx: &mut Ctx) -> Result<Selection> {
    let s = tape.value(scores).clone();
    if !s.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite history scores {:?}",
            s.data()
        )));
    }
    let r = s.len();
    let perturbed = match ctx.mode {
        Mode::Train => {
            let rng = ctx
                .rng
                .as_deref_mut()
                .ok_or_else(|| Error::contract("training selection needs an rng"))?;
            let noise = Tensor::new(s.shape().to_vec(), (0..r).map(|_| rng.gumbel()).collect())?;
            tape.add_const(scores, &noise)?
        }
        Mode::Eval | Mode::Relaxed => scores,
    };
    let index = argmax(tape.value(perturbed).data());
    let scaled = tape.scale(perturbed, 1.0 / ctx.temperature);
    let soft = tape.softmax(scaled, 1)?;
    let probs = tape.value(soft).data().to_vec();
    let weights = if ctx.mode == Mode::Relaxed {
        soft
    } else {
        let mut hard = vec![0.0; r];
        hard[index] = 1.0;
        tape.straight_through(soft, &Tensor::new(s.shape().to_vec(), hard)?)?
    };
    Ok(Selection {
        weights,
        index,
        probs,
        soft: ctx.mode == Mode::Relaxed,
    })
}

/// `h_{r_d} = sum_i g_i h_i` with every history zero-padded to the longest.
pub struct SelectedHistory {
    /// `[L, d]` where L is the longest history length.
    pub features: Var,
    /// Length of the chosen history; rows past it are padding.
    pub valid_len: usize,
    pub index: usize,
}

pub fn combine_histories(
    tape: &mut Tape,
    selection: &Selection,
    histories: &[Var],
) -> Result<SelectedHistory> {
    let d = tape.shape(histories[0])[1];
    let max_len = histories.iter().map(|&h| tape.shape(h)[0]).max().unwrap();
    let mut flat = Vec::with_capacity(histories.len());
    for &h in histories {
        let n = tape.shape(h)[0];
        let padded = if n < max_len {
            let pad = tape.constant(Tensor::zeros(&[max_len - n, d]));
            tape.concat(&[h, pad], 0)?
        } else {
            h
        };
        flat.push(tape.reshape(padded, &[1, max_len * d])?);
    }
    let stacked = tape.concat(&flat, 0)?;
    let mixed = tape.matmul(selection.weights, stacked)?;
    let features = tape.reshape(mixed, &[max_len, d])?;
    // A soft mixture has content in every row of the longest history.
    let valid_len = if selection.soft {
        max_len
    } else {
        tape.shape(histories[selection.index])[0]
    };
    Ok(SelectedHistory {
        features,
        valid_len,
        index: selection.index,
    })
}

/// Output of one resolver pass.
pub struct Resolved {
    pub features: Var,
    pub attention: Vec<Var>,
    pub graph: BipartiteGraph,
}

/// Concatenate both partitions, run one GAT pass with a residual, keep the
/// first partition's rows.
fn resolve(
    gat: &GatLayer,
    tape: &mut Tape,
    store: &ParamStore,
    keep: Var,
    other: Var,
    graph: BipartiteGraph,
    ctx: &mut Ctx,
) -> Result<Resolved> {
    let nodes = tape.concat(&[keep, other], 0)?;
    let out = gat.forward_shared(tape, store, nodes, &graph.neighborhood(), ctx)?;
    let updated = tape.add(out.features, nodes)?;
    let features = tape.slice(updated, 0, 0..graph.n_a)?;
    Ok(Resolved {
        features,
        attention: out.attention,
        graph,
    })
}

/// History scorer plus the textual and visual bipartite attention layers.
#[derive(Clone, Debug)]
pub struct CorefResolver {
    pub scorer: HistoryScorer,
    pub textual: GatLayer,
    pub visual: GatLayer,
}

impl CorefResolver {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            scorer: HistoryScorer::new(store, d, rng)?,
            textual: GatLayer::new(store, "coref.textual", d, heads, rng)?,
            visual: GatLayer::new(store, "coref.visual", d, heads, rng)?,
        })
    }

    /// `q* = (GAT([q || h_rd]) + [q || h_rd])[:N_q]`.
    pub fn resolve_textual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        question: Var,
        history: &SelectedHistory,
        ctx: &mut Ctx,
    ) -> Result<Resolved> {
        let n_q = tape.shape(question)[0];
        let n_h = tape.shape(history.features)[0];
        let graph = BipartiteGraph::with_active_b(n_q, n_h, history.valid_len);
        resolve(
            &self.textual,
            tape,
            store,
            question,
            history.features,
            graph,
            ctx,
        )
    }

    /// `v* = (GAT([v || q*]) + [v || q*])[:N_v]`.
    pub fn resolve_visual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        video: Var,
        question: Var,
        ctx: &mut Ctx,
    ) -> Result<Resolved> {
        let graph = BipartiteGraph::new(tape.shape(video)[0], tape.shape(question)[0]);
        resolve(&self.visual, tape, store, video, question, graph, ctx)
    }
}

/// Head-averaged attention matrix as rows.
pub fn mean_attention(tape: &Tape, heads: &[Var]) -> Vec<Vec<f64>> {
    let first = tape.value(heads[0]);
    let (n, m) = (first.rows(), first.cols());
    let mut out = vec![vec![0.0; m]; n];
    for &h in heads {
        let t = tape.value(h);
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += t.get(i, j) / heads.len() as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn bipartite_neighborhood_structure() {
        let g = BipartiteGraph::with_active_b(2, 3, 2);
        let nb = g.neighborhood();
        assert!(nb.contains(0, 0) && nb.contains(0, 2) && nb.contains(0, 3));
        assert!(!nb.contains(0, 1), "same partition");
        assert!(!nb.contains(0, 4), "padding is not a neighbor");
        assert!(nb.contains(4, 4) && !nb.contains(4, 0));
        assert!(nb.contains(2, 1) && !nb.contains(2, 3));
    }

    #[test]
    fn singleton_graph_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let gat = GatLayer::new(&mut store, "g", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[1, 4]));
        let out = gat
            .forward_shared(
                &mut tape,
                &store,
                x,
                &Neighborhood::full(1),
                &mut Ctx::eval(),
            )
            .unwrap();
        for &a in &out.attention {
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
        // output = LeakyReLU(W_k x) per head
        for k in 0..2 {
            let w = &store.get(gat.head_params(k).0).value;
            for c in 0..2 {
                let z: f64 = (0..4).map(|i| tape.value(x).data()[i] * w.get(i, c)).sum();
                let want = if z >= 0.0 { z } else { 0.2 * z };
                assert!((tape.value(out.features).get(0, k * 2 + c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hand_evaluated_three_node_graph() {
        // one head, d = 2, W = I, a = [1, 0, 0, 1]
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let gat = GatLayer::new(&mut store, "g", 2, 1, &mut rng).unwrap();
        let (w, a) = gat.head_params(0);
        store.get_mut(w).value = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.get_mut(a).value = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let nb = Neighborhood::from_fn(3, |i, j| i == j || i == 0 || j == 0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = gat
            .forward_shared(&mut tape, &store, xv, &nb, &mut Ctx::eval())
            .unwrap();

        let lrelu = |v: f64| if v >= 0.0 { v } else { 0.2 * v };
        let rows = [[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0]];
        for i in 0..3 {
            let nbrs: Vec<usize> = (0..3).filter(|&j| nb.contains(i, j)).collect();
            let logits: Vec<f64> = nbrs
                .iter()
                .map(|&j| lrelu(rows[i][0] + rows[j][1]))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut agg = [0.0; 2];
            for (k, &j) in nbrs.iter().enumerate() {
                let alpha = logits[k].exp() / z;
                assert!((tape.value(out.attention[0]).get(i, j) - alpha).abs() < 1e-14);
                agg[0] += alpha * rows[j][0];
                agg[1] += alpha * rows[j][1];
            }
            for c in 0..2 {
                assert!((tape.value(out.features).get(i, c) - lrelu(agg[c])).abs() < 1e-14);
            }
        }
        assert_eq!(tape.value(out.attention[0]).get(1, 2), 0.0);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(matches!(
            GatLayer::new(&mut store, "g", 6, 4, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gat_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let gat = GatLayer::new(&mut store, "g", 4, 2, &mut rng).unwrap();
        let nb = BipartiteGraph::new(2, 3).neighborhood();
        let x = random(&mut rng, &[5, 4]);
        let w = random(&mut rng, &[5, 4]);
        let report = gradcheck::check_params(&mut store, None, &mut rng, |tape, store| {
            let xv = tape.constant(x.clone());
            let out = gat.forward_shared(tape, store, xv, &nb, &mut Ctx::eval())?;
            let weighted = tape.mul_const(out.features, &w)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn scorer_setup(d: usize) -> (ParamStore, HistoryScorer, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let s = HistoryScorer::new(&mut store, d, &mut rng).unwrap();
        (store, s, rng)
    }

    #[test]
    fn score_vector_has_r_entries() {
        let (store, scorer, mut rng) = scorer_setup(4);
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, &[3, 4]));
        let hs: Vec<Var> = [2, 5, 1]
            .iter()
            .map(|&n| tape.constant(random(&mut rng, &[n, 4])))
            .collect();
        let out = scorer.score(&mut tape, &store, q, &hs).unwrap();
        assert_eq!(tape.shape(out.scores), &[1, 3]);

        let single = scorer.score(&mut tape, &store, q, &hs[..1]).unwrap();
        let sel = gumbel_select(&mut tape, single.scores, &mut Ctx::eval()).unwrap();
        assert_eq!(sel.index, 0);
        assert_eq!(tape.value(sel.weights).data(), &[1.0]);
    }

    #[test]
    fn duplicate_history_differs_only_through_distance() {
        let (store, scorer, mut rng) = scorer_setup(4);
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, &[3, 4]));
        let h = random(&mut rng, &[4, 4]);
        let hs = [tape.constant(h.clone()), tape.constant(h)];
        let out = scorer.score(&mut tape, &store, q, &hs).unwrap();
        let e = tape.value(out.embeddings);
        assert_eq!(e.row(0), e.row(1));
        let s = tape.value(out.scores).data();
        let w_delta = store.get(scorer.f_s.weight).value.data()[4];
        // Delta 2 vs 1: scores differ by exactly the distance weight
        assert!((s[0] - s[1] - w_delta).abs() < 1e-12);
        assert_ne!(s[0], s[1]);
    }

    #[test]
    fn eval_selection_is_argmax_one_hot() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap());
        let sel = gumbel_select(&mut tape, s, &mut Ctx::eval()).unwrap();
        assert_eq!(sel.index, 1);
        assert_eq!(tape.value(sel.weights).data(), &[0.0, 1.0, 0.0]);
        let tie = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap());
        assert_eq!(
            gumbel_select(&mut tape, tie, &mut Ctx::eval())
                .unwrap()
                .index,
            0
        );
        let bad = tape.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            gumbel_select(&mut tape, bad, &mut Ctx::eval()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn soft_path_gradient_reaches_unselected_arms() {
        // loss = sum(w * g) with the train-mode straight-through estimator
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let mut tape = Tape::new();
        let s = tape.input(Tensor::new(vec![1, 3], vec![0.5, 0.1, -0.3]).unwrap());
        let mut ctx = Ctx::train(&mut rng, 0.0, 1.0);
        let sel = gumbel_select(&mut tape, s, &mut ctx).unwrap();
        let w = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let p = tape.mul(sel.weights, w).unwrap();
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        let g = tape.grad(s).unwrap().to_vec();
        for i in 0..3 {
            if i != sel.index {
                assert!(g[i].abs() > 1e-6, "{g:?}");
            }
        }
        // the straight-through gradient equals the relaxed-path gradient,
        // which finite differences confirm
        let report = gradcheck::check_inputs(
            &[Tensor::new(vec![1, 3], vec![0.5, 0.1, -0.3]).unwrap()],
            |tape, v| {
                let sel = gumbel_select(tape, v[0], &mut Ctx::relaxed())?;
                let w = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
                let p = tape.mul(sel.weights, w)?;
                Ok(tape.sum(p))
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn combine_picks_one_padded_history() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::new();
        let h0 = random(&mut rng, &[2, 3]);
        let h1 = random(&mut rng, &[4, 3]);
        let hs = [tape.constant(h0.clone()), tape.constant(h1)];
        let s = tape.constant(Tensor::new(vec![1, 2], vec![5.0, 0.0]).unwrap());
        let sel = gumbel_select(&mut tape, s, &mut Ctx::eval()).unwrap();
        let picked = combine_histories(&mut tape, &sel, &hs).unwrap();
        assert_eq!(picked.valid_len, 2);
        let f = tape.value(picked.features);
        assert_eq!(f.shape(), &[4, 3]);
        assert_eq!(&f.data()[..6], h0.data());
        assert!(f.data()[6..].iter().all(|&v| v == 0.0));
    }

    fn resolver(d: usize, k: usize) -> (ParamStore, CorefResolver, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(12);
        let r = CorefResolver::new(&mut store, d, k, &mut rng).unwrap();
        (store, r, rng)
    }

    fn zero_gat(store: &mut ParamStore, gat: &GatLayer) {
        for k in 0..gat.num_heads() {
            let (w, a) = gat.head_params(k);
            store
                .get_mut(w)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
            store
                .get_mut(a)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn textual_resolution_shape_and_residual_identity() {
        let (mut store, res, mut rng) = resolver(8, 2);
        let qv = random(&mut rng, &[3, 8]);
        let hv = random(&mut rng, &[5, 8]);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let q = tape.constant(qv.clone());
            let h = tape.constant(hv.clone());
            let s = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
            let sel = gumbel_select(&mut tape, s, &mut Ctx::eval()).unwrap();
            let picked = combine_histories(&mut tape, &sel, &[h]).unwrap();
            let out = res
                .resolve_textual(&mut tape, store, q, &picked, &mut Ctx::eval())
                .unwrap();
            (tape, out)
        };
        let (tape, out) = run(&store);
        assert_eq!(tape.shape(out.features), &[3, 8]);

        zero_gat(&mut store, &res.textual);
        let (tape, out) = run(&store);
        assert_eq!(tape.value(out.features), &qv);
        // a = 0: uniform attention over each neighborhood
        let alpha = tape.value(out.attention[0]);
        let nb = out.graph.neighborhood();
        for i in 0..8 {
            let size = (0..8).filter(|&j| nb.contains(i, j)).count() as f64;
            for j in 0..8 {
                let want = if nb.contains(i, j) { 1.0 / size } else { 0.0 };
                assert!((alpha.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn visual_resolution_shape_and_residual() {
        let (mut store, res, mut rng) = resolver(8, 2);
        let vv = random(&mut rng, &[6, 8]);
        let qv = random(&mut rng, &[3, 8]);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let v = tape.constant(vv.clone());
            let q = tape.constant(qv.clone());
            let out = res
                .resolve_visual(&mut tape, store, v, q, &mut Ctx::eval())
                .unwrap();
            tape.value(out.features).clone()
        };
        assert_eq!(run(&store).shape(), &[6, 8]);

        zero_gat(&mut store, &res.visual);
        assert_eq!(run(&store), vv);
    }

    #[test]
    fn unselected_history_does_not_reach_resolved_question() {
        let (store, res, mut rng) = resolver(4, 2);
        let q = random(&mut rng, &[2, 4]);
        let chosen = random(&mut rng, &[2, 4]);
        let run = |other: &Tensor| {
            let mut tape = Tape::new();
            let qv = tape.constant(q.clone());
            let hs = [tape.constant(chosen.clone()), tape.constant(other.clone())];
            let s = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
            let sel = gumbel_select(&mut tape, s, &mut Ctx::eval()).unwrap();
            let picked = combine_histories(&mut tape, &sel, &hs).unwrap();
            assert_eq!(picked.valid_len, 2);
            let out = res
                .resolve_textual(&mut tape, &store, qv, &picked, &mut Ctx::eval())
                .unwrap();
            tape.value(out.features).clone()
        };
        let base = run(&random(&mut rng, &[5, 4]));
        assert_eq!(base.shape(), &[2, 4]);
        assert_eq!(run(&random(&mut rng, &[5, 4])), base);
    }
}
