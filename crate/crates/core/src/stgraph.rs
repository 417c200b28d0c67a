//! Spatio-temporal video graph and gradually neighboring graph attention
//! (GN-GAT).
//!
//! Nodes are the T x O detected objects in frame-major order. Spatial edges
//! link objects of one frame whose box centers are within `tau_s`; temporal
//! edges link same-label objects of adjacent frames within `tau_t`. Head k
//! of GN-GAT attends over the n-hop reachability matrix of its assigned
//! distance n.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::coref::{GatLayer, Neighborhood};
use crate::encoders::{BBox, VideoObjects};
use crate::nn::Ctx;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_TAU_S: f64 = 0.4;
pub const DEFAULT_TAU_T: f64 = 0.2;

/// Dense row-major boolean matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.bits[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Boolean product: `(A B)[i, j] = OR_k A[i, k] AND B[k, j]`.
    pub fn bool_mul(&self, other: &BoolMatrix) -> Result<BoolMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "bool_mul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let mut out = BoolMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if !self.get(i, k) {
                    continue;
                }
                for j in 0..other.cols {
                    if other.get(k, j) {
                        out.bits[i * other.cols + j] = true;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_unit_diagonal(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| self.get(i, i))
    }

    /// Entry-wise `self <= other`.
    pub fn is_subset_of(&self, other: &BoolMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nonzero coordinates in row-major order.
    pub fn coordinates(&self) -> Vec<[usize; 2]> {
        (0..self.rows)
            .flat_map(|i| {
                (0..self.cols)
                    .filter(move |&j| self.get(i, j))
                    .map(move |j| [i, j])
            })
            .collect()
    }

    pub fn to_neighborhood(&self) -> Neighborhood {
        debug_assert_eq!(self.rows, self.cols);
        Neighborhood::from_mask(self.rows, self.bits.clone()).unwrap()
    }
}

fn center_delta(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).abs().max((ay - by).abs())
}

/// `E_t[i, j] = 1` iff `max(|dcx|, |dcy|) < tau_s`; the diagonal is always set.
pub fn spatial_edges(boxes: &[BBox], tau_s: f64) -> BoolMatrix {
    let n = boxes.len();
    BoolMatrix::from_fn(n, n, |i, j| {
        i == j || center_delta(&boxes[i], &boxes[j]) < tau_s
    })
}

/// `E_t^{t+1}[i, j] = 1` iff object i of frame t and object j of frame t+1
/// share a label and `max(|dcx|, |dcy|) < tau_t`.
pub fn temporal_edges(
    boxes_t: &[BBox],
    boxes_next: &[BBox],
    labels_t: &[u32],
    labels_next: &[u32],
    tau_t: f64,
) -> BoolMatrix {
    BoolMatrix::from_fn(boxes_t.len(), boxes_next.len(), |i, j| {
        labels_t[i] == labels_next[j] && center_delta(&boxes_t[i], &boxes_next[j]) < tau_t
    })
}

/// Block-tridiagonal `E_st`: `E_t` on the diagonal, `E_t^{t+1}` above it and
/// its transpose below.
pub fn assemble_edges(spatial: &[BoolMatrix], temporal: &[BoolMatrix]) -> Result<BoolMatrix> {
    let frames = spatial.len();
    if frames == 0 {
        return Err(Error::contract("E_st needs at least one frame"));
    }
    if temporal.len() + 1 != frames {
        return Err(Error::contract(format!(
            "{} temporal blocks for {frames} frames",
            temporal.len()
        )));
    }
    let o = spatial[0].rows();
    if spatial.iter().any(|e| e.rows() != o || e.cols() != o)
        || temporal.iter().any(|e| e.rows() != o || e.cols() != o)
    {
        return Err(Error::contract("all blocks must be O x O"));
    }
    let n = frames * o;
    let mut e = BoolMatrix::zeros(n, n);
    for t in 0..frames {
        for i in 0..o {
            for j in 0..o {
                e.set(t * o + i, t * o + j, spatial[t].get(i, j));
                if t + 1 < frames && temporal[t].get(i, j) {
                    e.set(t * o + i, (t + 1) * o + j, true);
                    e.set((t + 1) * o + j, t * o + i, true);
                }
            }
        }
    }
    Ok(e)
}

/// `A_n = Bool(E^n)` for each requested n. With a unit diagonal this is
/// reachability within at most n hops.
pub fn adjacency_powers(e: &BoolMatrix, distances: &[usize]) -> Result<Vec<BoolMatrix>> {
    if !e.has_unit_diagonal() {
        return Err(Error::contract("E_st must be square with a unit diagonal"));
    }
    if distances.iter().any(|&n| n == 0) {
        return Err(Error::config("distances must be >= 1"));
    }
    let max = distances.iter().copied().max().unwrap_or(0);
    let mut powers = Vec::with_capacity(max);
    let mut current = e.clone();
    powers.push(current.clone());
    for _ in 1..max {
        current = current.bool_mul(e)?;
        powers.push(current.clone());
    }
    Ok(distances.iter().map(|&n| powers[n - 1].clone()).collect())
}

/// Reachability within `n` hops by breadth-first search.
pub fn bfs_reachability(e: &BoolMatrix, n: usize) -> BoolMatrix {
    let size = e.rows();
    let mut out = BoolMatrix::zeros(size, size);
    for src in 0..size {
        let mut dist = vec![usize::MAX; size];
        dist[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            out.set(src, u, true);
            if dist[u] == n {
                continue;
            }
            for v in 0..size {
                if e.get(u, v) && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

/// How many GN-GAT heads look at each hop distance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAssignment {
    per_distance: BTreeMap<usize, usize>,
}

impl HeadAssignment {
    pub fn new(distances: &[usize], heads: &[usize]) -> Result<Self> {
        if distances.len() != heads.len() || distances.is_empty() {
            return Err(Error::config(format!(
                "{} distances but {} head counts",
                distances.len(),
                heads.len()
            )));
        }
        let mut per_distance = BTreeMap::new();
        for (&n, &h) in distances.iter().zip(heads) {
            if n == 0 || h == 0 {
                return Err(Error::config("distances and head counts must be >= 1"));
            }
            if per_distance.insert(n, h).is_some() {
                return Err(Error::config(format!("distance {n} listed twice")));
            }
        }
        Ok(Self { per_distance })
    }

    /// Heads 1, 1, 2, 4 for distances 1..=4.
    pub fn reference() -> Self {
        Self::new(&[1, 2, 3, 4], &[1, 1, 2, 4]).unwrap()
    }

    /// One head per distance, the rest to the largest distance.
    pub fn for_range(distances: &[usize], total_heads: usize) -> Result<Self> {
        if distances.is_empty() || distances.len() > total_heads {
            return Err(Error::config(format!(
                "cannot spread {total_heads} heads over {} distances",
                distances.len()
            )));
        }
        let mut sorted = distances.to_vec();
        sorted.sort_unstable();
        let mut heads = vec![1; sorted.len()];
        *heads.last_mut().unwrap() += total_heads - sorted.len();
        Self::new(&sorted, &heads)
    }

    pub fn total_heads(&self) -> usize {
        self.per_distance.values().sum()
    }

    pub fn distances(&self) -> Vec<usize> {
        self.per_distance.keys().copied().collect()
    }

    pub fn heads_for(&self, distance: usize) -> usize {
        self.per_distance.get(&distance).copied().unwrap_or(0)
    }

    /// Distance of each head in head order, smallest distances first.
    pub fn head_distances(&self) -> Vec<usize> {
        self.per_distance
            .iter()
            .flat_map(|(&n, &h)| std::iter::repeat(n).take(h))
            .collect()
    }
}

/// `E_st` plus the adjacency stack for a video.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalGraph {
    pub edges: BoolMatrix,
    /// `(n, A_n)` in increasing n.
    pub adjacency: Vec<(usize, BoolMatrix)>,
    pub assignment: HeadAssignment,
}

impl SpatioTemporalGraph {
    pub fn build(
        video: &VideoObjects,
        tau_s: f64,
        tau_t: f64,
        assignment: HeadAssignment,
    ) -> Result<Self> {
        let spatial: Vec<BoolMatrix> = (0..video.frames())
            .map(|t| spatial_edges(video.frame_boxes(t), tau_s))
            .collect();
        let temporal: Vec<BoolMatrix> = (0..video.frames().saturating_sub(1))
            .map(|t| {
                temporal_edges(
                    video.frame_boxes(t),
                    video.frame_boxes(t + 1),
                    video.frame_labels(t),
                    video.frame_labels(t + 1),
                    tau_t,
                )
            })
            .collect();
        let edges = assemble_edges(&spatial, &temporal)?;
        Self::from_edges(edges, assignment)
    }

    pub fn from_edges(edges: BoolMatrix, assignment: HeadAssignment) -> Result<Self> {
        let distances = assignment.distances();
        let powers = adjacency_powers(&edges, &distances)?;
        Ok(Self {
            edges,
            adjacency: distances.into_iter().zip(powers).collect(),
            assignment,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.edges.rows()
    }

    pub fn adjacency_at(&self, n: usize) -> Option<&BoolMatrix> {
        self.adjacency.iter().find(|(d, _)| *d == n).map(|(_, a)| a)
    }

    /// Neighborhood of each head, in head order.
    pub fn head_neighborhoods(&self) -> Vec<Neighborhood> {
        self.assignment
            .head_distances()
            .into_iter()
            .map(|n| self.adjacency_at(n).unwrap().to_neighborhood())
            .collect()
    }

    /// Same graph with every adjacency replaced by the full matrix.
    pub fn fully_connected(&self) -> Self {
        let n = self.num_nodes();
        Self {
            edges: BoolMatrix::full(n),
            adjacency: self
                .adjacency
                .iter()
                .map(|(d, _)| (*d, BoolMatrix::full(n)))
                .collect(),
            assignment: self.assignment.clone(),
        }
    }
}

/// Multi-head GAT whose head k attends over its assigned `A_n`, with an
/// optional residual around the layer.
#[derive(Clone, Debug)]
pub struct GnGat {
    pub gat: GatLayer,
    pub residual: bool,
}

pub struct GnGatOutput {
    pub features: Var,
    pub attention: Vec<Var>,
}

impl GnGat {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        assignment: &HeadAssignment,
        residual: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            gat: GatLayer::new(store, "stgraph.gngat", d, assignment.total_heads(), rng)?,
            residual,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v: Var,
        graph: &SpatioTemporalGraph,
        ctx: &mut Ctx,
    ) -> Result<GnGatOutput> {
        if graph.assignment.total_heads() != self.gat.num_heads() {
            return Err(Error::config(format!(
                "head assignment sums to {} but the layer has K = {}",
                graph.assignment.total_heads(),
                self.gat.num_heads()
            )));
        }
        let neighborhoods = graph.head_neighborhoods();
        let masks: Vec<&Neighborhood> = neighborhoods.iter().collect();
        let out = self.gat.forward(tape, store, v, &masks, ctx)?;
        let features = if self.residual {
            tape.add(out.features, v)?
        } else {
            out.features
        };
        Ok(GnGatOutput {
            features,
            attention: out.attention,
        })
    }
}

/// Random boxes and labels over `frames x objects` nodes with zero
/// appearance features of width 2; for graph experiments.
pub fn random_video(rng: &mut Rng, frames: usize, objects: usize) -> Result<VideoObjects> {
    let n = frames * objects;
    let boxes = (0..n)
        .map(|_| {
            let w = rng.uniform_range(0.05, 0.3);
            let h = rng.uniform_range(0.05, 0.3);
            BBox {
                x: rng.uniform_range(0.0, 1.0 - w),
                y: rng.uniform_range(0.0, 1.0 - h),
                w,
                h,
            }
        })
        .collect();
    let labels = (0..n).map(|_| rng.below(3) as u32).collect();
    VideoObjects::new(frames, objects, 2, vec![0.0; n * 2], boxes, labels)
}
