//! The stochastic unpooling layer.
//!
//! Given a connected featured graph, the layer replaces selected nodes
//! with two children, samples the enlarged structure (intra-links, an
//! anchor for children that were not intra-linked, inter-links induced by
//! input edges, and extra child-child edges), and produces node and edge
//! features. Every sampled decision contributes its log-probability to an
//! exact five-part ledger (`logp_r/ia/c/ie/a`) used as the REINFORCE
//! signal; structure decisions themselves never enter the autodiff tape.

use crate::graph::{is_connected, FeaturedGraph, NodeMap};
use crate::nn::layers::agg;
use crate::nn::params::{Ctx, ParamStore};
use crate::nn::tape::NodeId;
use crate::nn::{Mlp, WrappedMlp};
use crate::oracle::{MergeEntry, PoolingPlan};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnpoolError {
    #[error("input graph must be connected")]
    Disconnected,
    #[error("input graph must have at least {0} nodes")]
    TooSmall(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("split node {0} is isolated and has no intra-link; cannot anchor")]
    IsolatedSplitNode(usize),
    #[error("minimum growth requested but no node is eligible to split")]
    CannotGrow,
    #[error("invalid pooling plan: {0}")]
    BadPlan(String),
}

/// Static configuration of one unpooling layer. Node sets hold 0-based
/// input indices and are intersected with the node set at run time;
/// `I_u'`, the always-split set, is the complement of the two.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnpoolHyper {
    pub static_nodes: BTreeSet<usize>,
    pub prob_nodes: BTreeSet<usize>,
    pub d_x: usize,
    pub d_y: usize,
    pub d_w: usize,
    pub d_u: usize,
    pub k_v: usize,
    pub k_ia: usize,
    pub k_ie: usize,
    pub k_w: usize,
    pub enforce_min_growth: bool,
    pub use_preference_scores: bool,
}

impl UnpoolHyper {
    pub fn validate(&self) -> Result<(), UnpoolError> {
        if self.d_x < 4 {
            return Err(UnpoolError::BadHyper(format!(
                "d_x must be >= 4 so the child projections are nonempty, got {}",
                self.d_x
            )));
        }
        if !self.static_nodes.is_disjoint(&self.prob_nodes) {
            return Err(UnpoolError::BadHyper("static and probabilistic sets overlap".into()));
        }
        for (label, v) in [
            ("d_y", self.d_y),
            ("d_u", self.d_u),
            ("k_v", self.k_v),
            ("k_ia", self.k_ia),
            ("k_ie", self.k_ie),
            ("k_w", self.k_w),
        ] {
            if v == 0 {
                return Err(UnpoolError::BadHyper(format!("{label} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the projected node feature fed to MLP-y.
    pub fn proj_dim(&self) -> usize {
        self.d_x / 2 + self.d_x / 4
    }
}

/// Which children of a split endpoint an input edge connects to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NChoice {
    First,
    Second,
    Both,
}

impl NChoice {
    pub fn size(self) -> usize {
        match self {
            NChoice::Both => 2,
            _ => 1,
        }
    }
}

/// Record of every sampled decision of one unpool call, in sampling
/// order. Replaying a trace against the same parameters reproduces the
/// structure and the ledger exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnpoolTrace {
    pub splits: Vec<(usize, bool)>,
    pub forced_split: Option<usize>,
    pub intras: Vec<(usize, bool)>,
    /// (split node, chosen anchor neighbor)
    pub anchors: Vec<(usize, usize)>,
    /// (input edge, endpoint, choice) for every sampled (edge, endpoint)
    pub nsets: Vec<((usize, usize), usize, NChoice)>,
    pub extras: Vec<((usize, usize), bool)>,
    /// r-subchoice for selected extra edges in the {1,2}-size case
    pub extra_children: Vec<((usize, usize), u8)>,
}

/// Where decisions come from: fresh sampling or trace replay.
pub trait DecisionSource {
    fn split(&mut self, node: usize, p: f64) -> bool;
    /// Minimum-growth fallback: which of `candidates` (ascending) splits.
    /// `p` holds their unpool probabilities in the same order.
    fn forced_split(&mut self, candidates: &[usize], p: &[f64]) -> usize;
    fn intra(&mut self, node: usize, p: f64) -> bool;
    fn anchor(&mut self, node: usize, neighbors: &[usize], probs: &[f64]) -> usize;
    fn nset(&mut self, edge: (usize, usize), endpoint: usize, p1: f64, p2: f64) -> NChoice;
    fn extra(&mut self, edge: (usize, usize), p: f64) -> bool;
    fn extra_child(&mut self, edge: (usize, usize), ratio_first: f64) -> u8;
}

/// Draws fresh decisions and records them.
pub struct SampleSource<'r> {
    rng: &'r mut dyn rand::RngCore,
    pub trace: UnpoolTrace,
}

impl<'r> SampleSource<'r> {
    pub fn new(rng: &'r mut dyn rand::RngCore) -> Self {
        SampleSource { rng, trace: UnpoolTrace::default() }
    }
}

impl DecisionSource for SampleSource<'_> {
    fn split(&mut self, node: usize, p: f64) -> bool {
        let hit = self.rng.gen::<f64>() < p;
        self.trace.splits.push((node, hit));
        hit
    }

    fn forced_split(&mut self, candidates: &[usize], p: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..candidates.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        let node = candidates[best];
        self.trace.forced_split = Some(node);
        node
    }

    fn intra(&mut self, node: usize, p: f64) -> bool {
        let hit = self.rng.gen::<f64>() < p;
        self.trace.intras.push((node, hit));
        hit
    }

    fn anchor(&mut self, node: usize, neighbors: &[usize], probs: &[f64]) -> usize {
        let u = self.rng.gen::<f64>();
        let mut acc = 0.0;
        let mut chosen = neighbors.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        self.trace.anchors.push((node, neighbors[chosen]));
        chosen
    }

    fn nset(&mut self, edge: (usize, usize), endpoint: usize, p1: f64, p2: f64) -> NChoice {
        let u = self.rng.gen::<f64>();
        let choice = if u < p1 {
            NChoice::First
        } else if u >= p1 + p2 {
            NChoice::Both
        } else {
            NChoice::Second
        };
        self.trace.nsets.push((edge, endpoint, choice));
        choice
    }

    fn extra(&mut self, edge: (usize, usize), p: f64) -> bool {
        let hit = self.rng.gen::<f64>() < p;
        self.trace.extras.push((edge, hit));
        hit
    }

    fn extra_child(&mut self, edge: (usize, usize), ratio_first: f64) -> u8 {
        let r = if self.rng.gen::<f64>() < ratio_first { 1 } else { 2 };
        self.trace.extra_children.push((edge, r));
        r
    }
}

/// Replays a recorded trace; probabilities are ignored, decisions are
/// read back in order.
pub struct ReplaySource<'t> {
    trace: &'t UnpoolTrace,
    splits: usize,
    intras: usize,
    anchors: usize,
    nsets: usize,
    extras: usize,
    extra_children: usize,
}

impl<'t> ReplaySource<'t> {
    pub fn new(trace: &'t UnpoolTrace) -> Self {
        ReplaySource { trace, splits: 0, intras: 0, anchors: 0, nsets: 0, extras: 0, extra_children: 0 }
    }
}

impl DecisionSource for ReplaySource<'_> {
    fn split(&mut self, node: usize, _p: f64) -> bool {
        let (rec, hit) = self.trace.splits[self.splits];
        assert_eq!(rec, node, "trace replay out of order");
        self.splits += 1;
        hit
    }

    fn forced_split(&mut self, candidates: &[usize], _p: &[f64]) -> usize {
        let node = self.trace.forced_split.expect("trace has no forced split");
        assert!(candidates.contains(&node));
        node
    }

    fn intra(&mut self, node: usize, _p: f64) -> bool {
        let (rec, hit) = self.trace.intras[self.intras];
        assert_eq!(rec, node, "trace replay out of order");
        self.intras += 1;
        hit
    }

    fn anchor(&mut self, node: usize, neighbors: &[usize], _probs: &[f64]) -> usize {
        let (rec, nb) = self.trace.anchors[self.anchors];
        assert_eq!(rec, node, "trace replay out of order");
        self.anchors += 1;
        neighbors.iter().position(|&k| k == nb).expect("anchored neighbor missing")
    }

    fn nset(&mut self, edge: (usize, usize), endpoint: usize, _p1: f64, _p2: f64) -> NChoice {
        let (rec_e, rec_v, choice) = self.trace.nsets[self.nsets];
        assert_eq!((rec_e, rec_v), (edge, endpoint), "trace replay out of order");
        self.nsets += 1;
        choice
    }

    fn extra(&mut self, edge: (usize, usize), _p: f64) -> bool {
        let (rec, hit) = self.trace.extras[self.extras];
        assert_eq!(rec, edge, "trace replay out of order");
        self.extras += 1;
        hit
    }

    fn extra_child(&mut self, edge: (usize, usize), _ratio: f64) -> u8 {
        let (rec, r) = self.trace.extra_children[self.extra_children];
        assert_eq!(rec, edge, "trace replay out of order");
        self.extra_children += 1;
        r
    }
}

/// Case tag for a selected extra edge (Step 2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtraCase {
    /// Both N sets singletons: connect the two complement children.
    BothSingle,
    /// Sizes {1, 2}: connect the complement child to child `r` of the
    /// size-2 endpoint.
    OneDouble { r: u8 },
    /// Both N sets of size 2: nothing to add.
    BothDouble,
}

#[derive(Debug, Clone)]
pub struct ExtraEdgeRecord {
    pub edge: (usize, usize),
    pub case: ExtraCase,
    pub added: Vec<(usize, usize)>,
}

/// Log-probability ledger as tape nodes.
pub struct LogpNodes {
    pub r: NodeId,
    pub ia: NodeId,
    pub c: NodeId,
    pub ie: NodeId,
    pub a: NodeId,
    pub total: NodeId,
}

/// Tape-level result of one unpool application.
pub struct UnpoolForward {
    pub structure: FeaturedGraph,
    pub y: NodeId,
    pub u: NodeId,
    pub node_map: NodeMap,
    pub v_c: Vec<usize>,
    pub anchors: BTreeMap<usize, usize>,
    pub n_sets: BTreeMap<((usize, usize), usize), Vec<usize>>,
    pub extra_edges: Vec<ExtraEdgeRecord>,
    pub logp: LogpNodes,
    pub trace: UnpoolTrace,
}

/// Materialized outcome of the public `unpool` operation.
#[derive(Debug, Clone)]
pub struct UnpoolOutcome {
    pub output: FeaturedGraph,
    pub node_map: NodeMap,
    pub v_c: Vec<usize>,
    pub anchors: BTreeMap<usize, usize>,
    pub n_sets: BTreeMap<((usize, usize), usize), Vec<usize>>,
    pub extra_edges: Vec<ExtraEdgeRecord>,
    pub logp_r: f64,
    pub logp_ia: f64,
    pub logp_c: f64,
    pub logp_ie: f64,
    pub logp_a: f64,
    pub logp_total: f64,
    pub trace: UnpoolTrace,
}

/// One unpooling layer: hyperparameters plus the seven MLPs (MLP-R,
/// MLP-y, MLP-IA, MLP-IE-1, MLP-IE-2 — shared with MLP-C — MLP-IE-A,
/// MLP-u) and the two zero-preference heads.
#[derive(Debug, Clone)]
pub struct UnpoolLayer {
    pub name: String,
    pub hyper: UnpoolHyper,
}

impl UnpoolLayer {
    pub fn new(name: impl Into<String>, hyper: UnpoolHyper) -> Result<Self, UnpoolError> {
        hyper.validate()?;
        Ok(UnpoolLayer { name: name.into(), hyper })
    }

    fn mlp_r(&self) -> Mlp {
        Mlp::new(format!("{}.r", self.name), &[self.hyper.d_x, (self.hyper.d_x / 2).max(1), 1])
    }

    fn mlp_y(&self) -> Mlp {
        Mlp::new(format!("{}.y", self.name), &[self.hyper.proj_dim(), self.hyper.k_v, self.hyper.d_y])
    }

    fn mlp_ia(&self) -> Mlp {
        Mlp::new(format!("{}.ia", self.name), &[self.hyper.d_y, self.hyper.k_ia, 1])
    }

    fn ie_input_dim(&self) -> usize {
        self.hyper.d_y + self.hyper.d_w + self.hyper.d_x
    }

    fn mlp_ie1(&self) -> Mlp {
        Mlp::new(format!("{}.ie1", self.name), &[self.ie_input_dim(), self.hyper.k_ie, 1])
    }

    fn mlp_ie2(&self) -> Mlp {
        Mlp::new(format!("{}.ie2", self.name), &[self.ie_input_dim(), self.hyper.k_ie, 1])
    }

    fn mlp_iea(&self) -> Mlp {
        Mlp::new(
            format!("{}.iea", self.name),
            &[2 * self.hyper.d_x + self.hyper.d_w, self.hyper.k_ie, 1],
        )
    }

    fn mlp_u(&self) -> WrappedMlp {
        WrappedMlp::new(format!("{}.u", self.name), &[self.hyper.d_y, self.hyper.k_w, self.hyper.d_u])
    }

    fn h_s0(&self) -> Mlp {
        Mlp::new(format!("{}.hs0", self.name), &[self.hyper.d_y, 2 * self.hyper.d_y, 1])
    }

    fn h_b0(&self) -> Mlp {
        Mlp::new(format!("{}.hb0", self.name), &[self.hyper.d_x, 2 * self.hyper.d_x, 1])
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp_r().init(store, rng);
        self.mlp_y().init(store, rng);
        self.mlp_ia().init(store, rng);
        self.mlp_ie1().init(store, rng);
        self.mlp_ie2().init(store, rng);
        self.mlp_iea().init(store, rng);
        self.mlp_u().init(store, rng);
        self.h_s0().init(store, rng);
        self.h_b0().init(store, rng);
    }

    /// Parameter-group prefixes, one per MLP (the seven plus the two
    /// zero-preference heads).
    pub fn param_groups(&self) -> Vec<String> {
        ["r", "y", "ia", "ie1", "ie2", "iea", "u", "hs0", "hb0"]
            .iter()
            .map(|s| format!("{}.{s}", self.name))
            .collect()
    }

    /// Prefixes of the structure-sampling MLPs (everything except the
    /// feature heads MLP-y and MLP-u).
    pub fn structure_param_groups(&self) -> Vec<String> {
        ["r", "ia", "ie1", "ie2", "iea", "hs0", "hb0"]
            .iter()
            .map(|s| format!("{}.{s}", self.name))
            .collect()
    }

    /// Samples an unpool application of this layer. `structure` carries
    /// the input connectivity; `x` (n x d_x) and `w` (m x d_w) are tape
    /// nodes for the input features.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        structure: &FeaturedGraph,
        x: NodeId,
        w: NodeId,
        src: &mut dyn DecisionSource,
    ) -> Result<UnpoolForward, UnpoolError> {
        let h = &self.hyper;
        let n = structure.n();
        let (xr, xc) = ctx.tape.shape(x);
        if xr != n || xc != h.d_x {
            return Err(UnpoolError::DimMismatch(format!(
                "node features {xr}x{xc}, expected {n}x{}",
                h.d_x
            )));
        }
        let (wr, wc) = ctx.tape.shape(w);
        if wr != structure.edge_count() || wc != h.d_w {
            return Err(UnpoolError::DimMismatch(format!(
                "edge features {wr}x{wc}, expected {}x{}",
                structure.edge_count(),
                h.d_w
            )));
        }

        // ---- Step 1a: which nodes split.
        #[derive(PartialEq, Clone, Copy)]
        enum Class {
            Static,
            Prob,
            Always,
        }
        let class: Vec<Class> = (0..n)
            .map(|i| {
                if h.static_nodes.contains(&i) {
                    Class::Static
                } else if h.prob_nodes.contains(&i) {
                    Class::Prob
                } else {
                    Class::Always
                }
            })
            .collect();
        let prob_list: Vec<usize> = (0..n).filter(|&i| class[i] == Class::Prob).collect();
        let mut split = vec![false; n];
        for i in 0..n {
            if class[i] == Class::Always {
                split[i] = true;
            }
        }
        let mut logp_r_terms: Vec<NodeId> = Vec::new();
        let mut prob_p_nodes: Vec<NodeId> = Vec::new();
        if !prob_list.is_empty() {
            let rows = ctx.tape.gather_rows(x, Rc::new(prob_list.clone()));
            let p = self.mlp_r().forward_sigmoid(ctx, rows);
            let mut term_slot: Vec<Option<usize>> = Vec::new();
            for (row, &node) in prob_list.iter().enumerate() {
                let p_i = ctx.tape.slice_rows(p, row, row + 1);
                prob_p_nodes.push(p_i);
                let pv = ctx.tape.scalar(p_i);
                debug_assert!(pv.is_finite());
                let hit = src.split(node, pv);
                split[node] = hit;
                let term = if hit {
                    ctx.tape.ln(p_i)
                } else {
                    let q = ctx.tape.neg(p_i);
                    let q = ctx.tape.add_scalar(q, 1.0);
                    ctx.tape.ln(q)
                };
                logp_r_terms.push(term);
                term_slot.push(Some(row));
            }
            // Minimum growth: the sampling as written can produce zero
            // splits when the always-split set is empty; force the most
            // likely candidate and score that branch as chosen.
            if h.enforce_min_growth && !split.iter().any(|&s| s) {
                let pv: Vec<f64> = prob_p_nodes.iter().map(|&id| ctx.tape.scalar(id)).collect();
                let node = src.forced_split(&prob_list, &pv);
                let row = prob_list.iter().position(|&i| i == node).unwrap();
                split[node] = true;
                logp_r_terms[row] = ctx.tape.ln(prob_p_nodes[row]);
            }
            let _ = term_slot;
        } else if h.enforce_min_growth && !split.iter().any(|&s| s) {
            return Err(UnpoolError::CannotGrow);
        }

        // ---- Step 1b: output node indexing and features.
        let mut static_pairs = Vec::new();
        let mut split_pairs = Vec::new();
        let mut next = 0usize;
        for i in 0..n {
            if split[i] {
                split_pairs.push((i, (next, next + 1)));
                next += 2;
            } else {
                static_pairs.push((i, next));
                next += 1;
            }
        }
        let n_out = next;
        let node_map = NodeMap::new(static_pairs.clone(), split_pairs.clone())
            .expect("constructed node map is valid");
        let i_u: Vec<usize> = split_pairs.iter().map(|&(i, _)| i).collect();

        // parent of each output row, and whether the row is a second child
        let mut parent_of = vec![0usize; n_out];
        let mut is_second = vec![false; n_out];
        for &(i, o) in &static_pairs {
            parent_of[o] = i;
        }
        for &(i, (a, b)) in &split_pairs {
            parent_of[a] = i;
            parent_of[b] = i;
            is_second[b] = true;
        }
        let d_s = h.d_x / 2;
        let dd = h.d_x / 4;
        let gathered = ctx.tape.gather_rows(x, Rc::new(parent_of.clone()));
        let b1 = ctx.tape.slice_cols(gathered, 0, d_s + dd);
        let b2 = {
            let head = ctx.tape.slice_cols(gathered, 0, d_s);
            let tail = ctx.tape.slice_cols(gathered, d_s + dd, d_s + 2 * dd);
            ctx.tape.concat_cols(&[head, tail])
        };
        let stacked = ctx.tape.concat_rows(&[b1, b2]);
        let sel: Vec<usize> = (0..n_out).map(|r| if is_second[r] { n_out + r } else { r }).collect();
        let y_in = ctx.tape.gather_rows(stacked, Rc::new(sel));
        let y = self.mlp_y().forward(ctx, y_in);

        let f1_of = |i: usize| node_map.children(i).unwrap().0;
        let f2_of = |i: usize| node_map.children(i).unwrap().1;

        let mut out_edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        let push_edge = |set: &mut BTreeSet<(usize, usize)>, a: usize, b: usize| {
            debug_assert_ne!(a, b);
            set.insert((a.min(b), a.max(b)));
        };

        // ---- Step 2a: intra-links.
        let mut v_c: Vec<usize> = Vec::new();
        let mut logp_ia_terms: Vec<NodeId> = Vec::new();
        // agg(y_f1, y_f2) rows per split node, reused by steps 2b/2c
        let mut agg_rows_node: Option<NodeId> = None;
        if !i_u.is_empty() {
            let f1_rows: Vec<usize> = i_u.iter().map(|&i| f1_of(i)).collect();
            let f2_rows: Vec<usize> = i_u.iter().map(|&i| f2_of(i)).collect();
            let y1 = ctx.tape.gather_rows(y, Rc::new(f1_rows));
            let y2 = ctx.tape.gather_rows(y, Rc::new(f2_rows));
            let a = agg(ctx, y1, y2);
            agg_rows_node = Some(a);
            let p = self.mlp_ia().forward_sigmoid(ctx, a);
            for (row, &j) in i_u.iter().enumerate() {
                let p_j = ctx.tape.slice_rows(p, row, row + 1);
                let pv = ctx.tape.scalar(p_j);
                let hit = src.intra(j, pv);
                let term = if hit {
                    v_c.push(j);
                    push_edge(&mut out_edges, f1_of(j), f2_of(j));
                    ctx.tape.ln(p_j)
                } else {
                    let q = ctx.tape.neg(p_j);
                    let q = ctx.tape.add_scalar(q, 1.0);
                    ctx.tape.ln(q)
                };
                logp_ia_terms.push(term);
            }
        }
        let v_c_set: BTreeSet<usize> = v_c.iter().copied().collect();

        // ---- Shared MLP-IE-2 scores over all (split node, neighbor)
        // rows: used by the anchor softmax (MLP-C) and the both-children
        // preference rescaling.
        let agg_row_of: BTreeMap<usize, usize> =
            i_u.iter().enumerate().map(|(r, &j)| (j, r)).collect();
        struct PairRows {
            node: usize,
            neighbors: Vec<usize>,
            offset: usize,
        }
        let mut pair_rows: Vec<PairRows> = Vec::new();
        let mut total_rows = 0usize;
        for &j in &i_u {
            let nbs = structure.neighbors(j);
            pair_rows.push(PairRows { node: j, neighbors: nbs.clone(), offset: total_rows });
            total_rows += nbs.len();
        }
        // score lookup: (split node j) -> its block offset
        let block_of: BTreeMap<usize, usize> =
            pair_rows.iter().map(|p| (p.node, p.offset)).collect();
        let nbrs_of: BTreeMap<usize, Vec<usize>> =
            pair_rows.iter().map(|p| (p.node, p.neighbors.clone())).collect();

        let (s2_scores, s1_scores, b_scores) = if total_rows > 0 {
            let agg_rows = agg_rows_node.expect("split nodes imply agg rows");
            // rows for ie2: (agg_j, w_e, x_k)
            let mut agg_idx = Vec::with_capacity(total_rows);
            let mut edge_idx = Vec::with_capacity(total_rows);
            let mut nbr_idx = Vec::with_capacity(total_rows);
            for p in &pair_rows {
                for &k in &p.neighbors {
                    agg_idx.push(agg_row_of[&p.node]);
                    edge_idx.push(structure.edge_index(p.node, k).expect("edge exists"));
                    nbr_idx.push(k);
                }
            }
            let agg_g = ctx.tape.gather_rows(agg_rows, Rc::new(agg_idx.clone()));
            let w_g = ctx.tape.gather_rows(w, Rc::new(edge_idx.clone()));
            let x_g = ctx.tape.gather_rows(x, Rc::new(nbr_idx.clone()));
            let ie2_in = ctx.tape.concat_cols(&[agg_g, w_g, x_g]);
            let b_scores = self.mlp_ie2().forward(ctx, ie2_in);

            // rows for ie1: (child feature, w_e, x_k), child-1 block then
            // child-2 block in one batch
            let mut y1_idx = Vec::with_capacity(total_rows);
            let mut y2_idx = Vec::with_capacity(total_rows);
            for p in &pair_rows {
                for _ in &p.neighbors {
                    y1_idx.push(f1_of(p.node));
                    y2_idx.push(f2_of(p.node));
                }
            }
            let mut child_rows = y1_idx;
            child_rows.extend(y2_idx);
            let y_children = ctx.tape.gather_rows(y, Rc::new(child_rows));
            let w2 = ctx.tape.gather_rows(w, Rc::new({
                let mut v = edge_idx.clone();
                v.extend(edge_idx.iter().copied());
                v
            }));
            let x2 = ctx.tape.gather_rows(x, Rc::new({
                let mut v = nbr_idx.clone();
                v.extend(nbr_idx.iter().copied());
                v
            }));
            let ie1_in = ctx.tape.concat_cols(&[y_children, w2, x2]);
            let s_scores = self.mlp_ie1().forward(ctx, ie1_in);
            let s1 = ctx.tape.slice_rows(s_scores, 0, total_rows);
            let s2 = ctx.tape.slice_rows(s_scores, total_rows, 2 * total_rows);
            (Some(s2), Some(s1), Some(b_scores))
        } else {
            (None, None, None)
        };

        // ---- Step 2b: anchors for split nodes without an intra-link.
        let mut anchors: BTreeMap<usize, usize> = BTreeMap::new();
        let mut n_sets: BTreeMap<((usize, usize), usize), Vec<usize>> = BTreeMap::new();
        let mut forced: BTreeSet<((usize, usize), usize)> = BTreeSet::new();
        let mut logp_c_terms: Vec<NodeId> = Vec::new();
        for &j in &i_u {
            if v_c_set.contains(&j) {
                continue;
            }
            let nbs = &nbrs_of[&j];
            if nbs.is_empty() {
                return Err(UnpoolError::IsolatedSplitNode(j));
            }
            let off = block_of[&j];
            let scores = b_scores.expect("scores exist when split nodes exist");
            let block = ctx.tape.slice_rows(scores, off, off + nbs.len());
            let row = ctx.tape.transpose(block);
            let probs = ctx.tape.softmax_rows(row);
            let pv: Vec<f64> = ctx.tape.value(probs).row(0).to_vec();
            let chosen = src.anchor(j, nbs, &pv);
            let b_j = nbs[chosen];
            anchors.insert(j, b_j);
            let e = (j.min(b_j), j.max(b_j));
            n_sets.insert((e, j), vec![f1_of(j), f2_of(j)]);
            forced.insert((e, j));
            let p_at = ctx.tape.slice_cols(probs, chosen, chosen + 1);
            logp_c_terms.push(ctx.tape.ln(p_at));
        }

        // ---- Step 2c: inter-links. Probabilities (p1, p2) per sampled
        // (edge, split endpoint); the preference-score path rescales the
        // raw scores per child with a zero-preference head, the plain
        // path is a 3-way softmax of the raw scores.
        // Per split node: softmax rows over (neighbors + zero-pref).
        let mut pref1: BTreeMap<usize, NodeId> = BTreeMap::new();
        let mut pref2: BTreeMap<usize, NodeId> = BTreeMap::new();
        let mut prefb: BTreeMap<usize, NodeId> = BTreeMap::new();
        if h.use_preference_scores && !i_u.is_empty() {
            let f1_rows: Vec<usize> = i_u.iter().map(|&i| f1_of(i)).collect();
            let f2_rows: Vec<usize> = i_u.iter().map(|&i| f2_of(i)).collect();
            let mut child_rows = f1_rows;
            child_rows.extend(f2_rows);
            let y_children = ctx.tape.gather_rows(y, Rc::new(child_rows));
            let s0 = self.h_s0().forward(ctx, y_children);
            let x_parents = ctx.tape.gather_rows(x, Rc::new(i_u.clone()));
            let b0 = self.h_b0().forward(ctx, x_parents);
            for (pos, &j) in i_u.iter().enumerate() {
                let nbs = &nbrs_of[&j];
                if nbs.is_empty() {
                    continue;
                }
                let off = block_of[&j];
                let deg = nbs.len();
                let build = |ctx: &mut Ctx, scores: NodeId, zero: NodeId| -> NodeId {
                    let block = ctx.tape.slice_rows(scores, off, off + deg);
                    let col = ctx.tape.concat_rows(&[block, zero]);
                    let row = ctx.tape.transpose(col);
                    ctx.tape.softmax_rows(row)
                };
                let s1 = s1_scores.unwrap();
                let s2 = s2_scores.unwrap();
                let bb = b_scores.unwrap();
                let z1 = ctx.tape.slice_rows(s0, pos, pos + 1);
                let z2 = ctx.tape.slice_rows(s0, i_u.len() + pos, i_u.len() + pos + 1);
                let zb = ctx.tape.slice_rows(b0, pos, pos + 1);
                pref1.insert(j, build(ctx, s1, z1));
                pref2.insert(j, build(ctx, s2, z2));
                prefb.insert(j, build(ctx, bb, zb));
            }
        }

        // (p1, p2) tape nodes for every (edge, split endpoint)
        let mut p12: BTreeMap<((usize, usize), usize), (NodeId, NodeId)> = BTreeMap::new();
        for &e in structure.edges() {
            for &(j, other) in &[(e.0, e.1), (e.1, e.0)] {
                if !node_map.is_split(j) {
                    continue;
                }
                let nbs = &nbrs_of[&j];
                let k_pos = nbs.iter().position(|&k| k == other).unwrap();
                let (p1, p2) = if h.use_preference_scores {
                    let a1 = pref1[&j];
                    let a2 = pref2[&j];
                    let ab = prefb[&j];
                    let a1k = ctx.tape.slice_cols(a1, k_pos, k_pos + 1);
                    let a2k = ctx.tape.slice_cols(a2, k_pos, k_pos + 1);
                    let abk = ctx.tape.slice_cols(ab, k_pos, k_pos + 1);
                    let z0 = ctx.tape.add(a1k, a2k);
                    let z = ctx.tape.add(z0, abk);
                    (ctx.tape.div(a1k, z), ctx.tape.div(a2k, z))
                } else {
                    let off = block_of[&j] + k_pos;
                    let s1 = s1_scores.unwrap();
                    let s2 = s2_scores.unwrap();
                    let bb = b_scores.unwrap();
                    let r1 = ctx.tape.slice_rows(s1, off, off + 1);
                    let r2 = ctx.tape.slice_rows(s2, off, off + 1);
                    let rb = ctx.tape.slice_rows(bb, off, off + 1);
                    let col = ctx.tape.concat_rows(&[r1, r2, rb]);
                    let row = ctx.tape.transpose(col);
                    let sm = ctx.tape.softmax_rows(row);
                    (ctx.tape.slice_cols(sm, 0, 1), ctx.tape.slice_cols(sm, 1, 2))
                };
                p12.insert((e, j), (p1, p2));
            }
        }

        let mut logp_ie_terms: Vec<NodeId> = Vec::new();
        for &e in structure.edges() {
            for &j in &[e.0, e.1] {
                if !node_map.is_split(j) {
                    n_sets.insert((e, j), vec![node_map.image(j).unwrap()]);
                    continue;
                }
                if forced.contains(&(e, j)) {
                    continue; // anchor-forced, excluded from logP-IE
                }
                let (p1, p2) = p12[&(e, j)];
                let p1v = ctx.tape.scalar(p1);
                let p2v = ctx.tape.scalar(p2);
                let choice = src.nset(e, j, p1v, p2v);
                let term = match choice {
                    NChoice::First => ctx.tape.ln(p1),
                    NChoice::Second => ctx.tape.ln(p2),
                    NChoice::Both => {
                        let s = ctx.tape.add(p1, p2);
                        let q = ctx.tape.neg(s);
                        let q = ctx.tape.add_scalar(q, 1.0);
                        ctx.tape.ln(q)
                    }
                };
                logp_ie_terms.push(term);
                let (f1, f2) = node_map.children(j).unwrap();
                let set = match choice {
                    NChoice::First => vec![f1],
                    NChoice::Second => vec![f2],
                    NChoice::Both => vec![f1, f2],
                };
                n_sets.insert((e, j), set);
            }
            // cross product of the two endpoint sets
            let na = n_sets[&(e, e.0)].clone();
            let nb = n_sets[&(e, e.1)].clone();
            for &k in &na {
                for &l in &nb {
                    push_edge(&mut out_edges, k, l);
                }
            }
        }

        // ---- Step 2d: additional edges on split-split input edges.
        let e_u: Vec<(usize, usize)> = structure
            .edges()
            .iter()
            .copied()
            .filter(|&(a, b)| node_map.is_split(a) && node_map.is_split(b))
            .collect();
        let mut logp_a_terms: Vec<NodeId> = Vec::new();
        let mut extra_records: Vec<ExtraEdgeRecord> = Vec::new();
        if !e_u.is_empty() {
            let a_idx: Vec<usize> = e_u.iter().map(|&(a, _)| a).collect();
            let b_idx: Vec<usize> = e_u.iter().map(|&(_, b)| b).collect();
            let w_idx: Vec<usize> =
                e_u.iter().map(|&(a, b)| structure.edge_index(a, b).unwrap()).collect();
            let xa = ctx.tape.gather_rows(x, Rc::new(a_idx));
            let xb = ctx.tape.gather_rows(x, Rc::new(b_idx));
            let we = ctx.tape.gather_rows(w, Rc::new(w_idx));
            let iea_in = ctx.tape.concat_cols(&[xa, xb, we]);
            let p_a = self.mlp_iea().forward_sigmoid(ctx, iea_in);
            for (row, &e) in e_u.iter().enumerate() {
                let p_e = ctx.tape.slice_rows(p_a, row, row + 1);
                let pv = ctx.tape.scalar(p_e);
                let hit = src.extra(e, pv);
                let term = if hit {
                    ctx.tape.ln(p_e)
                } else {
                    let q = ctx.tape.neg(p_e);
                    let q = ctx.tape.add_scalar(q, 1.0);
                    ctx.tape.ln(q)
                };
                logp_a_terms.push(term);
                if !hit {
                    continue;
                }
                let na = n_sets[&(e, e.0)].clone();
                let nb = n_sets[&(e, e.1)].clone();
                let complement = |node: usize, set: &[usize]| -> usize {
                    let (f1, f2) = node_map.children(node).unwrap();
                    if set.contains(&f1) {
                        f2
                    } else {
                        f1
                    }
                };
                match na.len() + nb.len() {
                    2 => {
                        let k = complement(e.0, &na);
                        let l = complement(e.1, &nb);
                        push_edge(&mut out_edges, k, l);
                        extra_records.push(ExtraEdgeRecord {
                            edge: e,
                            case: ExtraCase::BothSingle,
                            added: vec![(k.min(l), k.max(l))],
                        });
                    }
                    3 => {
                        let (single, double) = if na.len() == 1 { (e.0, e.1) } else { (e.1, e.0) };
                        let single_set = if na.len() == 1 { &na } else { &nb };
                        let (p1, p2) = p12[&(e, double)];
                        let sum = ctx.tape.add(p1, p2);
                        let ratio = ctx.tape.div(p1, sum);
                        let r = src.extra_child(e, ctx.tape.scalar(ratio));
                        let picked = if r == 1 { ratio } else {
                            let neg = ctx.tape.neg(ratio);
                            ctx.tape.add_scalar(neg, 1.0)
                        };
                        logp_a_terms.push(ctx.tape.ln(picked));
                        let k = complement(single, single_set);
                        let (d1, d2) = node_map.children(double).unwrap();
                        let l = if r == 1 { d1 } else { d2 };
                        push_edge(&mut out_edges, k, l);
                        extra_records.push(ExtraEdgeRecord {
                            edge: e,
                            case: ExtraCase::OneDouble { r },
                            added: vec![(k.min(l), k.max(l))],
                        });
                    }
                    4 => {
                        extra_records.push(ExtraEdgeRecord {
                            edge: e,
                            case: ExtraCase::BothDouble,
                            added: vec![],
                        });
                    }
                    _ => unreachable!("N sets are nonempty with at most 2 elements"),
                }
            }
        }

        // ---- Step 3: edge features over the final edge set.
        let edges: Vec<(usize, usize)> = out_edges.into_iter().collect();
        let u = if edges.is_empty() {
            ctx.tape.leaf(Array2::zeros((0, h.d_u)))
        } else {
            let k_rows: Vec<usize> = edges.iter().map(|&(k, _)| k).collect();
            let l_rows: Vec<usize> = edges.iter().map(|&(_, l)| l).collect();
            let yk = ctx.tape.gather_rows(y, Rc::new(k_rows));
            let yl = ctx.tape.gather_rows(y, Rc::new(l_rows));
            let a = agg(ctx, yk, yl);
            self.mlp_u().forward(ctx, a)
        };

        let structure_out =
            FeaturedGraph::from_edges(n_out, edges).expect("output structure is well-formed");

        let sum_terms = |ctx: &mut Ctx, terms: &[NodeId]| -> NodeId {
            match terms.split_first() {
                None => ctx.tape.scalar_leaf(0.0),
                Some((&first, rest)) => {
                    let mut acc = first;
                    for &t in rest {
                        acc = ctx.tape.add(acc, t);
                    }
                    acc
                }
            }
        };
        let lp_r = sum_terms(ctx, &logp_r_terms);
        let lp_ia = sum_terms(ctx, &logp_ia_terms);
        let lp_c = sum_terms(ctx, &logp_c_terms);
        let lp_ie = sum_terms(ctx, &logp_ie_terms);
        let lp_a = sum_terms(ctx, &logp_a_terms);
        let t0 = ctx.tape.add(lp_r, lp_ia);
        let t1 = ctx.tape.add(t0, lp_c);
        let t2 = ctx.tape.add(t1, lp_ie);
        let total = ctx.tape.add(t2, lp_a);

        let trace = UnpoolTrace::default();
        Ok(UnpoolForward {
            structure: structure_out,
            y,
            u,
            node_map,
            v_c,
            anchors,
            n_sets,
            extra_edges: extra_records,
            logp: LogpNodes { r: lp_r, ia: lp_ia, c: lp_c, ie: lp_ie, a: lp_a, total },
            trace,
        })
    }

    /// The public sampling operation: applies the layer to a featured
    /// graph and materializes the outcome.
    pub fn unpool(
        &self,
        g: &FeaturedGraph,
        store: &ParamStore,
        rng: &mut impl Rng,
        train: bool,
    ) -> Result<UnpoolOutcome, UnpoolError> {
        if g.n() < 2 {
            return Err(UnpoolError::TooSmall(2));
        }
        if !is_connected(g) {
            return Err(UnpoolError::Disconnected);
        }
        let mut ctx = Ctx::new(store, train);
        let x = ctx.tape.leaf(g.node_feats().clone());
        let w = ctx.tape.leaf(g.edge_feats().clone());
        let mut src = SampleSource::new(rng);
        let mut fwd = self.forward(&mut ctx, g, x, w, &mut src)?;
        fwd.trace = src.trace;
        Ok(self.materialize(&ctx, fwd))
    }

    /// Recomputes an unpool call from its decision trace (same structure,
    /// same ledger when parameters are unchanged; smooth in the
    /// parameters, which is what gradient checks differentiate).
    pub fn replay(
        &self,
        g: &FeaturedGraph,
        store: &ParamStore,
        trace: &UnpoolTrace,
        train: bool,
    ) -> Result<UnpoolOutcome, UnpoolError> {
        let mut ctx = Ctx::new(store, train);
        let x = ctx.tape.leaf(g.node_feats().clone());
        let w = ctx.tape.leaf(g.edge_feats().clone());
        let mut src = ReplaySource::new(trace);
        let mut fwd = self.forward(&mut ctx, g, x, w, &mut src)?;
        fwd.trace = trace.clone();
        Ok(self.materialize(&ctx, fwd))
    }

    fn materialize(&self, ctx: &Ctx, fwd: UnpoolForward) -> UnpoolOutcome {
        let y = ctx.tape.value(fwd.y).clone();
        let u = ctx.tape.value(fwd.u).clone();
        let output = FeaturedGraph::new(
            fwd.structure.n(),
            fwd.structure.edges().iter().copied(),
            y,
            Some(u),
        )
        .expect("unpool output is a valid featured graph");
        UnpoolOutcome {
            output,
            node_map: fwd.node_map,
            v_c: fwd.v_c,
            anchors: fwd.anchors,
            n_sets: fwd.n_sets,
            extra_edges: fwd.extra_edges,
            logp_r: ctx.tape.scalar(fwd.logp.r),
            logp_ia: ctx.tape.scalar(fwd.logp.ia),
            logp_c: ctx.tape.scalar(fwd.logp.c),
            logp_ie: ctx.tape.scalar(fwd.logp.ie),
            logp_a: ctx.tape.scalar(fwd.logp.a),
            logp_total: ctx.tape.scalar(fwd.logp.total),
            trace: fwd.trace,
        }
    }
}

/// The child projections `P_S1 x` and `P_S2 x`: both keep the shared
/// first `floor(d/2)` coordinates, then the next `floor(d/4)` block for
/// the first child and the block after that for the second.
pub fn projections(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let d_s = d / 2;
    let dd = d / 4;
    let mut p1 = x[..d_s + dd].to_vec();
    let mut p2 = x[..d_s].to_vec();
    p2.extend_from_slice(&x[d_s + dd..d_s + 2 * dd]);
    debug_assert_eq!(p1.len(), p2.len());
    // shared block first, then the child-specific block
    let _ = &mut p1;
    (p1, p2)
}

/// Executes the structural unpooling steps with every decision dictated
/// by a pooling plan, bypassing sampling and parameters entirely. The
/// output carries zero-width features.
pub fn forced_unpool(pooled: &FeaturedGraph, plan: &PoolingPlan) -> Result<FeaturedGraph, UnpoolError> {
    if plan.merges.len() != pooled.n() {
        return Err(UnpoolError::BadPlan(format!(
            "plan covers {} nodes, pooled graph has {}",
            plan.merges.len(),
            pooled.n()
        )));
    }
    let split: Vec<bool> = plan.merges.iter().map(|m| matches!(m, MergeEntry::Pair(_, _))).collect();
    if !split.iter().any(|&s| s) {
        return Err(UnpoolError::BadPlan("plan splits no nodes".into()));
    }
    let mut f_single = BTreeMap::new();
    let mut f_pair = BTreeMap::new();
    let mut next = 0usize;
    for i in 0..pooled.n() {
        if split[i] {
            f_pair.insert(i, (next, next + 1));
            next += 2;
        } else {
            f_single.insert(i, next);
            next += 1;
        }
    }
    let n_out = next;
    let intra_set: BTreeSet<usize> = plan.intra.iter().copied().collect();
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    let add = |edges: &mut BTreeSet<(usize, usize)>, a: usize, b: usize| {
        debug_assert_ne!(a, b);
        edges.insert((a.min(b), a.max(b)));
    };
    for &j in &intra_set {
        let (a, b) = *f_pair
            .get(&j)
            .ok_or_else(|| UnpoolError::BadPlan(format!("intra-link on non-split node {j}")))?;
        add(&mut edges, a, b);
    }
    let nset_of = |e: (usize, usize), v: usize| -> Result<Vec<usize>, UnpoolError> {
        if let Some(&o) = f_single.get(&v) {
            return Ok(vec![o]);
        }
        let (a, b) = f_pair[&v];
        let choice = plan
            .nsets
            .iter()
            .find(|r| (r.edge.0.min(r.edge.1), r.edge.0.max(r.edge.1)) == e && r.endpoint == v)
            .map(|r| r.choice)
            .ok_or_else(|| UnpoolError::BadPlan(format!("missing N choice for edge {e:?} endpoint {v}")))?;
        Ok(match choice {
            NChoice::First => vec![a],
            NChoice::Second => vec![b],
            NChoice::Both => vec![a, b],
        })
    };
    let mut nsize: BTreeMap<((usize, usize), usize), Vec<usize>> = BTreeMap::new();
    for &e in pooled.edges() {
        let na = nset_of(e, e.0)?;
        let nb = nset_of(e, e.1)?;
        for &k in &na {
            for &l in &nb {
                add(&mut edges, k, l);
            }
        }
        nsize.insert((e, e.0), na);
        nsize.insert((e, e.1), nb);
    }
    for extra in &plan.extras {
        let e = (extra.edge.0.min(extra.edge.1), extra.edge.0.max(extra.edge.1));
        if !(split[e.0] && split[e.1]) {
            return Err(UnpoolError::BadPlan(format!("extra edge on non split-split edge {e:?}")));
        }
        let na = &nsize[&(e, e.0)];
        let nb = &nsize[&(e, e.1)];
        let complement = |node: usize, set: &[usize]| {
            let (f1, f2) = f_pair[&node];
            if set.contains(&f1) {
                f2
            } else {
                f1
            }
        };
        match na.len() + nb.len() {
            2 => {
                add(&mut edges, complement(e.0, na), complement(e.1, nb));
            }
            3 => {
                let r = extra
                    .r
                    .ok_or_else(|| UnpoolError::BadPlan("size-3 extra edge needs an r choice".into()))?;
                let (single, double) = if na.len() == 1 { (e.0, e.1) } else { (e.1, e.0) };
                let single_set = if na.len() == 1 { na } else { nb };
                let k = complement(single, single_set);
                let (d1, d2) = f_pair[&double];
                add(&mut edges, k, if r == 1 { d1 } else { d2 });
            }
            4 => {}
            _ => unreachable!(),
        }
    }
    FeaturedGraph::from_edges(n_out, edges).map_err(|e| UnpoolError::BadPlan(e.to_string()))
}

/// Output index of the original node `v` after `forced_unpool` of a plan,
/// used to compare the reconstruction with the original graph.
pub fn plan_output_index(plan: &PoolingPlan, v: usize) -> usize {
    let mut next = 0usize;
    for merge in &plan.merges {
        match merge {
            MergeEntry::Single(o) => {
                if *o == v {
                    return next;
                }
                next += 1;
            }
            MergeEntry::Pair(a, b) => {
                if *a == v {
                    return next;
                }
                if *b == v {
                    return next + 1;
                }
                next += 2;
            }
        }
    }
    panic!("node {v} not covered by plan merges");
}
