//! Featured-graph data model and the graph statistics used by the
//! evaluation metrics.
//!
//! A [`FeaturedGraph`] is an undirected graph with dense per-node and
//! per-edge feature vectors. Node indices are dense and 0-based, edges are
//! stored in canonical form (`i < j`, sorted), and the structure is
//! immutable after construction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph must have at least {min} nodes, got {got}")]
    TooFewNodes { min: usize, got: usize },
    #[error("edge ({0}, {1}) out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("node feature matrix has {rows} rows, expected {n}")]
    NodeFeatureShape { rows: usize, n: usize },
    #[error("edge feature matrix has {rows} rows, expected {m}")]
    EdgeFeatureShape { rows: usize, m: usize },
    #[error("operation requires a connected graph")]
    Disconnected,
    #[error("map is not a bijection between node sets")]
    NotABijection,
    #[error("invalid node map: {0}")]
    InvalidNodeMap(String),
    #[error("malformed graph record: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Undirected graph with node features (`n x d_x`) and edge features
/// (`m x d_w`, rows aligned with the canonical edge list; `d_w` may be 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    node_feats: Array2<f64>,
    edge_feats: Array2<f64>,
}

impl FeaturedGraph {
    /// Builds a graph, canonicalizing and deduplicating edges.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_feats: Array2<f64>,
        edge_feats: Option<Array2<f64>>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::TooFewNodes { min: 1, got: 0 });
        }
        let raw: Vec<(usize, usize)> = edges.into_iter().collect();
        let mut set = BTreeSet::new();
        for &(a, b) in &raw {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b, n));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let canon: Vec<(usize, usize)> = set.into_iter().collect();
        if node_feats.nrows() != n {
            return Err(GraphError::NodeFeatureShape { rows: node_feats.nrows(), n });
        }
        let edge_feats = match edge_feats {
            Some(w) => {
                if w.nrows() != canon.len() {
                    return Err(GraphError::EdgeFeatureShape { rows: w.nrows(), m: canon.len() });
                }
                // Deduplication invalidates row alignment unless the caller
                // passed the canonical list; reject that case explicitly.
                if canon.len() != raw.len() {
                    return Err(GraphError::Malformed(
                        "edge features supplied with duplicate or non-canonical edges".into(),
                    ));
                }
                let order: Vec<usize> = {
                    let mut keyed: Vec<(usize, (usize, usize))> = raw
                        .iter()
                        .map(|&(a, b)| (a.min(b), a.max(b)))
                        .enumerate()
                        .map(|(i, e)| (i, e))
                        .collect();
                    keyed.sort_by_key(|&(_, e)| e);
                    keyed.into_iter().map(|(i, _)| i).collect()
                };
                let mut sorted = Array2::zeros((canon.len(), w.ncols()));
                for (dst, &src) in order.iter().enumerate() {
                    sorted.row_mut(dst).assign(&w.row(src));
                }
                sorted
            }
            None => Array2::zeros((canon.len(), 0)),
        };
        Ok(Self { n, edges: canon, node_feats, edge_feats })
    }

    /// Structure-only constructor; features are zero-width.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let e: Vec<_> = edges.into_iter().collect();
        FeaturedGraph::new(n, e, Array2::zeros((n, 0)), None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Canonical sorted edge list (`i < j`).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_feats(&self) -> &Array2<f64> {
        &self.node_feats
    }

    pub fn edge_feats(&self) -> &Array2<f64> {
        &self.edge_feats
    }

    pub fn node_dim(&self) -> usize {
        self.node_feats.ncols()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_feats.ncols()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Row index of edge `{a, b}` in the canonical list.
    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        self.edges.binary_search(&(a.min(b), a.max(b))).ok()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == v {
                out.push(b);
            } else if b == v {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }
}

/// True iff every node pair is joined by a path.
pub fn is_connected(g: &FeaturedGraph) -> bool {
    let adj = g.adjacency();
    let mut seen = vec![false; g.n()];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == g.n()
}

/// `|E| / (n (n-1) / 2)`.
pub fn edge_density(g: &FeaturedGraph) -> Result<f64, GraphError> {
    if g.n() < 2 {
        return Err(GraphError::TooFewNodes { min: 2, got: g.n() });
    }
    let possible = g.n() * (g.n() - 1) / 2;
    Ok(g.edge_count() as f64 / possible as f64)
}

/// Mean local clustering coefficient; nodes of degree < 2 contribute 0.
pub fn avg_clustering(g: &FeaturedGraph) -> f64 {
    let adj = g.adjacency();
    let mut total = 0.0;
    for v in 0..g.n() {
        let nb = &adj[v];
        let deg = nb.len();
        if deg < 2 {
            continue;
        }
        let mut tri = 0usize;
        for i in 0..deg {
            for j in (i + 1)..deg {
                if g.has_edge(nb[i], nb[j]) {
                    tri += 1;
                }
            }
        }
        total += tri as f64 / (deg * (deg - 1) / 2) as f64;
    }
    total / g.n() as f64
}

/// Local vertex connectivity `kappa(s, t)`: the maximum number of
/// internally vertex-disjoint s-t paths, via unit-capacity max-flow on the
/// split-node digraph. Integer arithmetic throughout.
pub fn local_node_connectivity(g: &FeaturedGraph, s: usize, t: usize) -> usize {
    assert!(s != t && s < g.n() && t < g.n());
    // Node v becomes v_in = 2v, v_out = 2v+1. Internal arc capacity 1
    // (unbounded for the endpoints), edge arcs capacity 1 so the direct
    // s-t edge counts as exactly one path. "Unbounded" = n, which no flow
    // can exceed.
    let n = g.n();
    let inf = n as i64;
    let num = 2 * n;
    let mut cap = vec![std::collections::HashMap::<usize, i64>::new(); num];
    let add_arc = |cap: &mut Vec<std::collections::HashMap<usize, i64>>, u: usize, v: usize, c: i64| {
        *cap[u].entry(v).or_insert(0) += c;
        cap[v].entry(u).or_insert(0);
    };
    for v in 0..n {
        let c = if v == s || v == t { inf } else { 1 };
        add_arc(&mut cap, 2 * v, 2 * v + 1, c);
    }
    for &(a, b) in g.edges() {
        add_arc(&mut cap, 2 * a + 1, 2 * b, 1);
        add_arc(&mut cap, 2 * b + 1, 2 * a, 1);
    }
    let source = 2 * s + 1;
    let sink = 2 * t;
    // Edmonds-Karp.
    let mut flow = 0i64;
    loop {
        let mut prev = vec![usize::MAX; num];
        prev[source] = source;
        let mut queue = std::collections::VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            if u == sink {
                break;
            }
            for (&v, &c) in &cap[u] {
                if c > 0 && prev[v] == usize::MAX {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[sink] == usize::MAX {
            break;
        }
        let mut bottleneck = i64::MAX;
        let mut v = sink;
        while v != source {
            let u = prev[v];
            bottleneck = bottleneck.min(cap[u][&v]);
            v = u;
        }
        let mut v = sink;
        while v != source {
            let u = prev[v];
            *cap[u].get_mut(&v).unwrap() -= bottleneck;
            *cap[v].get_mut(&u).unwrap() += bottleneck;
            v = u;
        }
        flow += bottleneck;
    }
    flow as usize
}

/// Mean of `kappa(u, v)` over all unordered node pairs. Requires a
/// connected input; see [`avg_node_connectivity_tolerant`] for the
/// extension used when scoring possibly-disconnected generated graphs.
pub fn avg_node_connectivity(g: &FeaturedGraph) -> Result<f64, GraphError> {
    if g.n() < 2 {
        return Err(GraphError::TooFewNodes { min: 2, got: g.n() });
    }
    if !is_connected(g) {
        return Err(GraphError::Disconnected);
    }
    Ok(avg_node_connectivity_tolerant(g))
}

/// Mean local connectivity over all pairs, counting disconnected pairs
/// as 0 (the max-flow value). Used by the metrics pipeline where
/// adjacency-baseline samples may be disconnected.
pub fn avg_node_connectivity_tolerant(g: &FeaturedGraph) -> f64 {
    let n = g.n();
    let mut total = 0usize;
    for s in 0..n {
        for t in (s + 1)..n {
            total += local_node_connectivity(g, s, t);
        }
    }
    total as f64 / (n * (n - 1) / 2) as f64
}

/// True iff the image of `g1`'s edge set under `map` equals `g2`'s edge
/// set. `map[i]` is the node of `g2` corresponding to node `i` of `g1`;
/// features are ignored.
pub fn equal_under_map(g1: &FeaturedGraph, g2: &FeaturedGraph, map: &[usize]) -> Result<bool, GraphError> {
    if map.len() != g1.n() || g1.n() != g2.n() {
        return Err(GraphError::NotABijection);
    }
    let mut seen = vec![false; g2.n()];
    for &m in map {
        if m >= g2.n() || seen[m] {
            return Err(GraphError::NotABijection);
        }
        seen[m] = true;
    }
    if g1.edge_count() != g2.edge_count() {
        return Ok(false);
    }
    for &(a, b) in g1.edges() {
        if !g2.has_edge(map[a], map[b]) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Output-side node assignment of an unpooling step: static nodes map to a
/// single index, split nodes to an ordered child pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMap {
    static_map: Vec<(usize, usize)>,
    split_map: Vec<(usize, (usize, usize))>,
}

impl NodeMap {
    pub fn new(
        static_map: Vec<(usize, usize)>,
        split_map: Vec<(usize, (usize, usize))>,
    ) -> Result<Self, GraphError> {
        let n_in = static_map.len() + split_map.len();
        let n_out = static_map.len() + 2 * split_map.len();
        let mut in_seen = vec![false; n_in];
        let mut out_seen = vec![false; n_out];
        let mut mark_in = |i: usize| -> Result<(), GraphError> {
            if i >= n_in || in_seen[i] {
                return Err(GraphError::InvalidNodeMap(format!("bad input index {i}")));
            }
            in_seen[i] = true;
            Ok(())
        };
        for &(i, _) in &static_map {
            mark_in(i)?;
        }
        for &(i, _) in &split_map {
            mark_in(i)?;
        }
        let mut mark_out = |o: usize| -> Result<(), GraphError> {
            if o >= n_out || out_seen[o] {
                return Err(GraphError::InvalidNodeMap(format!("bad output index {o}")));
            }
            out_seen[o] = true;
            Ok(())
        };
        for &(_, o) in &static_map {
            mark_out(o)?;
        }
        for &(_, (a, b)) in &split_map {
            mark_out(a)?;
            mark_out(b)?;
        }
        Ok(Self { static_map, split_map })
    }

    pub fn input_len(&self) -> usize {
        self.static_map.len() + self.split_map.len()
    }

    pub fn output_len(&self) -> usize {
        self.static_map.len() + 2 * self.split_map.len()
    }

    /// Output index of a static input node.
    pub fn image(&self, i: usize) -> Option<usize> {
        self.static_map.iter().find(|&&(k, _)| k == i).map(|&(_, v)| v)
    }

    /// Ordered children of a split input node.
    pub fn children(&self, i: usize) -> Option<(usize, usize)> {
        self.split_map.iter().find(|&&(k, _)| k == i).map(|&(_, v)| v)
    }

    pub fn is_split(&self, i: usize) -> bool {
        self.children(i).is_some()
    }

    /// All output images of input node `i` (one or two indices).
    pub fn images(&self, i: usize) -> Vec<usize> {
        if let Some(o) = self.image(i) {
            vec![o]
        } else if let Some((a, b)) = self.children(i) {
            vec![a, b]
        } else {
            vec![]
        }
    }

    pub fn split_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.split_map.iter().map(|&(i, _)| i)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    logp: Option<f64>,
}

/// Serializes one graph as a JSON line:
/// `{"n": .., "edges": [[i,j],..], "x": [[..],..], "w": [[..],..]}`,
/// with `w` aligned to `edges` and omitted when `d_w = 0`. An optional
/// `logp` field carries the sampling log-probability.
pub fn to_json_line(g: &FeaturedGraph, logp: Option<f64>) -> String {
    let rec = GraphRecord {
        n: g.n(),
        edges: g.edges().iter().map(|&(a, b)| [a, b]).collect(),
        x: g.node_feats().rows().into_iter().map(|r| r.to_vec()).collect(),
        w: if g.edge_dim() == 0 {
            None
        } else {
            Some(g.edge_feats().rows().into_iter().map(|r| r.to_vec()).collect())
        },
        logp,
    };
    serde_json::to_string(&rec).expect("graph record serialization cannot fail")
}

pub fn from_json_line(line: &str) -> Result<FeaturedGraph, GraphError> {
    let rec: GraphRecord =
        serde_json::from_str(line).map_err(|e| GraphError::Malformed(e.to_string()))?;
    let d = rec.x.first().map(|r| r.len()).unwrap_or(0);
    if rec.x.len() != rec.n || rec.x.iter().any(|r| r.len() != d) {
        return Err(GraphError::Malformed("node feature rows inconsistent".into()));
    }
    let flat: Vec<f64> = rec.x.iter().flatten().copied().collect();
    let x = Array2::from_shape_vec((rec.n, d), flat)
        .map_err(|e| GraphError::Malformed(e.to_string()))?;
    let w = match rec.w {
        None => None,
        Some(rows) => {
            let dw = rows.first().map(|r| r.len()).unwrap_or(0);
            if rows.len() != rec.edges.len() || rows.iter().any(|r| r.len() != dw) {
                return Err(GraphError::Malformed("edge feature rows inconsistent".into()));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Some(
                Array2::from_shape_vec((rec.edges.len(), dw), flat)
                    .map_err(|e| GraphError::Malformed(e.to_string()))?,
            )
        }
    };
    FeaturedGraph::new(rec.n, rec.edges.iter().map(|e| (e[0], e[1])), x, w)
}

pub fn write_jsonl<W: Write>(out: &mut W, graphs: &[FeaturedGraph]) -> Result<(), GraphError> {
    for g in graphs {
        writeln!(out, "{}", to_json_line(g, None))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<FeaturedGraph>, GraphError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_json_line(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn triangle() -> FeaturedGraph {
        FeaturedGraph::from_edges(3, [(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    fn path(n: usize) -> FeaturedGraph {
        FeaturedGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    fn cycle(n: usize) -> FeaturedGraph {
        FeaturedGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap()
    }

    fn complete(n: usize) -> FeaturedGraph {
        let mut e = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                e.push((i, j));
            }
        }
        FeaturedGraph::from_edges(n, e).unwrap()
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let g = FeaturedGraph::from_edges(3, [(1, 0), (0, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_self_loops_and_range() {
        assert!(FeaturedGraph::from_edges(3, [(1, 1)]).is_err());
        assert!(FeaturedGraph::from_edges(3, [(0, 3)]).is_err());
    }

    #[test]
    fn connectivity_examples() {
        assert!(is_connected(&triangle()));
        let two = FeaturedGraph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert!(!is_connected(&two));
        assert!(is_connected(&path(5)));
    }

    #[test]
    fn edge_density_examples() {
        assert_eq!(edge_density(&triangle()).unwrap(), 1.0);
        assert_eq!(edge_density(&path(3)).unwrap(), 2.0 / 3.0);
        // 5-cycle: 5 edges of C(5,2) = 10.
        assert_eq!(edge_density(&cycle(5)).unwrap(), 0.5);
        assert!(edge_density(&FeaturedGraph::from_edges(1, []).unwrap()).is_err());
    }

    #[test]
    fn clustering_examples() {
        assert_eq!(avg_clustering(&triangle()), 1.0);
        let star = FeaturedGraph::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(avg_clustering(&star), 0.0);
        // Triangle with a pendant on node 0. Per-node triangle counts:
        // node 0 has degree 3, one triangle among 3 neighbor pairs -> 1/3;
        // nodes 1 and 2 have degree 2 with their neighbor pair linked -> 1;
        // the pendant has degree 1 -> 0. Mean = (1/3 + 1 + 1 + 0)/4.
        let g = FeaturedGraph::from_edges(4, [(0, 1), (1, 2), (0, 2), (0, 3)]).unwrap();
        let expect = (1.0 / 3.0 + 1.0 + 1.0) / 4.0;
        assert!((avg_clustering(&g) - expect).abs() < 1e-12);
    }

    #[test]
    fn node_connectivity_examples() {
        assert_eq!(avg_node_connectivity(&complete(4)).unwrap(), 3.0);
        assert_eq!(avg_node_connectivity(&path(4)).unwrap(), 1.0);
        assert_eq!(avg_node_connectivity(&cycle(4)).unwrap(), 2.0);
        let two = FeaturedGraph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert!(avg_node_connectivity(&two).is_err());
    }

    #[test]
    fn complete_graphs_have_connectivity_n_minus_1() {
        for n in 2..=6 {
            assert_eq!(avg_node_connectivity(&complete(n)).unwrap(), (n - 1) as f64);
        }
    }

    /// Brute-force oracle: maximum set of pairwise internally-disjoint
    /// simple s-t paths, by backtracking over the enumerated path list.
    fn disjoint_paths_oracle(g: &FeaturedGraph, s: usize, t: usize) -> usize {
        fn enumerate(
            g: &FeaturedGraph,
            cur: usize,
            t: usize,
            visited: &mut Vec<bool>,
            trail: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if cur == t {
                out.push(trail.clone());
                return;
            }
            for nb in g.neighbors(cur) {
                if !visited[nb] {
                    visited[nb] = true;
                    trail.push(nb);
                    enumerate(g, nb, t, visited, trail, out);
                    trail.pop();
                    visited[nb] = false;
                }
            }
        }
        let mut paths = Vec::new();
        let mut visited = vec![false; g.n()];
        visited[s] = true;
        enumerate(g, s, t, &mut visited, &mut vec![s], &mut paths);
        fn interior(p: &[usize]) -> &[usize] {
            &p[1..p.len() - 1]
        }
        fn best(paths: &[Vec<usize>], from: usize, used: &mut Vec<bool>) -> usize {
            let mut top = 0;
            for i in from..paths.len() {
                if interior(&paths[i]).iter().any(|&v| used[v]) {
                    continue;
                }
                for &v in interior(&paths[i]) {
                    used[v] = true;
                }
                top = top.max(1 + best(paths, i + 1, used));
                for &v in interior(&paths[i]) {
                    used[v] = false;
                }
            }
            top
        }
        best(&paths, 0, &mut vec![false; g.n()])
    }

    #[test]
    fn maxflow_matches_bruteforce_on_small_graphs() {
        let mut rng = 12345u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as usize
        };
        let mut tested = 0;
        while tested < 40 {
            let n = 4 + next() % 4; // 4..=7
            let mut edges = Vec::new();
            for v in 1..n {
                edges.push((v, next() % v)); // random tree keeps it connected
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    if next() % 100 < 35 {
                        edges.push((i, j));
                    }
                }
            }
            let g = FeaturedGraph::from_edges(n, edges).unwrap();
            for s in 0..n {
                for t in (s + 1)..n {
                    assert_eq!(
                        local_node_connectivity(&g, s, t),
                        disjoint_paths_oracle(&g, s, t),
                        "disagreement on {:?} pair ({s},{t})",
                        g.edges()
                    );
                }
            }
            tested += 1;
        }
    }

    #[test]
    fn pairwise_connectivity_bounded_by_endpoint_degrees() {
        // kappa(u, v) <= min(deg u, deg v) for every pair. (The average is
        // NOT bounded by the minimum degree: this very graph has min
        // degree 2 but kappa(0, 2) = 3.)
        let g = FeaturedGraph::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]).unwrap();
        for u in 0..5 {
            for v in (u + 1)..5 {
                assert!(local_node_connectivity(&g, u, v) <= g.degree(u).min(g.degree(v)));
            }
        }
        assert_eq!(local_node_connectivity(&g, 0, 2), 3);
    }

    #[test]
    fn equal_under_map_examples() {
        let g = path(3);
        assert!(equal_under_map(&g, &g, &[0, 1, 2]).unwrap());
        assert!(equal_under_map(&g, &g, &[2, 1, 0]).unwrap()); // reversal is a symmetry
        assert!(!equal_under_map(&triangle(), &path(3), &[0, 1, 2]).unwrap());
        assert!(equal_under_map(&g, &g, &[0, 0, 1]).is_err());
    }

    #[test]
    fn node_map_validates_domains() {
        let m = NodeMap::new(vec![(0, 0)], vec![(1, (1, 2))]).unwrap();
        assert_eq!(m.image(0), Some(0));
        assert_eq!(m.children(1), Some((1, 2)));
        assert_eq!(m.output_len(), 3);
        assert!(NodeMap::new(vec![(0, 0), (0, 1)], vec![]).is_err());
        assert!(NodeMap::new(vec![(0, 0)], vec![(1, (0, 1))]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let g = FeaturedGraph::new(
            3,
            vec![(0, 1), (1, 2)],
            arr2(&[[0.25, 1.5], [0.5, -2.0], [1.0 / 3.0, 0.0]]),
            Some(arr2(&[[0.125], [7.0]])),
        )
        .unwrap();
        let line = to_json_line(&g, None);
        let back = from_json_line(&line).unwrap();
        assert_eq!(g, back);

        let bare = FeaturedGraph::from_edges(2, [(0, 1)]).unwrap();
        let line = to_json_line(&bare, Some(-1.5));
        assert!(!line.contains("\"w\""));
        assert_eq!(from_json_line(&line).unwrap(), bare);
    }
}
