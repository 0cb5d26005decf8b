//! Constructive pooling oracle: the executable inverse of the unpooling
//! layer.
//!
//! An eligible set pairs up nodes joined by paths of length at most 2;
//! pooling merges each pair into one node that inherits the outside
//! neighbors. For any pooling step there is a forced unpooling that
//! reconstructs the original graph; [`derive_unpool_plan`] builds that
//! plan (including the 15-case table for edges between two pairs), and
//! [`pooling_chain`] iterates pooling down to a 3-node graph in
//! `ceil(log2(n/3))` steps.

use crate::graph::{equal_under_map, is_connected, FeaturedGraph};
use crate::unpool::{forced_unpool, plan_output_index, NChoice};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("graph must be connected")]
    Disconnected,
    #[error("graph must have at least {0} nodes")]
    TooSmall(usize),
    #[error("set is not eligible: {0}")]
    Ineligible(String),
    #[error("plan replay failed: {0}")]
    Replay(String),
}

/// Disjoint node pairs, each joined by a path of length at most 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleSet {
    pub pairs: Vec<(usize, usize)>,
}

/// Checks the eligibility predicate: all 2|S| nodes distinct, every pair
/// adjacent or sharing a common neighbor.
pub fn is_eligible(g: &FeaturedGraph, pairs: &[(usize, usize)]) -> bool {
    let mut seen = vec![false; g.n()];
    for &(a, b) in pairs {
        if a == b || a >= g.n() || b >= g.n() || seen[a] || seen[b] {
            return false;
        }
        seen[a] = true;
        seen[b] = true;
        if !g.has_edge(a, b) {
            let nb = g.neighbors(a);
            if !g.neighbors(b).iter().any(|k| nb.contains(k)) {
                return false;
            }
        }
    }
    true
}

/// Finds an eligible set of exactly `floor(n/2)` pairs for a connected
/// graph. For odd n the lowest-index node whose removal keeps the graph
/// connected (a spanning-tree leaf) is left unpaired. Pairing works on a
/// BFS spanning tree: repeatedly take the deepest remaining leaf and pair
/// it with a leaf sibling if one exists (path of length 2 through the
/// parent), otherwise with its parent (a tree edge); both cases keep the
/// remaining tree connected, so the construction never gets stuck.
pub fn find_eligible_set(g: &FeaturedGraph) -> Result<EligibleSet, OracleError> {
    if g.n() < 2 {
        return Err(OracleError::TooSmall(2));
    }
    if !is_connected(g) {
        return Err(OracleError::Disconnected);
    }
    let n = g.n();
    let adj = g.adjacency();
    let mut active = vec![true; n];
    if n % 2 == 1 {
        let removable = (0..n)
            .find(|&v| {
                // connected after removing v
                let mut seen = vec![false; n];
                let start = (0..n).find(|&s| s != v).unwrap();
                seen[v] = true;
                seen[start] = true;
                let mut stack = vec![start];
                let mut count = 1;
                while let Some(u) = stack.pop() {
                    for &w in &adj[u] {
                        if !seen[w] {
                            seen[w] = true;
                            count += 1;
                            stack.push(w);
                        }
                    }
                }
                count == n - 1
            })
            .expect("every connected graph has a non-cut vertex");
        active[removable] = false;
    }

    // BFS spanning tree over the active nodes, neighbors in index order.
    let root = (0..n).find(|&v| active[v]).unwrap();
    let mut parent = vec![usize::MAX; n];
    let mut depth = vec![0usize; n];
    let mut order = Vec::new();
    let mut queue = VecDeque::from([root]);
    let mut visited = vec![false; n];
    visited[root] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &adj[u] {
            if active[v] && !visited[v] {
                visited[v] = true;
                parent[v] = u;
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut child_count = vec![0usize; n];
    for &v in &order {
        if parent[v] != usize::MAX {
            child_count[parent[v]] += 1;
        }
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &v in &order {
        if parent[v] != usize::MAX {
            children[parent[v]].push(v);
        }
    }

    let mut pairs = Vec::new();
    let mut remaining = order.len();
    let mut alive = active.clone();
    while remaining >= 2 {
        // deepest alive leaf, lowest index on ties
        let u = (0..n)
            .filter(|&v| alive[v] && child_count[v] == 0)
            .max_by(|&a, &b| depth[a].cmp(&depth[b]).then(b.cmp(&a)))
            .expect("nonempty tree has a leaf");
        let p = parent[u];
        let sibling = if p == usize::MAX {
            None
        } else {
            children[p].iter().copied().find(|&w| w != u && alive[w] && child_count[w] == 0)
        };
        let (a, b) = match sibling {
            Some(w) => (u.min(w), u.max(w)),
            None => {
                debug_assert_ne!(p, usize::MAX, "even active count cannot strand the root");
                (u.min(p), u.max(p))
            }
        };
        for v in [a, b] {
            alive[v] = false;
            if parent[v] != usize::MAX && alive[parent[v]] {
                child_count[parent[v]] -= 1;
            }
        }
        pairs.push((a, b));
        remaining -= 2;
    }
    debug_assert!(is_eligible(g, &pairs));
    debug_assert_eq!(pairs.len(), g.n() / 2);
    Ok(EligibleSet { pairs })
}

/// How one pooled node relates to the original graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeEntry {
    Single(usize),
    /// Merged pair; the first member becomes child 1 on unpooling.
    Pair(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNSet {
    pub edge: (usize, usize),
    pub endpoint: usize,
    pub choice: NChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanExtra {
    pub edge: (usize, usize),
    /// Child of the size-2 endpoint for the {1,2} case; `None` when both
    /// N sets are singletons (the complement edge is implied).
    pub r: Option<u8>,
}

/// A pooled graph together with the forced decisions whose unpooling
/// reconstructs the original graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingPlan {
    pub pooled_n: usize,
    pub pooled_edges: Vec<(usize, usize)>,
    pub merges: Vec<MergeEntry>,
    pub intra: Vec<usize>,
    pub nsets: Vec<PlanNSet>,
    pub extras: Vec<PlanExtra>,
}

impl PoolingPlan {
    pub fn pooled_graph(&self) -> FeaturedGraph {
        FeaturedGraph::from_edges(self.pooled_n, self.pooled_edges.iter().copied())
            .expect("pooled structure is well-formed")
    }

    /// Bijection original node -> reconstructed node index.
    pub fn reconstruction_map(&self, original_n: usize) -> Vec<usize> {
        (0..original_n).map(|v| plan_output_index(self, v)).collect()
    }
}

/// Merges each eligible pair into a fresh node inheriting the union of
/// outside neighbors; intra-pair edges vanish. Pooled node order follows
/// the position of each merge's first-seen original node.
pub fn pool(g: &FeaturedGraph, s: &EligibleSet) -> Result<(FeaturedGraph, Vec<MergeEntry>), OracleError> {
    if !is_eligible(g, &s.pairs) {
        return Err(OracleError::Ineligible(format!("{:?}", s.pairs)));
    }
    let n = g.n();
    let mut pair_of = vec![usize::MAX; n];
    for (idx, &(a, b)) in s.pairs.iter().enumerate() {
        pair_of[a] = idx;
        pair_of[b] = idx;
    }
    let mut merges = Vec::new();
    let mut pooled_of = vec![usize::MAX; n];
    for v in 0..n {
        if pooled_of[v] != usize::MAX {
            continue;
        }
        if pair_of[v] == usize::MAX {
            pooled_of[v] = merges.len();
            merges.push(MergeEntry::Single(v));
        } else {
            let (a, b) = s.pairs[pair_of[v]];
            pooled_of[a] = merges.len();
            pooled_of[b] = merges.len();
            merges.push(MergeEntry::Pair(a, b));
        }
    }
    let mut edges = std::collections::BTreeSet::new();
    for &(a, b) in g.edges() {
        let (pa, pb) = (pooled_of[a], pooled_of[b]);
        if pa != pb {
            edges.insert((pa.min(pb), pa.max(pb)));
        }
    }
    let pooled = FeaturedGraph::from_edges(merges.len(), edges)
        .map_err(|e| OracleError::Ineligible(e.to_string()))?;
    Ok((pooled, merges))
}

/// The 15-case table: which N sets and optional extra edge reproduce a
/// given nonempty edge subset between two merged pairs. The mask bits
/// are (i_r,i_s), (i_r,j_s), (j_r,i_s), (j_r,j_s).
fn pair_pair_case(mask: u8) -> (NChoice, NChoice, Option<Option<u8>>) {
    use NChoice::*;
    match mask {
        0b0001 => (First, First, None),
        0b0010 => (First, Second, None),
        0b0100 => (Second, First, None),
        0b1000 => (Second, Second, None),
        0b0011 => (First, Both, None),
        0b1100 => (Second, Both, None),
        0b0101 => (Both, First, None),
        0b1010 => (Both, Second, None),
        0b1001 => (First, First, Some(None)),
        0b0110 => (First, Second, Some(None)),
        0b0111 => (Both, First, Some(Some(1))),
        0b1101 => (Both, First, Some(Some(2))),
        0b1011 => (Both, Second, Some(Some(1))),
        0b1110 => (Both, Second, Some(Some(2))),
        0b1111 => (Both, Both, None),
        _ => unreachable!("pooled edge implies a nonempty edge subset"),
    }
}

/// Builds the pooling plan whose forced unpooling maps `pool(g, s)` back
/// to `g` (up to the merge-induced relabeling).
pub fn derive_unpool_plan(g: &FeaturedGraph, s: &EligibleSet) -> Result<PoolingPlan, OracleError> {
    let (pooled, merges) = pool(g, s)?;
    let mut intra = Vec::new();
    for (p, merge) in merges.iter().enumerate() {
        if let MergeEntry::Pair(a, b) = merge {
            if g.has_edge(*a, *b) {
                intra.push(p);
            }
        }
    }
    let mut nsets = Vec::new();
    let mut extras = Vec::new();
    for &(pa, pb) in pooled.edges() {
        match (merges[pa], merges[pb]) {
            (MergeEntry::Single(_), MergeEntry::Single(_)) => {}
            (MergeEntry::Pair(i, j), MergeEntry::Single(k)) => {
                let choice = match (g.has_edge(i, k), g.has_edge(j, k)) {
                    (true, false) => NChoice::First,
                    (false, true) => NChoice::Second,
                    (true, true) => NChoice::Both,
                    (false, false) => unreachable!("pooled edge without source edges"),
                };
                nsets.push(PlanNSet { edge: (pa, pb), endpoint: pa, choice });
            }
            (MergeEntry::Single(k), MergeEntry::Pair(i, j)) => {
                let choice = match (g.has_edge(i, k), g.has_edge(j, k)) {
                    (true, false) => NChoice::First,
                    (false, true) => NChoice::Second,
                    (true, true) => NChoice::Both,
                    (false, false) => unreachable!("pooled edge without source edges"),
                };
                nsets.push(PlanNSet { edge: (pa, pb), endpoint: pb, choice });
            }
            (MergeEntry::Pair(ir, jr), MergeEntry::Pair(is, js)) => {
                let mask = (g.has_edge(ir, is) as u8)
                    | ((g.has_edge(ir, js) as u8) << 1)
                    | ((g.has_edge(jr, is) as u8) << 2)
                    | ((g.has_edge(jr, js) as u8) << 3);
                let (cr, cs, extra) = pair_pair_case(mask);
                nsets.push(PlanNSet { edge: (pa, pb), endpoint: pa, choice: cr });
                nsets.push(PlanNSet { edge: (pa, pb), endpoint: pb, choice: cs });
                if let Some(r) = extra {
                    extras.push(PlanExtra { edge: (pa, pb), r });
                }
            }
        }
    }
    Ok(PoolingPlan {
        pooled_n: pooled.n(),
        pooled_edges: pooled.edges().to_vec(),
        merges,
        intra,
        nsets,
        extras,
    })
}

/// Checks `forced_unpool(pool(g, s), plan) == g` under the merge
/// bijection.
pub fn verify_plan_roundtrip(g: &FeaturedGraph, plan: &PoolingPlan) -> Result<bool, OracleError> {
    let rec = forced_unpool(&plan.pooled_graph(), plan).map_err(|e| OracleError::Replay(e.to_string()))?;
    let map = plan.reconstruction_map(g.n());
    equal_under_map(g, &rec, &map).map_err(|e| OracleError::Replay(e.to_string()))
}

/// Successive pooling plans taking `g` down to a 3-node graph: pool with
/// a maximal eligible set while more than 6 nodes remain, then one last
/// pooling with `n - 3` pairs.
pub fn pooling_chain(g: &FeaturedGraph) -> Result<Vec<PoolingPlan>, OracleError> {
    if g.n() < 3 {
        return Err(OracleError::TooSmall(3));
    }
    if !is_connected(g) {
        return Err(OracleError::Disconnected);
    }
    let mut steps = Vec::new();
    let mut cur = FeaturedGraph::from_edges(g.n(), g.edges().iter().copied()).unwrap();
    while cur.n() > 3 {
        let full = find_eligible_set(&cur)?;
        let take = if cur.n() > 6 { full.pairs.len() } else { cur.n() - 3 };
        let s = EligibleSet { pairs: full.pairs[..take].to_vec() };
        let plan = derive_unpool_plan(&cur, &s)?;
        cur = plan.pooled_graph();
        steps.push(plan);
    }
    Ok(steps)
}

/// `ceil(log2(n/3))`: the chain-length bound (0 for n = 3).
pub fn chain_length_bound(n: usize) -> usize {
    assert!(n >= 3);
    let mut k = 0;
    let mut cap = 3usize;
    while cap < n {
        cap *= 2;
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> FeaturedGraph {
        FeaturedGraph::from_edges(n, edges.iter().copied()).unwrap()
    }

    fn random_connected(n: usize, extra_p: f64, rng: &mut impl Rng) -> FeaturedGraph {
        let mut edges = Vec::new();
        for v in 1..n {
            edges.push((v, rng.gen_range(0..v)));
        }
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.gen::<f64>() < extra_p {
                    edges.push((a, b));
                }
            }
        }
        graph(n, &edges)
    }

    /// Brute force: does ANY perfect eligible pairing exist?
    fn bruteforce_pairing_exists(g: &FeaturedGraph, active: Vec<usize>) -> bool {
        if active.is_empty() {
            return true;
        }
        let a = active[0];
        for (pos, &b) in active.iter().enumerate().skip(1) {
            let close = g.has_edge(a, b)
                || g.neighbors(a).iter().any(|k| g.neighbors(b).contains(k));
            if close {
                let mut rest = active.clone();
                rest.remove(pos);
                rest.remove(0);
                if bruteforce_pairing_exists(g, rest) {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn single_edge_pairs_the_two_nodes() {
        let g = graph(2, &[(0, 1)]);
        let s = find_eligible_set(&g).unwrap();
        assert_eq!(s.pairs, vec![(0, 1)]);
    }

    #[test]
    fn path_four_gets_two_eligible_pairs() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = find_eligible_set(&g).unwrap();
        assert_eq!(s.pairs.len(), 2);
        assert!(is_eligible(&g, &s.pairs));
        assert!(bruteforce_pairing_exists(&g, (0..4).collect()));
    }

    #[test]
    fn five_cycle_pairs_four_nodes() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let s = find_eligible_set(&g).unwrap();
        assert_eq!(s.pairs.len(), 2);
        assert!(is_eligible(&g, &s.pairs));
    }

    #[test]
    fn eligible_sets_exist_for_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..200 {
            let n = 2 + trial % 13;
            let g = random_connected(n, 0.15, &mut rng);
            let s = find_eligible_set(&g).unwrap();
            assert_eq!(s.pairs.len(), n / 2, "n = {n}");
            assert!(is_eligible(&g, &s.pairs), "graph {:?} pairs {:?}", g.edges(), s.pairs);
        }
    }

    #[test]
    fn pooling_examples() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = EligibleSet { pairs: vec![(0, 1), (2, 3)] };
        let (pooled, merges) = pool(&g, &s).unwrap();
        assert_eq!(pooled.n(), 2);
        assert_eq!(pooled.edge_count(), 1);
        assert_eq!(merges, vec![MergeEntry::Pair(0, 1), MergeEntry::Pair(2, 3)]);

        let tri = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let s = EligibleSet { pairs: vec![(0, 1)] };
        let (pooled, _) = pool(&tri, &s).unwrap();
        assert_eq!((pooled.n(), pooled.edge_count()), (2, 1));

        let empty = EligibleSet { pairs: vec![] };
        let (same, _) = pool(&g, &empty).unwrap();
        assert_eq!(same.edges(), g.edges());

        let bad = EligibleSet { pairs: vec![(0, 3)] }; // distance 3
        assert!(pool(&g, &bad).is_err());
    }

    #[test]
    fn pair_pair_single_edge_case() {
        // pairs (0,1) and (2,3); only edge {0,2} between them; pair edges
        // keep the graph connected
        let g = graph(4, &[(0, 1), (2, 3), (0, 2)]);
        let s = EligibleSet { pairs: vec![(0, 1), (2, 3)] };
        let plan = derive_unpool_plan(&g, &s).unwrap();
        assert_eq!(plan.intra, vec![0, 1]);
        assert_eq!(plan.nsets.len(), 2);
        assert!(plan
            .nsets
            .iter()
            .all(|r| r.choice == NChoice::First));
        assert!(plan.extras.is_empty());
        assert!(verify_plan_roundtrip(&g, &plan).unwrap());
    }

    #[test]
    fn pair_pair_all_four_edges_case() {
        let g = graph(4, &[(0, 1), (2, 3), (0, 2), (0, 3), (1, 2), (1, 3)]);
        let s = EligibleSet { pairs: vec![(0, 1), (2, 3)] };
        let plan = derive_unpool_plan(&g, &s).unwrap();
        assert!(plan.nsets.iter().all(|r| r.choice == NChoice::Both));
        assert!(plan.extras.is_empty());
        assert!(verify_plan_roundtrip(&g, &plan).unwrap());
    }

    #[test]
    fn pair_pair_antidiagonal_case_adds_extra_edge() {
        // edge set {{i_r, j_s}, {j_r, i_s}} = {{0,3},{1,2}}
        let g = graph(4, &[(0, 1), (2, 3), (0, 3), (1, 2)]);
        let s = EligibleSet { pairs: vec![(0, 1), (2, 3)] };
        let plan = derive_unpool_plan(&g, &s).unwrap();
        assert_eq!(plan.nsets.len(), 2);
        assert_eq!(plan.nsets[0].choice, NChoice::First);
        assert_eq!(plan.nsets[1].choice, NChoice::Second);
        assert_eq!(plan.extras, vec![PlanExtra { edge: (0, 1), r: None }]);
        assert!(verify_plan_roundtrip(&g, &plan).unwrap());
    }

    #[test]
    fn all_fifteen_pair_pair_cases_round_trip() {
        for mask in 1u8..16 {
            let mut edges = vec![(0, 1), (2, 3), (0, 4), (4, 2)]; // keep connected via node 4
            if mask & 1 != 0 {
                edges.push((0, 2));
            }
            if mask & 2 != 0 {
                edges.push((0, 3));
            }
            if mask & 4 != 0 {
                edges.push((1, 2));
            }
            if mask & 8 != 0 {
                edges.push((1, 3));
            }
            let g = graph(5, &edges);
            let s = EligibleSet { pairs: vec![(0, 1), (2, 3)] };
            let plan = derive_unpool_plan(&g, &s).unwrap();
            assert!(verify_plan_roundtrip(&g, &plan).unwrap(), "mask {mask:#06b}");
        }
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        for trial in 0..300 {
            let n = 4 + trial % 13; // 4..=16
            let g = random_connected(n, 0.2, &mut rng);
            let s = find_eligible_set(&g).unwrap();
            let plan = derive_unpool_plan(&g, &s).unwrap();
            assert!(verify_plan_roundtrip(&g, &plan).unwrap(), "trial {trial}: {:?}", g.edges());
        }
    }

    #[test]
    fn chain_lengths_match_the_bound() {
        assert_eq!(chain_length_bound(3), 0);
        assert_eq!(chain_length_bound(12), 2);
        assert_eq!(chain_length_bound(24), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let tri = graph(3, &[(0, 1), (1, 2)]);
        assert!(pooling_chain(&tri).unwrap().is_empty());
        for &n in &[4, 5, 6, 7, 9, 12, 16, 24, 33] {
            let g = random_connected(n, 0.1, &mut rng);
            let chain = pooling_chain(&g).unwrap();
            assert_eq!(chain.len(), chain_length_bound(n), "n = {n}");
            // every step reconstructs its input, and intermediates stay connected
            let mut cur = FeaturedGraph::from_edges(g.n(), g.edges().iter().copied()).unwrap();
            for plan in &chain {
                assert!(verify_plan_roundtrip(&cur, plan).unwrap());
                cur = plan.pooled_graph();
                assert!(is_connected(&cur));
            }
            assert_eq!(cur.n(), 3);
        }
    }

    #[test]
    fn plan_serialization_round_trips() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let s = find_eligible_set(&g).unwrap();
        let plan = derive_unpool_plan(&g, &s).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: PoolingPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(plan, back);
    }
}
