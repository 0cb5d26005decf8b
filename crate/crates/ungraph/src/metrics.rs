//! Waxman dataset synthesis and distribution-distance evaluation.
//!
//! Generated and reference graph sets are compared through four graph
//! properties (edge density, average clustering, average node
//! connectivity, node features), each scored with a histogram KL
//! divergence and an exact empirical 1-d Wasserstein distance.

use crate::graph::{
    avg_clustering, avg_node_connectivity_tolerant, edge_density, FeaturedGraph, GraphError,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("node feature dimensions differ: {0} vs {1}")]
    FeatureDims(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// How the Waxman edge probability treats distance.
///
/// `MaxPairwise` is the dataset convention `q * exp(-d / (s * L))` with
/// `L` the maximum pairwise distance of the sampled points (this is what
/// reproduces the reference dataset statistics); `Literal` is the plain
/// `q * exp(-s * d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceScaling {
    MaxPairwise,
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaxmanConfig {
    pub n_graphs: usize,
    pub nodes: usize,
    pub q: f64,
    pub s: f64,
    pub min_component: usize,
    pub seed: u64,
    pub scaling: DistanceScaling,
}

impl Default for WaxmanConfig {
    fn default() -> Self {
        WaxmanConfig {
            n_graphs: 20_000,
            nodes: 12,
            q: 0.65,
            s: 0.3,
            min_component: 5,
            seed: 0,
            scaling: DistanceScaling::MaxPairwise,
        }
    }
}

/// Edge probability for node distance `d`; `l_max` is the maximum
/// pairwise distance in the graph being built.
pub fn waxman_edge_prob(q: f64, s: f64, d: f64, l_max: f64, scaling: DistanceScaling) -> f64 {
    match scaling {
        DistanceScaling::Literal => q * (-s * d).exp(),
        DistanceScaling::MaxPairwise => q * (-d / (s * l_max)).exp(),
    }
}

/// Samples Waxman graphs: uniform points in the unit square, Bernoulli
/// edges, keep the largest connected component when it has at least
/// `min_component` nodes (features are the retained coordinates).
pub fn waxman_generate(cfg: &WaxmanConfig) -> Vec<FeaturedGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;
    let mut out = Vec::new();
    for _ in 0..cfg.n_graphs {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let mut l_max = 0.0f64;
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                dist[i * n + j] = d;
                l_max = l_max.max(d);
            }
        }
        let mut adj = vec![false; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let p = waxman_edge_prob(cfg.q, cfg.s, dist[i * n + j], l_max, cfg.scaling);
                if rng.gen::<f64>() < p {
                    adj[i * n + j] = true;
                    adj[j * n + i] = true;
                }
            }
        }
        // largest connected component, earliest root wins ties
        let mut comp = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            comp[s] = id;
            let mut stack = vec![s];
            let mut size = 1;
            while let Some(u) = stack.pop() {
                for v in 0..n {
                    if adj[u * n + v] && comp[v] == usize::MAX {
                        comp[v] = id;
                        size += 1;
                        stack.push(v);
                    }
                }
            }
            sizes.push(size);
        }
        let best = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        if sizes[best] < cfg.min_component {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&v| comp[v] == best).collect();
        let index_of = |v: usize| members.iter().position(|&m| m == v).unwrap();
        let mut edges = Vec::new();
        for &i in &members {
            for &j in &members {
                if i < j && adj[i * n + j] {
                    edges.push((index_of(i), index_of(j)));
                }
            }
        }
        let x = Array2::from_shape_fn((members.len(), 2), |(r, c)| {
            if c == 0 {
                pts[members[r]].0
            } else {
                pts[members[r]].1
            }
        });
        out.push(FeaturedGraph::new(members.len(), edges, x, None).expect("valid waxman graph"));
    }
    out
}

pub const KL_BINS: usize = 20;
pub const KL_SMOOTHING: f64 = 1e-10;

/// Histogram KL divergence KL(A || B): `KL_BINS` uniform bins over the
/// pooled min-max range, additive smoothing on both histograms before
/// normalizing, clamped to be nonnegative.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(0.0);
    }
    let width = (hi - lo) / KL_BINS as f64;
    let histogram = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![KL_SMOOTHING; KL_BINS];
        for &x in xs {
            let bin = (((x - lo) / width) as usize).min(KL_BINS - 1);
            h[bin] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter().map(|c| c / total).collect()
    };
    let pa = histogram(a);
    let pb = histogram(b);
    let kl: f64 = pa.iter().zip(&pb).map(|(&p, &q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}

/// Exact 1-d Wasserstein distance between two empirical distributions
/// (the integral of |F_a - F_b|, equivalently matched quantiles).
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut i = 0;
    let mut j = 0;
    let mut prev = sa[0].min(sb[0]);
    let mut dist = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => break,
        };
        dist += ((i as f64 / na) - (j as f64 / nb)).abs() * (x - prev);
        prev = x;
        while i < sa.len() && sa[i] == x {
            i += 1;
        }
        while j < sb.len() && sb[j] == x {
            j += 1;
        }
    }
    Ok(dist)
}

/// Property samples extracted from a graph set.
pub struct PropertySamples {
    pub edge_density: Vec<f64>,
    pub clustering: Vec<f64>,
    pub connectivity: Vec<f64>,
    /// Pooled node feature values, one vector per coordinate.
    pub node_feats: Vec<Vec<f64>>,
}

pub fn extract_properties(graphs: &[FeaturedGraph]) -> Result<PropertySamples, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let d = graphs[0].node_dim();
    for g in graphs {
        if g.node_dim() != d {
            return Err(MetricsError::FeatureDims(d, g.node_dim()));
        }
    }
    let rows: Vec<(f64, f64, f64)> = graphs
        .par_iter()
        .map(|g| {
            let density = edge_density(g).unwrap_or(0.0);
            let clust = avg_clustering(g);
            let conn = if g.n() >= 2 { avg_node_connectivity_tolerant(g) } else { 0.0 };
            (density, clust, conn)
        })
        .collect();
    let mut node_feats = vec![Vec::new(); d];
    for g in graphs {
        for row in g.node_feats().rows() {
            for (c, &v) in row.iter().enumerate() {
                node_feats[c].push(v);
            }
        }
    }
    Ok(PropertySamples {
        edge_density: rows.iter().map(|r| r.0).collect(),
        clustering: rows.iter().map(|r| r.1).collect(),
        connectivity: rows.iter().map(|r| r.2).collect(),
        node_feats,
    })
}

/// The eight evaluation metrics, in the reporting column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kl_edge_density: f64,
    pub kl_clustering: f64,
    pub kl_connectivity: f64,
    pub kl_node_feat: f64,
    pub wd_edge_density: f64,
    pub wd_clustering: f64,
    pub wd_connectivity: f64,
    pub wd_node_feat: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "kl_edge_dense,kl_clust,kl_conn,kl_node_feat,wd_edge_dense,wd_clust,wd_conn,wd_node_feat";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.kl_edge_density,
            self.kl_clustering,
            self.kl_connectivity,
            self.kl_node_feat,
            self.wd_edge_density,
            self.wd_clustering,
            self.wd_connectivity,
            self.wd_node_feat
        )
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.kl_edge_density,
            self.kl_clustering,
            self.kl_connectivity,
            self.kl_node_feat,
            self.wd_edge_density,
            self.wd_clustering,
            self.wd_connectivity,
            self.wd_node_feat,
        ]
    }

    /// Aligned-column text in the reporting layout.
    pub fn table_text(&self, label: &str) -> String {
        let header = [
            "kl edge dense",
            "kl clust",
            "kl conn",
            "kl node feat",
            "wd edge dense",
            "wd clust",
            "wd conn",
            "wd node feat",
        ];
        let mut head = format!("{:<12}", "method");
        let mut row = format!("{label:<12}");
        for (h, v) in header.iter().zip(self.values()) {
            head.push_str(&format!(" {h:>13}"));
            row.push_str(&format!(" {v:>13.4}"));
        }
        format!("{head}\n{row}\n")
    }
}

/// Compares generated graphs against a reference set. Node-feature
/// metrics are computed per coordinate on the pooled values and averaged
/// across coordinates.
pub fn evaluate(generated: &[FeaturedGraph], reference: &[FeaturedGraph]) -> Result<MetricsReport, MetricsError> {
    let gen = extract_properties(generated)?;
    let refs = extract_properties(reference)?;
    if gen.node_feats.len() != refs.node_feats.len() {
        return Err(MetricsError::FeatureDims(gen.node_feats.len(), refs.node_feats.len()));
    }
    let dims = gen.node_feats.len();
    let mut kl_nf = 0.0;
    let mut wd_nf = 0.0;
    for c in 0..dims {
        kl_nf += kl_divergence(&gen.node_feats[c], &refs.node_feats[c])?;
        wd_nf += wasserstein_1d(&gen.node_feats[c], &refs.node_feats[c])?;
    }
    if dims > 0 {
        kl_nf /= dims as f64;
        wd_nf /= dims as f64;
    }
    Ok(MetricsReport {
        kl_edge_density: kl_divergence(&gen.edge_density, &refs.edge_density)?,
        kl_clustering: kl_divergence(&gen.clustering, &refs.clustering)?,
        kl_connectivity: kl_divergence(&gen.connectivity, &refs.connectivity)?,
        kl_node_feat: kl_nf,
        wd_edge_density: wasserstein_1d(&gen.edge_density, &refs.edge_density)?,
        wd_clustering: wasserstein_1d(&gen.clustering, &refs.clustering)?,
        wd_connectivity: wasserstein_1d(&gen.connectivity, &refs.connectivity)?,
        wd_node_feat: wd_nf,
    })
}

/// Histogram data for plotting a property's generated-vs-reference
/// distributions: `(bin_lo, bin_hi, reference_frac, generated_frac)`.
pub fn histogram_rows(
    reference: &[f64],
    generated: &[f64],
    bins: usize,
) -> Vec<(f64, f64, f64, f64)> {
    let lo = reference.iter().chain(generated).cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().chain(generated).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || lo == hi {
        return vec![];
    }
    let width = (hi - lo) / bins as f64;
    let count = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            h[b] += 1.0;
        }
        let n = xs.len().max(1) as f64;
        h.iter().map(|c| c / n).collect()
    };
    let hr = count(reference);
    let hg = count(generated);
    (0..bins)
        .map(|b| (lo + b as f64 * width, lo + (b + 1) as f64 * width, hr[b], hg[b]))
        .collect()
}
