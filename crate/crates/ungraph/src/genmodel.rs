//! Generator composition: initial 3-node layer, edge-conditioned MPNN,
//! unpooling stages with skip connections, and the output heads.
//!
//! A [`GeneratorSpec`] describes the layer stack as data (loadable from a
//! TOML config); [`Generator`] owns the parameters' naming scheme and runs
//! the forward pass on a tape, accumulating the total log-probability of
//! every structure decision.

use crate::graph::{is_connected, FeaturedGraph};
use crate::nn::layers::agg;
use crate::nn::params::{Ctx, ParamStore};
use crate::nn::tape::NodeId;
use crate::nn::{hard_gumbel_softmax, Mlp, WrappedMlp};
use crate::unpool::{
    ReplaySource, SampleSource, UnpoolError, UnpoolHyper, UnpoolLayer, UnpoolTrace,
};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
    #[error("latent vector has width {got}, spec wants {want}")]
    LatentWidth { got: usize, want: usize },
    #[error("graph grew to {n} nodes, past the skip connection limit {max}")]
    SkipOverflow { n: usize, max: usize },
    #[error(transparent)]
    Unpool(#[from] UnpoolError),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Linear node head (real-valued features, e.g. coordinates).
    Continuous,
    /// Hard Gumbel-softmax one-hot node (and edge) features.
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialSpec {
    pub d_x: usize,
    pub d_w: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipSpec {
    pub n_z: usize,
    pub d_y: usize,
    pub max_nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub mpnn_dy: usize,
    pub unpool: UnpoolHyper,
    pub skip: Option<SkipSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeHeadSpec {
    /// Output edge feature width of the final edge layer.
    pub d_u: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalSpec {
    pub mpnn_dy: usize,
    /// MLP widths appended after the final MPNN width.
    pub node_head: Vec<usize>,
    pub edge_head: Option<EdgeHeadSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub mode: OutputMode,
    pub latent_dim: usize,
    pub initial: InitialSpec,
    pub stages: Vec<StageSpec>,
    #[serde(rename = "final")]
    pub final_: FinalSpec,
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self, GenError> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| GenError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("generator spec serializes")
    }

    /// Node-count interval after each stage, starting from the 3-node
    /// initial graph.
    pub fn node_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = vec![(3usize, 3usize)];
        for stage in &self.stages {
            let (lo, hi) = *ranges.last().unwrap();
            let mut out_lo = usize::MAX;
            let mut out_hi = 0;
            for n in lo..=hi {
                let h = &stage.unpool;
                let statics = h.static_nodes.iter().filter(|&&i| i < n).count();
                let probs = h.prob_nodes.iter().filter(|&&i| i < n).count();
                let always = n - statics - probs;
                let min_split = if always > 0 {
                    always
                } else if h.enforce_min_growth && probs > 0 {
                    1
                } else {
                    0
                };
                let max_split = always + probs;
                out_lo = out_lo.min(n + min_split);
                out_hi = out_hi.max(n + max_split);
            }
            ranges.push((out_lo, out_hi));
        }
        ranges
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.stages.is_empty() {
            return Err(GenError::BadSpec("need at least one unpooling stage".into()));
        }
        let mut d_x = self.initial.d_x;
        let mut d_w = self.initial.d_w;
        let ranges = self.node_ranges();
        for (k, stage) in self.stages.iter().enumerate() {
            stage.unpool.validate().map_err(|e| GenError::BadSpec(e.to_string()))?;
            if stage.unpool.d_x != stage.mpnn_dy {
                return Err(GenError::BadSpec(format!(
                    "stage {k}: unpool d_x {} must match the preceding MPNN output {}",
                    stage.unpool.d_x, stage.mpnn_dy
                )));
            }
            if stage.unpool.d_w != d_w {
                return Err(GenError::BadSpec(format!(
                    "stage {k}: unpool d_w {} does not match incoming edge width {d_w}",
                    stage.unpool.d_w
                )));
            }
            if let Some(skip) = &stage.skip {
                let (_, hi) = ranges[k + 1];
                if skip.max_nodes < hi {
                    return Err(GenError::BadSpec(format!(
                        "stage {k}: skip max_nodes {} below the possible node count {hi}",
                        skip.max_nodes
                    )));
                }
            }
            d_x = stage.unpool.d_y + stage.skip.as_ref().map_or(0, |s| s.d_y);
            d_w = stage.unpool.d_u;
        }
        let _ = d_x;
        Ok(())
    }

    /// Built-in architectures.
    pub fn preset(name: &str) -> Option<GeneratorSpec> {
        let text = match name {
            "waxman" => include_str!("../presets/waxman.toml"),
            "waxman-desk" => include_str!("../presets/waxman-desk.toml"),
            "protein" => include_str!("../presets/protein.toml"),
            "qm9-shape" => include_str!("../presets/qm9-shape.toml"),
            "zinc-shape" => include_str!("../presets/zinc-shape.toml"),
            _ => return None,
        };
        Some(GeneratorSpec::from_toml(text).expect("built-in preset is valid"))
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["waxman", "waxman-desk", "protein", "qm9-shape", "zinc-shape"]
    }
}

/// The four initial edge sets over nodes {0, 1, 2}.
pub const INITIAL_EDGE_SETS: [&[(usize, usize)]; 4] = [
    &[(0, 1), (0, 2)],
    &[(0, 1), (1, 2)],
    &[(0, 2), (1, 2)],
    &[(0, 1), (1, 2), (0, 2)],
];

/// Everything recorded about one generation, enough to replay it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenTrace {
    pub initial_choice: usize,
    pub unpools: Vec<UnpoolTrace>,
}

/// Tape-level result of a generator forward pass.
pub struct GenForward {
    pub structure: FeaturedGraph,
    pub x: NodeId,
    pub w: Option<NodeId>,
    pub logp_init: NodeId,
    pub logp_unpools: Vec<NodeId>,
    pub logp_total: NodeId,
    pub trace: GenTrace,
    /// Structures after the initial layer and after each unpool stage.
    pub intermediates: Vec<FeaturedGraph>,
}

/// Per-stage skip-connection inputs: computed from the latent vector, or
/// precomputed `1 x (max_nodes * d_y)` rows injected by a batched
/// training step.
pub enum SkipFeed<'a> {
    FromLatent(NodeId),
    Rows(&'a [Option<NodeId>]),
}

/// Structure decisions for the stage pipeline.
pub enum CoreDecisions<'a> {
    Sample(&'a mut dyn rand::RngCore),
    Replay(&'a [UnpoolTrace]),
}

/// Tape-level result of everything after the initial edge-set choice.
pub struct CoreOut {
    pub structure: FeaturedGraph,
    pub x: NodeId,
    pub w: Option<NodeId>,
    pub logp_unpools: Vec<NodeId>,
    pub unpool_traces: Vec<UnpoolTrace>,
    pub intermediates: Vec<FeaturedGraph>,
}

pub fn draw_categorical(probs: &[f64], rng: &mut dyn rand::RngCore) -> usize {
    let u = rand::Rng::gen::<f64>(&mut &mut *rng);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub name: String,
    pub spec: GeneratorSpec,
}

impl Generator {
    pub fn new(name: impl Into<String>, spec: GeneratorSpec) -> Result<Self, GenError> {
        spec.validate()?;
        Ok(Generator { name: name.into(), spec })
    }

    fn ini_v(&self) -> Mlp {
        let d = self.spec.initial.d_x;
        Mlp::new(format!("{}.ini.v", self.name), &[self.spec.latent_dim, 6 * d, 3 * d])
    }

    fn ini_e(&self) -> Mlp {
        Mlp::new(format!("{}.ini.e", self.name), &[3 * self.spec.initial.d_x, 16, 4])
    }

    fn ini_w(&self) -> WrappedMlp {
        let d = self.spec.initial.d_x;
        let dw = self.spec.initial.d_w;
        WrappedMlp::new(format!("{}.ini.w", self.name), &[d, dw, dw])
    }

    fn mpnn(&self, k: usize, d_x: usize, d_w: usize, d_y: usize) -> Mpnn {
        Mpnn::new(format!("{}.mpnn{k}", self.name), d_x, d_w, d_y)
    }

    pub fn unpool_layer(&self, k: usize) -> UnpoolLayer {
        UnpoolLayer::new(format!("{}.u{k}", self.name), self.spec.stages[k].unpool.clone())
            .expect("validated spec")
    }

    pub(crate) fn skip(&self, k: usize, s: &SkipSpec) -> WrappedMlp {
        WrappedMlp::new(
            format!("{}.skip{k}", self.name),
            &[self.spec.latent_dim, s.n_z * s.d_y, s.max_nodes * s.d_y],
        )
    }

    fn node_head(&self) -> Mlp {
        let mut widths = vec![self.spec.final_.mpnn_dy];
        widths.extend(&self.spec.final_.node_head);
        Mlp::new(format!("{}.head.node", self.name), &widths)
    }

    fn edge_head(&self, d_w: usize) -> Option<FinalEdgeLayer> {
        self.spec.final_.edge_head.as_ref().map(|h| FinalEdgeLayer {
            name: format!("{}.head.edge", self.name),
            d_x: self.spec.final_.mpnn_dy,
            d_w,
            d_u: h.d_u,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.ini_v().init(store, rng);
        self.ini_e().init(store, rng);
        self.ini_w().init(store, rng);
        let mut d_x = self.spec.initial.d_x;
        let mut d_w = self.spec.initial.d_w;
        for (k, stage) in self.spec.stages.iter().enumerate() {
            self.mpnn(k, d_x, d_w, stage.mpnn_dy).init(store, rng);
            self.unpool_layer(k).init(store, rng);
            if let Some(s) = &stage.skip {
                self.skip(k, s).init(store, rng);
            }
            d_x = stage.unpool.d_y + stage.skip.as_ref().map_or(0, |s| s.d_y);
            d_w = stage.unpool.d_u;
        }
        let m = self.spec.stages.len();
        self.mpnn(m, d_x, d_w, self.spec.final_.mpnn_dy).init(store, rng);
        self.node_head().init(store, rng);
        if let Some(h) = self.edge_head(d_w) {
            h.init(store, rng);
        }
    }

    /// Prefixes of parameter groups that only influence structure
    /// sampling probabilities.
    pub fn structure_param_groups(&self) -> Vec<String> {
        let mut out = vec![format!("{}.ini.e", self.name)];
        for k in 0..self.spec.stages.len() {
            out.extend(self.unpool_layer(k).structure_param_groups());
        }
        out
    }

    /// Batched z-block entry: initial node features (one flattened
    /// `3 d_x` row per batch row) and the 4-way edge-set probabilities.
    pub fn zblock_initial(&self, ctx: &mut Ctx, z_batch: NodeId) -> (NodeId, NodeId) {
        let x_flat = self.ini_v().forward(ctx, z_batch);
        let logits = self.ini_e().forward(ctx, x_flat);
        let probs = ctx.tape.softmax_rows(logits);
        (x_flat, probs)
    }

    /// Batched skip block for stage `k` (`None` when the stage has no
    /// skip connection).
    pub fn zblock_skip(&self, ctx: &mut Ctx, k: usize, z_batch: NodeId) -> Option<NodeId> {
        self.spec.stages[k].skip.as_ref().map(|s| self.skip(k, s).forward(ctx, z_batch))
    }

    /// The stage pipeline: initial edge features, then `MPNN -> unpool ->
    /// skip-concat` per stage, the final MPNN and the output heads.
    /// `x0` is the 3-node feature matrix, `initial_choice` the already
    /// drawn edge-set index.
    pub fn forward_core(
        &self,
        ctx: &mut Ctx,
        x0: NodeId,
        initial_choice: usize,
        skips: SkipFeed,
        mut decisions: CoreDecisions,
    ) -> Result<CoreOut, GenError> {
        let d = self.spec.initial.d_x;
        assert_eq!(ctx.tape.shape(x0), (3, d), "x0 must be 3 x d_x");
        let edges: Vec<(usize, usize)> = INITIAL_EDGE_SETS[initial_choice].to_vec();
        let structure0 = FeaturedGraph::from_edges(3, edges.iter().copied()).unwrap();
        let w0 = {
            let i_rows: Vec<usize> = structure0.edges().iter().map(|&(i, _)| i).collect();
            let j_rows: Vec<usize> = structure0.edges().iter().map(|&(_, j)| j).collect();
            let xi = ctx.tape.gather_rows(x0, Rc::new(i_rows));
            let xj = ctx.tape.gather_rows(x0, Rc::new(j_rows));
            let a = agg(ctx, xi, xj);
            self.ini_w().forward(ctx, a)
        };

        let mut structure = structure0.clone();
        let mut x = x0;
        let mut w = w0;
        let mut d_x = d;
        let mut d_w = self.spec.initial.d_w;
        let mut intermediates = vec![structure0];
        let mut logp_unpools = Vec::new();
        let mut unpool_traces = Vec::new();

        for (k, stage) in self.spec.stages.iter().enumerate() {
            let mpnn = self.mpnn(k, d_x, d_w, stage.mpnn_dy);
            x = mpnn.forward(ctx, &structure, x, w);
            let layer = self.unpool_layer(k);
            let fwd = match &mut decisions {
                CoreDecisions::Sample(rng) => {
                    let mut s = SampleSource::new(&mut **rng);
                    let f = layer.forward(ctx, &structure, x, w, &mut s)?;
                    unpool_traces.push(s.trace);
                    f
                }
                CoreDecisions::Replay(traces) => {
                    let mut s = ReplaySource::new(&traces[k]);
                    let f = layer.forward(ctx, &structure, x, w, &mut s)?;
                    unpool_traces.push(traces[k].clone());
                    f
                }
            };
            structure = fwd.structure;
            x = fwd.y;
            w = fwd.u;
            logp_unpools.push(fwd.logp.total);
            intermediates.push(structure.clone());
            if let Some(s) = &stage.skip {
                let n = structure.n();
                if n > s.max_nodes {
                    return Err(GenError::SkipOverflow { n, max: s.max_nodes });
                }
                let block = match &skips {
                    SkipFeed::FromLatent(z) => self.skip(k, s).forward(ctx, *z),
                    SkipFeed::Rows(rows) => {
                        rows[k].expect("stage with a skip needs an injected row")
                    }
                };
                let grid = ctx.tape.reshape(block, s.max_nodes, s.d_y);
                let rows = ctx.tape.slice_rows(grid, 0, n);
                x = ctx.tape.concat_cols(&[x, rows]);
            }
            d_x = stage.unpool.d_y + stage.skip.as_ref().map_or(0, |s| s.d_y);
            d_w = stage.unpool.d_u;
        }

        let m = self.spec.stages.len();
        let mpnn = self.mpnn(m, d_x, d_w, self.spec.final_.mpnn_dy);
        x = mpnn.forward(ctx, &structure, x, w);
        let mut x_out = self.node_head().forward(ctx, x);
        let mut w_out = self.edge_head(d_w).map(|h| h.forward(ctx, &structure, x, w));
        if self.spec.mode == OutputMode::Categorical {
            match &mut decisions {
                CoreDecisions::Sample(rng) => {
                    x_out = hard_gumbel_softmax(ctx, x_out, 1.0, &mut **rng).0;
                    if let Some(wo) = w_out {
                        w_out = Some(hard_gumbel_softmax(ctx, wo, 1.0, &mut **rng).0);
                    }
                }
                CoreDecisions::Replay(_) => {
                    // structure replay never needs the one-hot features
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                    x_out = hard_gumbel_softmax(ctx, x_out, 1.0, &mut rng).0;
                    if let Some(wo) = w_out {
                        w_out = Some(hard_gumbel_softmax(ctx, wo, 1.0, &mut rng).0);
                    }
                }
            }
        }
        debug_assert!(intermediates.iter().all(is_connected));
        Ok(CoreOut { structure, x: x_out, w: w_out, logp_unpools, unpool_traces, intermediates })
    }

    pub fn forward_sample(
        &self,
        ctx: &mut Ctx,
        z: NodeId,
        rng: &mut impl Rng,
    ) -> Result<GenForward, GenError> {
        let (zr, zc) = ctx.tape.shape(z);
        if zr != 1 || zc != self.spec.latent_dim {
            return Err(GenError::LatentWidth { got: zc, want: self.spec.latent_dim });
        }
        let (x_flat, probs) = self.zblock_initial(ctx, z);
        let pv = ctx.tape.value(probs).row(0).to_vec();
        let choice = draw_categorical(&pv, rng);
        self.assemble(ctx, z, x_flat, probs, choice, CoreDecisions::Sample(rng))
    }

    /// Re-runs a recorded generation: structure decisions come from the
    /// trace, so the log-probabilities are a smooth function of the
    /// parameters. Categorical output heads draw their Gumbel noise from
    /// a fixed stream; structure is unaffected by it.
    pub fn forward_replay(&self, ctx: &mut Ctx, z: NodeId, trace: &GenTrace) -> Result<GenForward, GenError> {
        let (x_flat, probs) = self.zblock_initial(ctx, z);
        self.assemble(ctx, z, x_flat, probs, trace.initial_choice, CoreDecisions::Replay(&trace.unpools))
    }

    fn assemble(
        &self,
        ctx: &mut Ctx,
        z: NodeId,
        x_flat: NodeId,
        probs: NodeId,
        choice: usize,
        decisions: CoreDecisions,
    ) -> Result<GenForward, GenError> {
        let p_choice = ctx.tape.slice_cols(probs, choice, choice + 1);
        let logp_init = ctx.tape.ln(p_choice);
        let x0 = ctx.tape.reshape(x_flat, 3, self.spec.initial.d_x);
        let core = self.forward_core(ctx, x0, choice, SkipFeed::FromLatent(z), decisions)?;
        let mut logp_total = logp_init;
        for &lp in &core.logp_unpools {
            logp_total = ctx.tape.add(logp_total, lp);
        }
        Ok(GenForward {
            structure: core.structure,
            x: core.x,
            w: core.w,
            logp_init,
            logp_unpools: core.logp_unpools,
            logp_total,
            trace: GenTrace { initial_choice: choice, unpools: core.unpool_traces },
            intermediates: core.intermediates,
        })
    }

    /// Samples one graph from a latent vector, materializing features.
    pub fn generate(
        &self,
        store: &ParamStore,
        z: &[f64],
        rng: &mut impl Rng,
        train: bool,
    ) -> Result<(FeaturedGraph, f64, GenTrace), GenError> {
        let mut ctx = Ctx::new(store, train);
        let zn = ctx.tape.leaf(Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap());
        let fwd = self.forward_sample(&mut ctx, zn, rng)?;
        let x = ctx.tape.value(fwd.x).clone();
        let w = fwd.w.map(|id| ctx.tape.value(id).clone());
        let g = FeaturedGraph::new(fwd.structure.n(), fwd.structure.edges().iter().copied(), x, w)
            .expect("generated graph is well-formed");
        Ok((g, ctx.tape.scalar(fwd.logp_total), fwd.trace))
    }

    /// Standard-normal latent draw followed by [`Generator::generate`].
    pub fn sample(
        &self,
        store: &ParamStore,
        rng: &mut impl Rng,
        train: bool,
    ) -> Result<(FeaturedGraph, f64, GenTrace), GenError> {
        let z = sample_latent(self.spec.latent_dim, rng);
        self.generate(store, &z, rng, train)
    }
}

pub fn sample_latent(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand::distributions::Distribution;
    let normal = rand::distributions::Standard;
    (0..dim).map(|_| standard_normal(normal.sample(rng), normal.sample(rng))).collect()
}

/// Box-Muller from two uniforms.
fn standard_normal(u1: f64, u2: f64) -> f64 {
    let u1: f64 = if u1 <= f64::MIN_POSITIVE { f64::MIN_POSITIVE } else { u1 };
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Edge-conditioned message passing:
/// `y_j = LeakyReLU(BN(x_j Theta + sum_{i in N(j)} x_i H(w_ij)))` where
/// `H` linearly maps an edge feature to a `d_x x d_y` matrix.
#[derive(Debug, Clone)]
pub struct Mpnn {
    pub name: String,
    pub d_x: usize,
    pub d_w: usize,
    pub d_y: usize,
}

impl Mpnn {
    pub fn new(name: impl Into<String>, d_x: usize, d_w: usize, d_y: usize) -> Self {
        Mpnn { name: name.into(), d_x, d_w, d_y }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(&format!("{}.theta", self.name), self.d_x, self.d_y, rng);
        // bias of theta unused; H maps d_w -> d_x*d_y (bias acts as the
        // edge-independent message matrix, which also covers d_w = 0)
        store.params.shift_remove(&format!("{}.theta.b", self.name));
        store.init_linear(&format!("{}.h", self.name), self.d_w, self.d_x * self.d_y, rng);
        store.init_batch_norm(&format!("{}.bn", self.name), self.d_y);
    }

    pub fn forward(&self, ctx: &mut Ctx, structure: &FeaturedGraph, x: NodeId, w: NodeId) -> NodeId {
        let n = structure.n();
        let theta = ctx.param(&format!("{}.theta.w", self.name));
        let self_term = ctx.tape.matmul(x, theta);
        let pre = if structure.edge_count() == 0 {
            self_term
        } else {
            let hw = ctx.param(&format!("{}.h.w", self.name));
            let hb = ctx.param(&format!("{}.h.b", self.name));
            let hmat = {
                let prod = ctx.tape.matmul(w, hw);
                ctx.tape.add_row(prod, hb)
            };
            let mut msg_rows = Vec::with_capacity(2 * structure.edge_count());
            let mut dst = Vec::with_capacity(2 * structure.edge_count());
            for (e, &(i, j)) in structure.edges().iter().enumerate() {
                let h_e = ctx.tape.slice_rows(hmat, e, e + 1);
                let h_e = ctx.tape.reshape(h_e, self.d_x, self.d_y);
                for (s, t) in [(i, j), (j, i)] {
                    let xs = ctx.tape.gather_rows(x, Rc::new(vec![s]));
                    msg_rows.push(ctx.tape.matmul(xs, h_e));
                    dst.push(t);
                }
            }
            let messages = ctx.tape.concat_rows(&msg_rows);
            let summed = ctx.tape.scatter_add_rows(messages, Rc::new(dst), n);
            ctx.tape.add(self_term, summed)
        };
        let bn = crate::nn::BatchNorm::new(format!("{}.bn", self.name), self.d_y);
        let normed = bn.forward(ctx, pre);
        ctx.tape.leaky_relu(normed, crate::nn::LEAKY_SLOPE)
    }
}

/// Final layer for edge features:
/// `MLP[d_x + 2 d_w, d_u](w_ij, MLP[d_x, d_w, d_w](agg(x_i, x_j)), agg(x_i, x_j))`.
#[derive(Debug, Clone)]
pub struct FinalEdgeLayer {
    pub name: String,
    pub d_x: usize,
    pub d_w: usize,
    pub d_u: usize,
}

impl FinalEdgeLayer {
    fn inner(&self) -> Mlp {
        Mlp::new(format!("{}.inner", self.name), &[self.d_x, self.d_w, self.d_w])
    }

    fn outer(&self) -> Mlp {
        Mlp::new(format!("{}.outer", self.name), &[self.d_x + 2 * self.d_w, self.d_u])
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.inner().init(store, rng);
        self.outer().init(store, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, structure: &FeaturedGraph, x: NodeId, w: NodeId) -> NodeId {
        assert!(structure.edge_count() > 0, "final edge layer needs edges");
        let i_rows: Vec<usize> = structure.edges().iter().map(|&(i, _)| i).collect();
        let j_rows: Vec<usize> = structure.edges().iter().map(|&(_, j)| j).collect();
        let xi = ctx.tape.gather_rows(x, Rc::new(i_rows));
        let xj = ctx.tape.gather_rows(x, Rc::new(j_rows));
        let a = agg(ctx, xi, xj);
        let inner = self.inner().forward(ctx, a);
        let cat = ctx.tape.concat_cols(&[w, inner, a]);
        self.outer().forward(ctx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> GeneratorSpec {
        GeneratorSpec::preset("waxman-desk").unwrap()
    }

    fn init_gen(spec: GeneratorSpec, seed: u64) -> (Generator, ParamStore) {
        let g = Generator::new("gen", spec).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.init(&mut store, &mut rng);
        (g, store)
    }

    fn rig(store: &mut ParamStore, prefix: &str, out_bias: f64) {
        let names: Vec<String> = store
            .params
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}.")))
            .cloned()
            .collect();
        for n in names {
            store.params[&n].fill(0.0);
        }
        store.params[&format!("{prefix}.out.b")].fill(out_bias);
    }

    #[test]
    fn presets_parse_and_validate() {
        for name in GeneratorSpec::preset_names() {
            let spec = GeneratorSpec::preset(name).unwrap();
            spec.validate().unwrap();
        }
        // Waxman figure: 3 -> [4,6] -> [5,12]
        let ranges = GeneratorSpec::preset("waxman").unwrap().node_ranges();
        assert_eq!(ranges, vec![(3, 3), (4, 6), (5, 12)]);
        let protein = GeneratorSpec::preset("protein").unwrap().node_ranges();
        assert_eq!(protein, vec![(3, 3), (4, 4), (8, 8)]);
        let qm9 = GeneratorSpec::preset("qm9-shape").unwrap().node_ranges();
        assert_eq!(qm9, vec![(3, 3), (5, 5), (6, 9)]);
        let zinc = GeneratorSpec::preset("zinc-shape").unwrap().node_ranges();
        assert_eq!(zinc, vec![(3, 3), (5, 5), (9, 9), (10, 18), (11, 36)]);
    }

    #[test]
    fn equal_initial_logits_pick_uniformly_with_matching_logp() {
        let (g, mut store) = init_gen(desk(), 3);
        rig(&mut store, "gen.ini.e", 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..2000 {
            let (_, _, trace) = g.sample(&store, &mut rng, true).unwrap();
            counts[trace.initial_choice] += 1;
        }
        for &c in &counts {
            assert!((c as f64 / 2000.0 - 0.25).abs() < 0.05, "counts {counts:?}");
        }
        // logp_init contribution is ln(1/4) for every branch
        let mut ctx = Ctx::new(&store, true);
        let z = ctx.tape.leaf(Array2::zeros((1, g.spec.latent_dim)));
        let fwd = g.forward_sample(&mut ctx, z, &mut rng).unwrap();
        assert!((ctx.tape.scalar(fwd.logp_init) - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturating_fourth_logit_yields_triangles() {
        let (g, mut store) = init_gen(desk(), 4);
        rig(&mut store, "gen.ini.e", 0.0);
        store.params["gen.ini.e.out.b"]
            .assign(&arr2(&[[-500.0, -500.0, -500.0, 500.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (_, _, trace) = g.sample(&store, &mut rng, true).unwrap();
            assert_eq!(trace.initial_choice, 3);
        }
    }

    #[test]
    fn every_initial_branch_is_connected() {
        for set in INITIAL_EDGE_SETS {
            let g = FeaturedGraph::from_edges(3, set.iter().copied()).unwrap();
            assert!(is_connected(&g));
        }
    }

    #[test]
    fn mpnn_reduces_to_self_term_without_messages() {
        let mpnn = Mpnn::new("m", 3, 2, 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        mpnn.init(&mut store, &mut rng);
        store.params["m.theta.w"].assign(&Array2::eye(3));
        store.params["m.h.w"].fill(0.0);
        store.params["m.h.b"].fill(0.0);
        // exact identity BN in eval mode: var + eps = 1
        store.stats["m.bn.var"].fill(1.0 - crate::nn::layers::BN_EPS);
        let mut ctx = Ctx::new(&store, false);
        let structure = FeaturedGraph::from_edges(2, [(0, 1)]).unwrap();
        let x = ctx.tape.leaf(arr2(&[[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]]));
        let w = ctx.tape.leaf(Array2::zeros((1, 2)));
        let y = mpnn.forward(&mut ctx, &structure, x, w);
        let expect = ctx.tape.value(x).mapv(|v| if v > 0.0 { v } else { 0.05 * v });
        assert_eq!(ctx.tape.value(y), &expect);

        // isolated nodes only use the self term
        let lonely = FeaturedGraph::from_edges(2, []).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.leaf(arr2(&[[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]));
        let w = ctx.tape.leaf(Array2::zeros((0, 2)));
        let y = mpnn.forward(&mut ctx, &lonely, x, w);
        assert_eq!(ctx.tape.shape(y), (2, 3));
    }

    #[test]
    fn mpnn_is_permutation_equivariant() {
        let mpnn = Mpnn::new("m", 4, 2, 5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        mpnn.init(&mut store, &mut rng);
        let structure = FeaturedGraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let x_raw = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let w_raw = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.leaf(x_raw.clone());
        let w = ctx.tape.leaf(w_raw.clone());
        let y = mpnn.forward(&mut ctx, &structure, x, w);
        let y_val = ctx.tape.value(y).clone();

        // permutation (0 1 2 3) -> (2, 0, 3, 1)
        let perm = [2usize, 0, 3, 1];
        let p_structure = FeaturedGraph::from_edges(
            4,
            structure.edges().iter().map(|&(a, b)| (perm[a], perm[b])),
        )
        .unwrap();
        let mut px = Array2::zeros((4, 4));
        for v in 0..4 {
            px.row_mut(perm[v]).assign(&x_raw.row(v));
        }
        // edge features must follow the relabeled canonical edge order
        let mut pw = Array2::zeros((4, 2));
        for (e, &(a, b)) in structure.edges().iter().enumerate() {
            let target = (perm[a].min(perm[b]), perm[a].max(perm[b]));
            let idx = p_structure.edge_index(target.0, target.1).unwrap();
            pw.row_mut(idx).assign(&w_raw.row(e));
        }
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.leaf(px);
        let w = ctx.tape.leaf(pw);
        let py = mpnn.forward(&mut ctx, &p_structure, x, w);
        let py_val = ctx.tape.value(py);
        for v in 0..4 {
            for c in 0..5 {
                assert!((y_val[(v, c)] - py_val[(perm[v], c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skip_connection_row_selection() {
        let spec = desk();
        let (g, mut store) = init_gen(spec, 9);
        let s = g.spec.stages[0].skip.clone().unwrap();
        // zero parameters: appended block identically zero
        for name in store.names_under("gen.skip0") {
            store.params[&name].fill(0.0);
        }
        let mut ctx = Ctx::new(&store, false);
        let z = ctx.tape.leaf(Array2::ones((1, g.spec.latent_dim)));
        let block = g.skip(0, &s).forward(&mut ctx, z);
        assert!(ctx.tape.value(block).iter().all(|&v| v == 0.0));
        let grid = ctx.tape.reshape(block, s.max_nodes, s.d_y);
        let all = ctx.tape.slice_rows(grid, 0, s.max_nodes);
        assert_eq!(ctx.tape.shape(all), (s.max_nodes, s.d_y));
        // n < max: first n rows used
        let some = ctx.tape.slice_rows(grid, 0, 4);
        assert_eq!(ctx.tape.shape(some), (4, s.d_y));
    }

    #[test]
    fn final_edge_layer_is_symmetric_and_zero_with_zero_params() {
        let layer = FinalEdgeLayer { name: "fe".into(), d_x: 4, d_w: 2, d_u: 3 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        layer.init(&mut store, &mut rng);
        let structure = FeaturedGraph::from_edges(2, [(0, 1)]).unwrap();
        let x_raw = arr2(&[[0.3, -0.7, 1.1, 0.2], [0.9, 0.4, -0.5, -1.2]]);
        let w_raw = arr2(&[[0.5, -0.25]]);
        let run = |store: &ParamStore, x_raw: &Array2<f64>| {
            let mut ctx = Ctx::new(store, false);
            let x = ctx.tape.leaf(x_raw.clone());
            let w = ctx.tape.leaf(w_raw.clone());
            let u = layer.forward(&mut ctx, &structure, x, w);
            ctx.tape.value(u).clone()
        };
        // swapping the endpoints leaves the feature unchanged
        let fwd = run(&store, &x_raw);
        let mut swapped = Array2::zeros((2, 4));
        swapped.row_mut(0).assign(&x_raw.row(1));
        swapped.row_mut(1).assign(&x_raw.row(0));
        let bwd = run(&store, &swapped);
        assert!(fwd.iter().zip(bwd.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        for name in store.names_under("fe") {
            store.params[&name].fill(0.0);
        }
        let zero = run(&store, &x_raw);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn waxman_preset_generates_in_range_connected_r2_graphs() {
        let (g, store) = init_gen(GeneratorSpec::preset("waxman").unwrap(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (out, logp, _) = g.sample(&store, &mut rng, true).unwrap();
            assert!(out.n() >= 5 && out.n() <= 12, "n = {}", out.n());
            assert_eq!(out.node_dim(), 2);
            assert_eq!(out.edge_dim(), 0);
            assert!(is_connected(&out));
            assert!(logp <= 0.0);
        }
    }

    #[test]
    fn desk_preset_connectivity_and_ledger_sum() {
        let (g, store) = init_gen(desk(), 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let mut ctx = Ctx::new(&store, true);
            let z = ctx.tape.leaf(Array2::from_shape_fn((1, g.spec.latent_dim), |_| {
                rng.gen_range(-1.0..1.0)
            }));
            let fwd = g.forward_sample(&mut ctx, z, &mut rng).unwrap();
            for im in &fwd.intermediates {
                assert!(is_connected(im));
            }
            assert!(is_connected(&fwd.structure));
            let total = ctx.tape.scalar(fwd.logp_total);
            let parts: f64 = ctx.tape.scalar(fwd.logp_init)
                + fwd.logp_unpools.iter().map(|&id| ctx.tape.scalar(id)).sum::<f64>();
            assert!((total - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_generation_under_fixed_seed() {
        let (g, store) = init_gen(desk(), 15);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.sample(&store, &mut rng, true).unwrap()
        };
        let (g1, lp1, t1) = run(99);
        let (g2, lp2, t2) = run(99);
        assert_eq!(g1, g2);
        assert_eq!(lp1, lp2);
        assert_eq!(t1, t2);
        let (_, _, t3) = run(100);
        assert!(t1 != t3 || true); // different seeds usually differ; no hard claim
    }

    #[test]
    fn fully_forced_decisions_have_zero_total_logp() {
        // protein preset: I_r' empty everywhere, so logp_r is identically
        // zero; saturate the remaining decision heads.
        let (g, mut store) = init_gen(GeneratorSpec::preset("protein").unwrap(), 16);
        store.params["gen.ini.e.out.b"].assign(&arr2(&[[500.0, -500.0, -500.0, -500.0]]));
        for name in store.names_under("gen.ini.e") {
            if !name.ends_with("out.b") {
                store.params[&name].fill(0.0);
            }
        }
        for k in 0..2 {
            rig(&mut store, &format!("gen.u{k}.ia"), 500.0);
            rig(&mut store, &format!("gen.u{k}.ie1"), -500.0);
            rig(&mut store, &format!("gen.u{k}.hs0"), 500.0);
            rig(&mut store, &format!("gen.u{k}.ie2"), 500.0);
            rig(&mut store, &format!("gen.u{k}.hb0"), -500.0);
            rig(&mut store, &format!("gen.u{k}.iea"), -500.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (_, logp, trace) = g.sample(&store, &mut rng, true).unwrap();
        assert_eq!(logp, 0.0);
        assert_eq!(trace.initial_choice, 0);
    }

    #[test]
    fn categorical_mode_emits_one_hot_features() {
        let (g, store) = init_gen(GeneratorSpec::preset("qm9-shape").unwrap(), 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (out, _, _) = g.sample(&store, &mut rng, true).unwrap();
        assert!(out.n() >= 6 && out.n() <= 9);
        for row in out.node_feats().rows() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
        }
        assert_eq!(out.edge_dim(), 3);
        for row in out.edge_feats().rows() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn replay_reproduces_structure_and_logp() {
        let (g, store) = init_gen(desk(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z: Vec<f64> = (0..g.spec.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, logp, trace) = g.generate(&store, &z, &mut rng, true).unwrap();
        let mut ctx = Ctx::new(&store, true);
        let zn = ctx.tape.leaf(Array2::from_shape_vec((1, z.len()), z.clone()).unwrap());
        let fwd = g.forward_replay(&mut ctx, zn, &trace).unwrap();
        assert_eq!(fwd.structure.edges(), out.edges());
        assert_eq!(ctx.tape.scalar(fwd.logp_total), logp);
    }
}
