//! Neural layers: linear, batch normalization, and the MLP block used
//! throughout the generator and discriminator (hidden blocks of linear +
//! batch-norm + LeakyReLU(0.05), then a linear output block).

use super::params::{Ctx, ParamStore};
use super::tape::NodeId;
use ndarray::{Array2, Axis};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.05;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `agg(a, b) = LeakyReLU(a + b)`, the order-invariant pair aggregation.
pub fn agg(ctx: &mut Ctx, a: NodeId, b: NodeId) -> NodeId {
    let s = ctx.tape.add(a, b);
    ctx.tape.leaky_relu(s, LEAKY_SLOPE)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear { name: name.into(), din, dout }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(&self.name, self.din, self.dout, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        let y = ctx.tape.matmul(x, w);
        ctx.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        BatchNorm { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_batch_norm(&self.name, self.dim);
    }

    /// Train mode normalizes with the batch statistics of the rows it sees
    /// (biased variance, as in torch) and records them for the running
    /// update; eval mode uses the stored running statistics.
    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let gamma = ctx.param(&format!("{}.gamma", self.name));
        let beta = ctx.param(&format!("{}.beta", self.name));
        let (n, _) = ctx.tape.shape(x);
        let xhat = if ctx.train {
            let sum = ctx.tape.sum_axis0(x);
            let mean = ctx.tape.scale(sum, 1.0 / n as f64);
            let neg_mean = ctx.tape.neg(mean);
            let centered = ctx.tape.add_row(x, neg_mean);
            let sq = ctx.tape.mul(centered, centered);
            let var_sum = ctx.tape.sum_axis0(sq);
            let var = ctx.tape.scale(var_sum, 1.0 / n as f64);
            ctx.record_bn(&self.name, ctx.tape.value(mean).clone(), ctx.tape.value(var).clone());
            let var_eps = ctx.tape.add_scalar(var, BN_EPS);
            let std = ctx.tape.sqrt(var_eps);
            let inv = {
                let ones = ctx.tape.leaf(Array2::ones((1, self.dim)));
                ctx.tape.div(ones, std)
            };
            ctx.tape.mul_row(centered, inv)
        } else {
            let mean = ctx.stat(&format!("{}.mean", self.name));
            let var = ctx.stat(&format!("{}.var", self.name));
            let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let neg_mean = ctx.tape.leaf(-mean);
            let inv = ctx.tape.leaf(inv);
            let centered = ctx.tape.add_row(x, neg_mean);
            ctx.tape.mul_row(centered, inv)
        };
        let scaled = ctx.tape.mul_row(xhat, gamma);
        ctx.tape.add_row(scaled, beta)
    }
}

/// `Mlp` over widths `[k_0, .., k_m]`: hidden blocks `linear + BN +
/// LeakyReLU(0.05)` for `k_0 -> .. -> k_{m-1}`, then a linear output block
/// to `k_m`. A single pair of widths is just a linear layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "MLP needs at least input and output widths");
        assert!(widths.iter().all(|&w| w > 0));
        Mlp { name: name.into(), widths: widths.to_vec() }
    }

    pub fn din(&self) -> usize {
        self.widths[0]
    }

    pub fn dout(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn hidden_count(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for i in 0..self.hidden_count() {
            store.init_linear(&format!("{}.h{i}.lin", self.name), self.widths[i], self.widths[i + 1], rng);
            store.init_batch_norm(&format!("{}.h{i}.bn", self.name), self.widths[i + 1]);
        }
        let last = self.widths.len() - 2;
        store.init_linear(&format!("{}.out", self.name), self.widths[last], self.widths[last + 1], rng);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let (_, din) = ctx.tape.shape(x);
        assert_eq!(din, self.din(), "MLP {} input width mismatch", self.name);
        let mut h = x;
        for i in 0..self.hidden_count() {
            let lin = Linear::new(format!("{}.h{i}.lin", self.name), self.widths[i], self.widths[i + 1]);
            let bn = BatchNorm::new(format!("{}.h{i}.bn", self.name), self.widths[i + 1]);
            h = lin.forward(ctx, h);
            h = bn.forward(ctx, h);
            h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let last = self.widths.len() - 2;
        let out = Linear::new(format!("{}.out", self.name), self.widths[last], self.widths[last + 1]);
        out.forward(ctx, h)
    }

    /// Forward pass followed by a sigmoid head.
    pub fn forward_sigmoid(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let y = self.forward(ctx, x);
        ctx.tape.sigmoid(y)
    }
}

/// An MLP whose output is wrapped in `LeakyReLU(BN(..))`, the form used
/// for edge-feature heads and skip connections.
#[derive(Debug, Clone)]
pub struct WrappedMlp {
    pub mlp: Mlp,
}

impl WrappedMlp {
    pub fn new(name: impl Into<String>, widths: &[usize]) -> Self {
        WrappedMlp { mlp: Mlp::new(name, widths) }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mlp.init(store, rng);
        store.init_batch_norm(&format!("{}.obn", self.mlp.name), self.mlp.dout());
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let y = self.mlp.forward(ctx, x);
        let bn = BatchNorm::new(format!("{}.obn", self.mlp.name), self.mlp.dout());
        let y = bn.forward(ctx, y);
        ctx.tape.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Batch statistics used by tests.
pub fn batch_mean_var(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Ctx;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activations_match_definitions() {
        let mut store = ParamStore::new();
        store.insert("unused", arr2(&[[0.0]]));
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.leaf(arr2(&[[-1.0, 0.0, 2.0]]));
        let lr = ctx.tape.leaky_relu(x, LEAKY_SLOPE);
        assert_eq!(ctx.tape.value(lr), &arr2(&[[-0.05, 0.0, 2.0]]));
        let s = ctx.tape.sigmoid(x);
        assert!((ctx.tape.value(s)[(0, 1)] - 0.5).abs() < 1e-15);
        let t = ctx.tape.tanh(x);
        assert!((ctx.tape.value(t)[(0, 2)] - 2.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn zeroed_mlp_with_identity_bn_outputs_zero_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("m", &[3, 4, 2]);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng);
        for (_, v) in store.params.iter_mut() {
            v.fill(0.0);
        }
        // gamma back to 1 (identity affine), running stats are mean 0 var 1
        *store.params.get_mut("m.h0.bn.gamma").unwrap() = Array2::ones((1, 4));
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.leaf(arr2(&[[1.0, -2.0, 3.0]]));
        let y = mlp.forward(&mut ctx, x);
        assert!(ctx.tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_block_with_identity_weights_is_identity() {
        let mlp = Mlp::new("m", &[3, 3]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mlp.init(&mut store, &mut rng);
        *store.params.get_mut("m.out.w").unwrap() = Array2::eye(3);
        *store.params.get_mut("m.out.b").unwrap() = Array2::zeros((1, 3));
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.leaf(arr2(&[[0.5, -1.5, 2.5], [1.0, 2.0, 3.0]]));
        let y = mlp.forward(&mut ctx, x);
        assert_eq!(ctx.tape.value(y), ctx.tape.value(x));
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let bn = BatchNorm::new("bn", 2);
        let mut store = ParamStore::new();
        bn.init(&mut store);
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.leaf(arr2(&[[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]]));
        let y = bn.forward(&mut ctx, x);
        let v = ctx.tape.value(y);
        let (mean, var) = batch_mean_var(v);
        assert!(mean.iter().all(|&m| m.abs() < 1e-12));
        // unit variance up to the epsilon in the denominator
        assert!(var.iter().all(|&v| (v - 1.0).abs() < 1e-3));
    }
}
