//! Hard Gumbel-softmax: one-hot categorical samples with a
//! straight-through gradient estimator.

use super::params::Ctx;
use super::tape::NodeId;
use ndarray::Array2;
use rand::Rng;

/// Row-wise hard Gumbel-softmax. The forward value is exactly one-hot per
/// row (argmax of `(logits + gumbel) / tau`); the backward pass sees the
/// soft sample. Returns the output node and the chosen index per row.
pub fn hard_gumbel_softmax(
    ctx: &mut Ctx,
    logits: NodeId,
    tau: f64,
    rng: &mut impl Rng,
) -> (NodeId, Vec<usize>) {
    assert!(tau > 0.0);
    let (n, k) = ctx.tape.shape(logits);
    let noise = Array2::from_shape_fn((n, k), |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    });
    let noise = ctx.tape.leaf(noise);
    let shifted = ctx.tape.add(logits, noise);
    let scaled = ctx.tape.scale(shifted, 1.0 / tau);
    let soft = ctx.tape.softmax_rows(scaled);
    let soft_value = ctx.tape.value(soft).clone();
    let mut choices = Vec::with_capacity(n);
    let mut hard = Array2::zeros((n, k));
    for (i, row) in soft_value.rows().into_iter().enumerate() {
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        hard[(i, best)] = 1.0;
        choices.push(best);
    }
    // straight-through: value = hard, gradient flows into the soft sample
    let offset = ctx.tape.leaf(hard - &soft_value);
    let out = ctx.tape.add(offset, soft);
    (out, choices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_is_one_hot_and_grad_flows() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = ctx.tape.leaf(arr2(&[[0.3, -0.2, 1.0], [5.0, -5.0, 0.0]]));
        let (out, choices) = hard_gumbel_softmax(&mut ctx, logits, 1.0, &mut rng);
        let v = ctx.tape.value(out);
        for (i, row) in v.rows().into_iter().enumerate() {
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(row[choices[i]], 1.0);
        }
        let s = ctx.tape.sum_all(out);
        let grads = ctx.tape.backward(s);
        assert!(grads.get(logits).is_some());
    }

    #[test]
    fn dominant_logit_wins_nearly_always() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        let n = 10_000;
        for _ in 0..n {
            let mut ctx = Ctx::new(&store, true);
            let logits = ctx.tape.leaf(arr2(&[[20.0, -20.0, -20.0, -20.0]]));
            let (_, c) = hard_gumbel_softmax(&mut ctx, logits, 1.0, &mut rng);
            if c[0] == 0 {
                hits += 1;
            }
        }
        assert!(hits as f64 / n as f64 >= 0.999, "dominant frequency {}", hits as f64 / n as f64);
    }

    #[test]
    fn equal_logits_are_uniform() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 4;
        let n = 100_000u32;
        let mut counts = vec![0u32; k];
        for _ in 0..n {
            let mut ctx = Ctx::new(&store, true);
            let logits = ctx.tape.leaf(Array2::zeros((1, k)));
            let (_, c) = hard_gumbel_softmax(&mut ctx, logits, 1.0, &mut rng);
            counts[c[0]] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma + 1e-9, "freq {freq} vs {p} (3s = {})", 3.0 * sigma);
        }
    }

    #[test]
    fn temperature_does_not_change_argmax() {
        let store = ParamStore::new();
        for seed in 0..50 {
            let logits_raw = arr2(&[[0.5, -1.0, 2.0, 0.0]]);
            let pick = |tau: f64| {
                let mut ctx = Ctx::new(&store, true);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let logits = ctx.tape.leaf(logits_raw.clone());
                hard_gumbel_softmax(&mut ctx, logits, tau, &mut rng).1[0]
            };
            assert_eq!(pick(1.0), pick(0.1));
            assert_eq!(pick(1.0), pick(10.0));
        }
    }
}
