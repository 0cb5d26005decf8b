//! Central finite-difference verification of analytic gradients.

use super::params::ParamStore;
use indexmap::IndexMap;
use ndarray::Array2;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub group: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with an absolute floor so exact zeros compare equal.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Checks analytic gradients of `eval` (loss value + gradient map) against
/// central finite differences for every parameter whose name starts with
/// one of `groups`' prefixes. `max_coords` caps the coordinates probed per
/// parameter tensor (probed deterministically, evenly spaced).
pub fn check_groups(
    store: &ParamStore,
    groups: &[&str],
    max_coords: usize,
    eval: &dyn Fn(&ParamStore) -> (f64, IndexMap<String, Array2<f64>>),
) -> Vec<GradCheckReport> {
    let (_, analytic) = eval(store);
    let mut reports = Vec::new();
    for &group in groups {
        let names: Vec<String> = store
            .params
            .keys()
            .filter(|k| k.starts_with(&format!("{group}.")) || k.as_str() == group)
            .cloned()
            .collect();
        let mut max_err: f64 = 0.0;
        let mut checked = 0;
        for name in &names {
            let shape = store.params[name].dim();
            let len = shape.0 * shape.1;
            let stride = (len / max_coords.max(1)).max(1);
            let analytic_grad = analytic.get(name);
            for flat in (0..len).step_by(stride) {
                let (i, j) = (flat / shape.1, flat % shape.1);
                let mut plus = store.clone();
                plus.params[name][(i, j)] += FD_STEP;
                let mut minus = store.clone();
                minus.params[name][(i, j)] -= FD_STEP;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
                let an = analytic_grad.map(|g| g[(i, j)]).unwrap_or(0.0);
                max_err = max_err.max(rel_err(an, fd));
                checked += 1;
            }
        }
        reports.push(GradCheckReport {
            group: group.to_string(),
            coords_checked: checked,
            max_rel_err: max_err,
            pass: max_err <= FD_TOL,
        });
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Mlp;
    use crate::nn::params::Ctx;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp_eval(input: Array2<f64>, mlp: Mlp) -> impl Fn(&ParamStore) -> (f64, IndexMap<String, Array2<f64>>) {
        move |store: &ParamStore| {
            let mut ctx = Ctx::new(store, true);
            let x = ctx.tape.leaf(input.clone());
            let y = mlp.forward(&mut ctx, x);
            let loss = ctx.tape.sum_all(y);
            let v = ctx.tape.scalar(loss);
            let grads = ctx.tape.backward(loss);
            (v, ctx.param_grads(&grads))
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mlp = Mlp::new("m", &[3, 5, 2]);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng);
        let input = arr2(&[
            [0.9, -1.3, 0.4],
            [0.2, 0.8, -0.7],
            [-0.5, 0.1, 1.2],
            [1.1, -0.2, 0.3],
        ]);
        let reports = check_groups(&store, &["m"], 64, &mlp_eval(input, mlp.clone()));
        assert!(reports[0].pass, "max rel err {}", reports[0].max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::new("m", &[2, 3, 1]);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut rng);
        let input = arr2(&[[0.6, -0.9], [1.4, 0.3]]);
        let honest = mlp_eval(input, mlp);
        let corrupted = move |store: &ParamStore| {
            let (v, mut g) = honest(store);
            if let Some(w) = g.get_mut("m.out.w") {
                w[(0, 0)] += 0.5;
            }
            (v, g)
        };
        let reports = check_groups(&store, &["m"], 64, &corrupted);
        assert!(!reports[0].pass, "corruption must be flagged");
    }
}
