#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use lindt_core::lindt::{dual_loss_and_grads, DualModel};
use lindt_core::nn::{loss_and_grad, Activation, Batch, LayerSpec, LayerStack, WeightVector};
use lindt_core::ScenarioConfig;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A stack of `min_depth..=3` layers with widths 1..=6 and mixed activations.
pub fn random_stack<R: Rng>(rng: &mut R, min_depth: usize) -> LayerStack {
    let depth = rng.random_range(min_depth..=3);
    let classes = rng.random_range(2..=4);
    let mut widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
    widths.push(classes);
    let layers = (0..depth)
        .map(|m| LayerSpec {
            input: widths[m],
            output: widths[m + 1],
            activation: if m + 1 == depth {
                Activation::Identity
            } else {
                [Activation::Relu, Activation::Tanh, Activation::Identity][rng.random_range(0..3)]
            },
        })
        .collect();
    LayerStack::new(layers).expect("valid random stack")
}

pub fn random_weights<R: Rng>(rng: &mut R, stack: &LayerStack, scale: f64) -> WeightVector {
    WeightVector::new(normal_vec(rng, stack.param_count(), scale), Arc::clone(stack.layout())).unwrap()
}

pub fn random_batch<R: Rng>(rng: &mut R, stack: &LayerStack) -> Batch {
    let n = rng.random_range(1..=5);
    let x = normal_matrix(rng, n, stack.input_width(), 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..stack.num_classes())).collect();
    Batch::new(x, labels).unwrap()
}

/// Central finite differences of `f` at `w`.
pub fn numeric_grad(w: &WeightVector, h: f64, f: impl Fn(&WeightVector) -> f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut plus = w.clone();
            plus.values_mut()[i] += h;
            let mut minus = w.clone();
            minus.values_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error of the analytic network gradient over `draws` random instances.
pub fn nn_gradient_worst<R: Rng>(rng: &mut R, draws: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let stack = random_stack(rng, 1);
        let w = random_weights(rng, &stack, 0.7);
        let batch = random_batch(rng, &stack);
        let (_, g) = loss_and_grad(&stack, &w, &batch).unwrap();
        let num = numeric_grad(&w, FD_STEP, |v| loss_and_grad(&stack, v, &batch).unwrap().0);
        worst = worst.max(rel_err(g.values(), &num));
    }
    worst
}

/// Worst relative error of both dual-model gradients over `draws` random instances.
pub fn dual_gradient_worst<R: Rng>(rng: &mut R, draws: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let stack = random_stack(rng, 2);
        let w = random_weights(rng, &stack, 0.7);
        let v = random_weights(rng, &stack, 0.7);
        let batch = random_batch(rng, &stack);
        let dm = DualModel::new(stack.clone(), w.clone(), v.clone()).unwrap();
        let (_, gw, gv) = dual_loss_and_grads(&dm, &batch).unwrap();
        let loss = |w: &WeightVector, v: &WeightVector| {
            let dm = DualModel::new(stack.clone(), w.clone(), v.clone()).unwrap();
            dual_loss_and_grads(&dm, &batch).unwrap().0
        };
        let num_w = numeric_grad(&w, FD_STEP, |x| loss(x, &v));
        let num_v = numeric_grad(&v, FD_STEP, |x| loss(&w, x));
        worst = worst.max(rel_err(gw.values(), &num_w)).max(rel_err(gv.values(), &num_v));
    }
    worst
}

/// Per-round `(w_div, divergence bound)` of a two-client softmax-regression
/// federation trained with full-batch gradient descent.
///
/// Both clients draw every class from the same sample pool, replicated in
/// client-specific multiples, so each client's loss is exactly the prior-weighted
/// mixture of the class-conditional losses that the bound is stated for.
pub fn bound_check_run(seed: u64, rounds: u32, steps: usize) -> Vec<(f64, f64)> {
    use lindt_core::data::{Dataset, SyntheticTaskSpec};
    use lindt_core::fed::{aggregate_plain, client_update_traced, LocalSchedule};
    use lindt_core::monitor::{class_gradient_max, estimate_lipschitz_logistic, prop1_bound, weight_divergence, BoundInputs};
    use rand::SeedableRng;

    let spec = SyntheticTaskSpec { classes: 3, features: 5, separation: 1.5, samples: 300, seed, ..Default::default() };
    let task = lindt_core::generate_task(&spec).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pools: Vec<Dataset> = (0..3).map(|y| task.sample_class(y, 8, &mut rng)).collect();
    let pool_refs: Vec<&Dataset> = pools.iter().collect();
    let all = Dataset::concat(&pool_refs).unwrap();
    let lipschitz: Vec<f64> = (0..3).map(|y| estimate_lipschitz_logistic(&all, y)).collect();

    let multiples = [[3usize, 1, 0], [1, 1, 2]];
    let clients: Vec<(Dataset, Vec<f64>)> = multiples
        .iter()
        .map(|m| {
            let parts: Vec<&Dataset> =
                m.iter().enumerate().flat_map(|(y, &c)| std::iter::repeat_n(&pools[y], c)).collect();
            let data = Dataset::concat(&parts).unwrap();
            let prior = data.histogram();
            (data, prior)
        })
        .collect();

    let stack = LayerStack::logistic(5, 3).unwrap();
    let mut w = stack.init_weights(&mut rng);
    let eta = 0.1;
    let mut out = Vec::new();
    for _ in 0..rounds {
        let mut uploads = Vec::new();
        let mut traces = Vec::new();
        for (data, _) in &clients {
            let schedule = LocalSchedule { batch_size: data.len(), epochs: steps, learning_rate: eta };
            let (wi, trace) =
                client_update_traced(&stack, data, &w, &schedule, |v| class_gradient_max(&stack, &pools, v)).unwrap();
            uploads.push(wi);
            traces.push(trace);
        }
        let agg = aggregate_plain(&uploads).unwrap();
        let w_div = weight_divergence(&uploads, &agg).unwrap();
        let inputs = BoundInputs {
            priors: clients.iter().map(|c| c.1.clone()).collect(),
            lipschitz: lipschitz.clone(),
            g_max: traces,
            learning_rate: eta,
            noise_norm: 0.0,
        };
        out.push((w_div, prop1_bound(&stack, &inputs).unwrap()));
        w = agg;
    }
    out
}
