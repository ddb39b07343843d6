//! Parameter update rules: plain SGD, AdaGrad, and Adam.
//!
//! Forest gradients are extremely sparse (two nonzero components per tree
//! per example), so the gradient histories of forest parameters stay small
//! and the adaptive rules hand them correspondingly larger effective steps.
//! AdaGrad and SGD may skip zero-gradient coordinates without changing the
//! result; Adam decays its moment estimates on every coordinate every step,
//! so its update is dense by construction.

use std::collections::HashMap;

use crate::graph::Graph;
use crate::real::Real;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Hyperparameters shared by the three rules. Weight decay is coupled: it is
/// added to the gradient before the rule applies.
#[derive(Clone, Copy, Debug)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: DEFAULT_EPSILON,
            weight_decay: 0.0,
        }
    }
}

/// One SGD step on a single parameter tensor.
pub fn sgd_step<R: Real>(param: &mut [R], grad: &[R], learning_rate: f64, weight_decay: f64) {
    let lr = R::from_f64(learning_rate);
    let wd = R::from_f64(weight_decay);
    for (p, g) in param.iter_mut().zip(grad) {
        let g = *g + wd * *p;
        *p = *p - lr * g;
    }
}

/// One AdaGrad step; `accum` is the running sum of squared gradients.
pub fn adagrad_step<R: Real>(
    param: &mut [R],
    grad: &[R],
    accum: &mut [R],
    learning_rate: f64,
    epsilon: f64,
    weight_decay: f64,
) {
    let lr = R::from_f64(learning_rate);
    let eps = R::from_f64(epsilon);
    let wd = R::from_f64(weight_decay);
    for ((p, g), a) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        let g = *g + wd * *p;
        if g == R::zero() {
            continue;
        }
        *a = *a + g * g;
        *p = *p - lr * g / (a.sqrt() + eps);
    }
}

/// One Adam step with bias-corrected first and second moments. `step` is the
/// 1-based step count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<R: Real>(
    param: &mut [R],
    grad: &[R],
    first_moment: &mut [R],
    second_moment: &mut [R],
    step: u64,
    settings: &OptimizerSettings,
) {
    let lr = settings.learning_rate;
    let b1 = settings.beta1;
    let b2 = settings.beta2;
    let correction1 = 1.0 - b1.powi(step as i32);
    let correction2 = 1.0 - b2.powi(step as i32);
    let b1r = R::from_f64(b1);
    let b2r = R::from_f64(b2);
    let one_m_b1 = R::from_f64(1.0 - b1);
    let one_m_b2 = R::from_f64(1.0 - b2);
    let c1 = R::from_f64(correction1);
    let c2 = R::from_f64(correction2);
    let lr_r = R::from_f64(lr);
    let eps = R::from_f64(settings.epsilon);
    let wd = R::from_f64(settings.weight_decay);
    for (((p, g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(first_moment.iter_mut())
        .zip(second_moment.iter_mut())
    {
        let g = *g + wd * *p;
        *m = b1r * *m + one_m_b1 * g;
        *v = b2r * *v + one_m_b2 * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr_r * m_hat / (v_hat.sqrt() + eps);
    }
}

enum Rule<R: Real> {
    Sgd,
    AdaGrad {
        accum: HashMap<String, Vec<R>>,
    },
    Adam {
        first: HashMap<String, Vec<R>>,
        second: HashMap<String, Vec<R>>,
        step: u64,
    },
}

/// Serialized optimizer state: `(step count, entries sorted by qualified
/// parameter name)`, each entry holding the rule's accumulator tensors.
pub type StateEntries<R> = (u64, Vec<(String, Vec<Vec<R>>)>);

/// Stateful optimizer driving one of the update rules over every learnable
/// parameter of a graph. State is keyed by qualified parameter name and
/// iterated in the graph's insertion order, so updates are deterministic.
pub struct Optimizer<R: Real> {
    settings: OptimizerSettings,
    rule: Rule<R>,
}

impl<R: Real> Optimizer<R> {
    pub fn sgd(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            rule: Rule::Sgd,
        }
    }

    pub fn adagrad(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            rule: Rule::AdaGrad {
                accum: HashMap::new(),
            },
        }
    }

    pub fn adam(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            rule: Rule::Adam {
                first: HashMap::new(),
                second: HashMap::new(),
                step: 0,
            },
        }
    }

    pub fn by_name(name: &str, settings: OptimizerSettings) -> Option<Self> {
        match name {
            "sgd" => Some(Self::sgd(settings)),
            "adagrad" => Some(Self::adagrad(settings)),
            "adam" => Some(Self::adam(settings)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.rule {
            Rule::Sgd => "sgd",
            Rule::AdaGrad { .. } => "adagrad",
            Rule::Adam { .. } => "adam",
        }
    }

    pub fn settings(&self) -> &OptimizerSettings {
        &self.settings
    }

    /// Applies one update step to every learnable parameter of `graph`,
    /// consuming the gradients of the last backward pass.
    pub fn step(&mut self, graph: &mut Graph<R>) {
        let settings = self.settings;
        match &mut self.rule {
            Rule::Sgd => {
                graph.for_each_learnable(|_, param| {
                    sgd_step(
                        param.value.data_mut(),
                        param.grad.data(),
                        settings.learning_rate,
                        settings.weight_decay,
                    );
                });
            }
            Rule::AdaGrad { accum } => {
                graph.for_each_learnable(|name, param| {
                    let state = accum
                        .entry(name.to_string())
                        .or_insert_with(|| vec![R::zero(); param.value.len()]);
                    adagrad_step(
                        param.value.data_mut(),
                        param.grad.data(),
                        state,
                        settings.learning_rate,
                        settings.epsilon,
                        settings.weight_decay,
                    );
                });
            }
            Rule::Adam { first, second, step } => {
                *step += 1;
                let now = *step;
                graph.for_each_learnable(|name, param| {
                    let m = first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![R::zero(); param.value.len()]);
                    let v = second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![R::zero(); param.value.len()]);
                    adam_step(
                        param.value.data_mut(),
                        param.grad.data(),
                        m,
                        v,
                        now,
                        &settings,
                    );
                });
            }
        }
    }

    /// Serializable view of the optimizer state: `(kind, step, entries)`
    /// with entries sorted by key.
    pub fn state_entries(&self) -> StateEntries<R> {
        match &self.rule {
            Rule::Sgd => (0, Vec::new()),
            Rule::AdaGrad { accum } => {
                let mut keys: Vec<_> = accum.keys().cloned().collect();
                keys.sort();
                (
                    0,
                    keys.into_iter()
                        .map(|k| {
                            let v = accum[&k].clone();
                            (k, vec![v])
                        })
                        .collect(),
                )
            }
            Rule::Adam { first, second, step } => {
                let mut keys: Vec<_> = first.keys().cloned().collect();
                keys.sort();
                (
                    *step,
                    keys.into_iter()
                        .map(|k| {
                            let m = first[&k].clone();
                            let v = second[&k].clone();
                            (k, vec![m, v])
                        })
                        .collect(),
                )
            }
        }
    }

    /// Restores state captured by [`state_entries`](Self::state_entries).
    pub fn load_state(&mut self, step_count: u64, entries: Vec<(String, Vec<Vec<R>>)>) {
        match &mut self.rule {
            Rule::Sgd => {}
            Rule::AdaGrad { accum } => {
                accum.clear();
                for (k, mut tensors) in entries {
                    if tensors.len() == 1 {
                        accum.insert(k, tensors.pop().unwrap());
                    }
                }
            }
            Rule::Adam { first, second, step } => {
                *step = step_count;
                first.clear();
                second.clear();
                for (k, mut tensors) in entries {
                    if tensors.len() == 2 {
                        let v = tensors.pop().unwrap();
                        let m = tensors.pop().unwrap();
                        first.insert(k.clone(), m);
                        second.insert(k, v);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_fixed_point_and_direct_formula() {
        let mut p = vec![1.0f64];
        sgd_step(&mut p, &[0.0], 0.1, 0.0);
        assert_eq!(p, vec![1.0]);
        sgd_step(&mut p, &[2.0], 0.1, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        // loss p^2, grad 2p, eta 0.4: p <- 0.2 p, ten steps from 1.
        let mut p = vec![1.0f64];
        for _ in 0..10 {
            let grad = 2.0 * p[0];
            sgd_step(&mut p, &[grad], 0.4, 0.0);
        }
        assert!((p[0] - 0.2f64.powi(10)).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn sgd_weight_decay_is_coupled() {
        let mut p = vec![1.0f64];
        sgd_step(&mut p, &[0.0], 0.1, 0.5);
        assert!((p[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn adagrad_first_step_is_learning_rate_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut accum = vec![0.0f64, 0.0];
        adagrad_step(&mut p, &[3.0, -0.25], &mut accum, 0.05, 1e-12, 0.0);
        assert!((p[0] + 0.05).abs() < 1e-9);
        assert!((p[1] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn adagrad_zero_gradient_changes_nothing() {
        let mut p = vec![2.0f64];
        let mut accum = vec![9.0f64];
        adagrad_step(&mut p, &[0.0], &mut accum, 0.1, 1e-8, 0.0);
        assert_eq!(p, vec![2.0]);
        assert_eq!(accum, vec![9.0]);
    }

    #[test]
    fn adagrad_two_step_recurrence() {
        let mut p = vec![0.0f64];
        let mut accum = vec![0.0f64];
        adagrad_step(&mut p, &[3.0], &mut accum, 1.0, 1e-8, 0.0);
        adagrad_step(&mut p, &[4.0], &mut accum, 1.0, 1e-8, 0.0);
        // updates -3/3 then -4/5
        assert!((p[0] + 1.0 + 0.8).abs() < 1e-6, "{}", p[0]);
        assert_eq!(accum, vec![25.0]);
    }

    #[test]
    fn adagrad_effective_step_never_grows() {
        let mut accum = vec![0.0f64];
        let mut previous = f64::INFINITY;
        let mut p = vec![0.0f64];
        for g in [0.5, 2.0, 0.1, 1.0, 3.0] {
            adagrad_step(&mut p, &[g], &mut accum, 1.0, 1e-8, 0.0);
            let effective = 1.0 / (accum[0].sqrt() + 1e-8);
            assert!(effective <= previous);
            previous = effective;
        }
    }

    #[test]
    fn adam_zero_history_and_zero_gradient_is_a_fixed_point() {
        let settings = OptimizerSettings::default();
        let mut p = vec![1.5f64];
        let mut m = vec![0.0f64];
        let mut v = vec![0.0f64];
        adam_step(&mut p, &[0.0], &mut m, &mut v, 1, &settings);
        assert_eq!(p, vec![1.5]);
    }

    #[test]
    fn adam_first_step_is_learning_rate_times_sign() {
        let settings = OptimizerSettings {
            learning_rate: 0.005,
            ..OptimizerSettings::default()
        };
        for g in [0.3f64, -4.0, 0.001] {
            let mut p = vec![0.0f64];
            let mut m = vec![0.0f64];
            let mut v = vec![0.0f64];
            adam_step(&mut p, &[g], &mut m, &mut v, 1, &settings);
            assert!(
                (p[0] + 0.005 * g.signum()).abs() < 1e-6,
                "g {g}: step {}",
                p[0]
            );
        }
    }

    #[test]
    fn adam_constant_gradient_update_approaches_learning_rate() {
        let settings = OptimizerSettings {
            learning_rate: 0.01,
            ..OptimizerSettings::default()
        };
        let mut p = vec![0.0f64];
        let mut m = vec![0.0f64];
        let mut v = vec![0.0f64];
        let mut last = 0.0;
        for step in 1..=5000u64 {
            let before = p[0];
            adam_step(&mut p, &[2.5], &mut m, &mut v, step, &settings);
            last = (p[0] - before).abs();
        }
        assert!((last - 0.01).abs() < 1e-4, "update {last}");
    }

    #[test]
    fn updates_are_elementwise_permutation_equivariant() {
        let settings = OptimizerSettings::default();
        let grads = [0.7f64, -1.2, 0.0, 3.4];
        let mut p1 = vec![0.1f64, 0.2, 0.3, 0.4];
        let mut m1 = vec![0.0f64; 4];
        let mut v1 = vec![0.0f64; 4];
        adam_step(&mut p1, &grads, &mut m1, &mut v1, 1, &settings);

        // Reversed coordinates.
        let rg: Vec<f64> = grads.iter().rev().copied().collect();
        let mut p2 = vec![0.4f64, 0.3, 0.2, 0.1];
        let mut m2 = vec![0.0f64; 4];
        let mut v2 = vec![0.0f64; 4];
        adam_step(&mut p2, &rg, &mut m2, &mut v2, 1, &settings);
        let back: Vec<f64> = p2.iter().rev().copied().collect();
        assert_eq!(p1, back);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let settings = OptimizerSettings::default();
        let mut a = Optimizer::<f64>::adam(settings);
        let mut b = Optimizer::<f64>::adam(settings);

        use crate::graph::{Graph, Op, OpBackward, OpForward, Param};
        struct OneParam;
        impl Op<f64> for OneParam {
            fn kind(&self) -> &'static str {
                "one"
            }
            fn init_params(&mut self, _rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Param<f64>> {
                vec![Param::new("p", Tensor::filled(&[2], 1.0), true)]
            }
            fn forward(&mut self, ctx: OpForward<'_, f64>) -> crate::error::Result<()> {
                ctx.output.reset(&[1]);
                Ok(())
            }
            fn backward(&mut self, _ctx: OpBackward<'_, f64>) -> crate::error::Result<()> {
                Ok(())
            }
        }
        let build = || {
            let mut g: Graph<f64> = Graph::new();
            g.add_input("data").unwrap();
            g.add_node(
                "n",
                &["data"],
                Box::new(OneParam),
                &mut crate::rng::seed_stream(0, "x"),
            )
            .unwrap();
            g
        };
        let mut g1 = build();
        let mut g2 = build();
        // Drive one optimizer, capture, restore into the other, then verify
        // both produce identical updates afterwards.
        for _ in 0..3 {
            g1.param_mut("n", "p").unwrap().grad = Tensor::filled(&[2], 0.3);
            a.step(&mut g1);
        }
        let (step, entries) = a.state_entries();
        g2.param_mut("n", "p").unwrap().value = g1.param("n", "p").unwrap().value.clone();
        b.load_state(step, entries);
        g1.param_mut("n", "p").unwrap().grad = Tensor::filled(&[2], -0.7);
        g2.param_mut("n", "p").unwrap().grad = Tensor::filled(&[2], -0.7);
        a.step(&mut g1);
        b.step(&mut g2);
        assert_eq!(
            g1.param("n", "p").unwrap().value.data(),
            g2.param("n", "p").unwrap().value.data()
        );
    }
}
