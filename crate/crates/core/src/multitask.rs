//! Weighted multi-task loss and bi-level optimisation of the task weights.
//!
//! The total loss is `Σ_k λ_k L_k(Θ)`. The weights live on
//! `{λ ≥ 0, Σ λ = K}` so uniform weighting is `λ = 1`.
//!
//! The outer problem maximises validation AUC through the pairwise hinge
//! surrogate `mean max(0, 1 − (f⁺ − f⁻))`. Its gradient in `λ` is taken
//! through one unrolled inner SGD step
//!
//! ```text
//! Θ'(λ) = Θ − η_in Σ_k λ_k ∇L_k(Θ)
//! ∂S(Θ'(λ))/∂λ_k = −η_in ⟨∇S(Θ'), ∇L_k(Θ)⟩
//! ```
//!
//! which is exact for the unrolled step and needs no second derivatives.
//! A central finite-difference estimate over `λ` is available as a check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{GradSet, ParamStore};
use crate::tensor::Tensor;

/// Nonnegative task weights summing to the task count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaWeights(Vec<f64>);

impl LambdaWeights {
    pub fn uniform(k: usize) -> Self {
        LambdaWeights(vec![1.0; k])
    }

    /// Projects `values` onto the feasible set.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("no task weights".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("task weights must be finite".into()));
        }
        let k = values.len() as f64;
        Ok(LambdaWeights(project_simplex(&values, k)))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Euclidean projection onto `{x ≥ 0, Σ x = total}`. Already feasible
/// inputs are returned unchanged.
pub fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - total).abs() <= 1e-12 * total.max(1.0) {
        return v.to_vec();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        css += x;
        let t = (css - total) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// `Σ_k λ_k L_k` on the graph.
pub fn total_loss(g: &mut Graph, losses: &[Var], lambda: &[f64]) -> Result<Var> {
    if losses.len() != lambda.len() {
        return Err(Error::Contract(format!(
            "{} losses but {} weights",
            losses.len(),
            lambda.len()
        )));
    }
    if losses.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.stack(losses)?;
    g.weighted_sum(s, lambda)
}

/// `Σ_k λ_k L_k` on plain values.
pub fn total_loss_value(losses: &[f64], lambda: &[f64]) -> Result<f64> {
    if losses.len() != lambda.len() {
        return Err(Error::Contract(format!(
            "{} losses but {} weights",
            losses.len(),
            lambda.len()
        )));
    }
    Ok(losses.iter().zip(lambda).map(|(l, w)| l * w).sum())
}

fn class_counts(labels: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for &y in labels {
        if y == 1.0 {
            pos += 1;
        } else if y != 0.0 {
            return Err(Error::Contract(format!("label {y} is not binary")));
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUC via rank sums with mid-ranks for ties.
pub fn exact_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            if labels[o] == 1.0 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Positive/negative index pairs: all of them when there are at most
/// `p_max`, otherwise `p_max` pairs drawn uniformly with replacement.
pub fn sample_pairs(pos: &[usize], neg: &[usize], p_max: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = pos.len() * neg.len();
    if total <= p_max {
        return pos.iter().flat_map(|&p| neg.iter().map(move |&n| (p, n))).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p_max)
        .map(|_| (pos[rng.random_range(0..pos.len())], neg[rng.random_range(0..neg.len())]))
        .collect()
}

/// Hinge surrogate of `1 − AUC` on plain scores.
pub fn surrogate_auc_loss(pos: &[f64], neg: &[f64], p_max: usize, seed: u64) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("surrogate needs positive and negative scores".into()));
    }
    let pi: Vec<usize> = (0..pos.len()).collect();
    let ni: Vec<usize> = (0..neg.len()).collect();
    let pairs = sample_pairs(&pi, &ni, p_max, seed);
    let s: f64 = pairs.iter().map(|&(p, n)| (1.0 - (pos[p] - neg[n])).max(0.0)).sum();
    Ok(s / pairs.len() as f64)
}

/// Hinge surrogate on the graph for scores `f[n]` with binary `labels`.
/// `None` when a class is missing.
pub fn surrogate_auc_graph(g: &mut Graph, scores: Var, labels: &[f64], p_max: usize, seed: u64) -> Result<Option<Var>> {
    if g.value(scores).numel() != labels.len() {
        return Err(Error::shape("surrogate_auc", g.shape(scores), &[labels.len()]));
    }
    class_counts(labels)?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1.0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let pairs = sample_pairs(&pos, &neg, p_max, seed);
    let pi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ni: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let fp = g.pick(scores, &pi)?;
    let fn_ = g.pick(scores, &ni)?;
    let d = g.sub(fn_, fp)?;
    let one = g.constant(Tensor::full(&[pairs.len()], 1.0));
    let m = g.add(d, one)?;
    let h = g.relu(m);
    Ok(Some(g.mean(h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypergradient {
    Unrolled,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilevelConfig {
    pub enabled: bool,
    /// Step size of the unrolled inner update.
    pub eta_in: f64,
    /// Step size of the weight update.
    pub eta_out: f64,
    /// Inner optimiser steps between weight updates.
    pub inner_steps: usize,
    /// Cap on sampled positive/negative pairs per task.
    pub p_max: usize,
    pub method: Hypergradient,
    /// Perturbation of each weight in the finite-difference estimate.
    pub fd_step: f64,
    /// Unroll the inner step over parameters shared by all tasks only,
    /// leaving task-specific towers out of the hypergradient.
    pub shared_only: bool,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            enabled: false,
            eta_in: 0.1,
            eta_out: 0.05,
            inner_steps: 50,
            p_max: 100_000,
            method: Hypergradient::Unrolled,
            fd_step: 1e-3,
            shared_only: false,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_in >= 0.0 && self.eta_out >= 0.0 && self.fd_step > 0.0) {
            return Err(Error::Config("bilevel step sizes must be nonnegative".into()));
        }
        if self.inner_steps == 0 || self.p_max == 0 {
            return Err(Error::Config("inner_steps and p_max must be positive".into()));
        }
        Ok(())
    }
}

/// What an outer step needs from a model.
pub trait BilevelObjective {
    fn num_tasks(&self) -> usize;

    /// Gradient of each task's training loss at `store`; `None` for a task
    /// without indicated samples.
    fn task_gradients(&mut self, store: &ParamStore) -> Result<Vec<Option<GradSet>>>;

    /// Outer objective (validation surrogate, lower is better) at `store`,
    /// with its parameter gradient when `with_grad`. `seed` fixes any pair
    /// subsampling. `None` when no task can be evaluated.
    fn validation_objective(&mut self, store: &ParamStore, seed: u64, with_grad: bool) -> Result<Option<(f64, Option<GradSet>)>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub lambda: LambdaWeights,
    pub hypergradient: Vec<f64>,
    /// Outer objective after the unrolled inner step at the old weights.
    pub objective: Option<f64>,
}

fn inner_step(store: &ParamStore, lambda: &[f64], grads: &[Option<GradSet>], eta_in: f64) -> ParamStore {
    let mut probe = store.clone();
    for (k, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            probe.axpy(-eta_in * lambda[k], g);
        }
    }
    probe
}

/// One weight update. `seed` fixes pair subsampling for every evaluation in
/// this step.
pub fn outer_step(
    lambda: &LambdaWeights,
    store: &ParamStore,
    objective: &mut dyn BilevelObjective,
    config: &BilevelConfig,
    seed: u64,
) -> Result<OuterStep> {
    let k = lambda.len();
    if objective.num_tasks() != k {
        return Err(Error::Contract("weight count differs from task count".into()));
    }
    let grads = objective.task_gradients(store)?;
    let lam = lambda.values();
    let mut h = vec![0.0; k];
    let value;
    match config.method {
        Hypergradient::Unrolled => {
            let probe = inner_step(store, lam, &grads, config.eta_in);
            match objective.validation_objective(&probe, seed, true)? {
                Some((v, Some(gs))) => {
                    value = Some(v);
                    for (j, g) in grads.iter().enumerate() {
                        if let Some(g) = g {
                            h[j] = -config.eta_in * gs.dot(g);
                        }
                    }
                }
                Some((v, None)) => {
                    return Err(Error::Contract(format!("objective {v} returned without gradient")));
                }
                None => value = None,
            }
        }
        Hypergradient::FiniteDifference => {
            let probe = inner_step(store, lam, &grads, config.eta_in);
            value = objective.validation_objective(&probe, seed, false)?.map(|r| r.0);
            if value.is_some() {
                for j in 0..k {
                    let mut eval = |delta: f64| -> Result<Option<f64>> {
                        let mut l = lam.to_vec();
                        l[j] += delta;
                        let p = inner_step(store, &l, &grads, config.eta_in);
                        Ok(objective.validation_objective(&p, seed, false)?.map(|r| r.0))
                    };
                    if let (Some(a), Some(b)) = (eval(config.fd_step)?, eval(-config.fd_step)?) {
                        h[j] = (a - b) / (2.0 * config.fd_step);
                    }
                }
            }
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite hypergradient {h:?}")));
    }
    if config.eta_out == 0.0 || value.is_none() {
        return Ok(OuterStep {
            lambda: lambda.clone(),
            hypergradient: h,
            objective: value,
        });
    }
    let stepped: Vec<f64> = lam.iter().zip(&h).map(|(l, g)| l - config.eta_out * g).collect();
    Ok(OuterStep {
        lambda: LambdaWeights(project_simplex(&stepped, k as f64)),
        hypergradient: h,
        objective: value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn brute_auc(s: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(exact_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(exact_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(exact_auc(&[0.3; 5], &[0.0, 1.0, 0.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(exact_auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        let s = [0.5, 0.5, 0.2, 0.9, 0.5];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(exact_auc(&s, &y).unwrap(), brute_auc(&s, &y));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss_value(&[0.5, 0.25], &[1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(total_loss_value(&[0.5, 0.25], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(total_loss_value(&[0.5], &[1.0, 1.0]).is_err());
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(0.25));
        let t = total_loss(&mut g, &[a, b], &[2.0, 0.0]).unwrap();
        assert_eq!(g.value(t).data(), &[1.0]);
    }

    #[test]
    fn surrogate_examples() {
        assert!((surrogate_auc_loss(&[0.9], &[0.2], 10, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(surrogate_auc_loss(&[3.0, 4.0], &[1.0, 0.5], 10, 0).unwrap(), 0.0);
        assert!(surrogate_auc_loss(&[], &[0.2], 10, 0).is_err());
        let mut g = Graph::new();
        let s = g.leaf(Tensor::vector(vec![0.9, 0.2, 0.5]));
        let v = surrogate_auc_graph(&mut g, s, &[1.0, 0.0, 1.0], 10, 0).unwrap().unwrap();
        let want = surrogate_auc_loss(&[0.9, 0.5], &[0.2], 10, 0).unwrap();
        assert!((g.value(v).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn projection() {
        let p = project_simplex(&[3.0, -1.0], 2.0);
        assert_eq!(p, vec![2.0, 0.0]);
        let p = project_simplex(&[1.5, 1.0, 0.2], 3.0);
        assert!((p.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        let feasible = vec![0.3, 1.7];
        assert_eq!(project_simplex(&feasible, 2.0), feasible);
        assert_eq!(LambdaWeights::new(vec![5.0]).unwrap().values(), &[1.0]);
    }

    /// Two quadratic tasks on `Θ ∈ R²`: task 0 pulls toward `a`, task 1
    /// toward `b`; the outer objective only cares about `a`.
    struct Toy {
        id: ParamId,
        a: [f64; 2],
        b: [f64; 2],
    }

    impl Toy {
        fn grad(&self, store: &ParamStore, target: [f64; 2]) -> GradSet {
            let th = store.value(self.id).data();
            let mut g = GradSet::empty(store.len());
            g.0[self.id.index()] = Some(Tensor::vector(vec![th[0] - target[0], th[1] - target[1]]));
            g
        }
    }

    impl BilevelObjective for Toy {
        fn num_tasks(&self) -> usize {
            2
        }
        fn task_gradients(&mut self, store: &ParamStore) -> Result<Vec<Option<GradSet>>> {
            Ok(vec![Some(self.grad(store, self.a)), Some(self.grad(store, self.b))])
        }
        fn validation_objective(&mut self, store: &ParamStore, _: u64, with_grad: bool) -> Result<Option<(f64, Option<GradSet>)>> {
            let th = store.value(self.id).data();
            let v = 0.5 * ((th[0] - self.a[0]).powi(2) + (th[1] - self.a[1]).powi(2));
            Ok(Some((v, with_grad.then(|| self.grad(store, self.a)))))
        }
    }

    fn toy() -> (ParamStore, Toy) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![0.0, 0.0])).unwrap();
        (store, Toy { id, a: [1.0, 0.0], b: [-1.0, 2.0] })
    }

    #[test]
    fn toy_problem_down_weights_the_corrupting_task() {
        let (mut store, mut toy) = toy();
        let cfg = BilevelConfig {
            enabled: true,
            eta_in: 0.1,
            eta_out: 0.5,
            ..BilevelConfig::default()
        };
        let mut lambda = LambdaWeights::uniform(2);
        let initial = toy.validation_objective(&store, 0, false).unwrap().unwrap().0;
        for step in 0..200 {
            let out = outer_step(&lambda, &store, &mut toy, &cfg, step).unwrap();
            lambda = out.lambda;
            assert!((lambda.values().iter().sum::<f64>() - 2.0).abs() < 1e-12);
            let grads = toy.task_gradients(&store).unwrap();
            store = inner_step(&store, lambda.values(), &grads, 0.1);
        }
        assert!(lambda.values()[1] < 0.1, "{:?}", lambda);
        let fin = toy.validation_objective(&store, 0, false).unwrap().unwrap().0;
        assert!(fin <= initial);
    }

    #[test]
    fn finite_difference_agrees_in_sign() {
        let (mut store, mut toy) = toy();
        *store.value_mut(toy.id) = Tensor::vector(vec![0.3, -0.2]);
        let base = BilevelConfig {
            eta_out: 0.0,
            ..BilevelConfig::default()
        };
        let u = outer_step(&LambdaWeights::uniform(2), &store, &mut toy, &base, 0).unwrap();
        let fd_cfg = BilevelConfig {
            method: Hypergradient::FiniteDifference,
            ..base
        };
        let f = outer_step(&LambdaWeights::uniform(2), &store, &mut toy, &fd_cfg, 0).unwrap();
        for (a, b) in u.hypergradient.iter().zip(&f.hypergradient) {
            assert_eq!(a.signum(), b.signum());
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-3));
        }
        assert_eq!(u.lambda, LambdaWeights::uniform(2));
    }

    #[test]
    fn single_task_stays_at_one() {
        struct One;
        impl BilevelObjective for One {
            fn num_tasks(&self) -> usize {
                1
            }
            fn task_gradients(&mut self, s: &ParamStore) -> Result<Vec<Option<GradSet>>> {
                let mut g = GradSet::empty(s.len());
                g.0[0] = Some(Tensor::scalar(1.0));
                Ok(vec![Some(g)])
            }
            fn validation_objective(&mut self, s: &ParamStore, _: u64, w: bool) -> Result<Option<(f64, Option<GradSet>)>> {
                let mut g = GradSet::empty(s.len());
                g.0[0] = Some(Tensor::scalar(3.0));
                Ok(Some((s.value(ParamId(0)).data()[0], w.then_some(g))))
            }
        }
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.0)).unwrap();
        let cfg = BilevelConfig::default();
        let out = outer_step(&LambdaWeights::uniform(1), &store, &mut One, &cfg, 0).unwrap();
        assert_eq!(out.lambda.values(), &[1.0]);
    }
}
