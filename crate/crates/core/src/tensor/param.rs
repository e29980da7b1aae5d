//! Named trainable parameters and the Adam optimizer.
//!
//! A [`ParamSet`] owns every trainable tensor of a model, keyed both by a
//! cheap copyable [`ParamId`] and by a unique name (names are what
//! checkpoints store). Gradients, Adam moments, and the step counter live
//! alongside each value so the whole optimizer state serializes naturally.

use std::collections::HashMap;

use rand::Rng;

use super::{Real, Tensor};
use crate::{DetRng, Error, Result};

/// Handle to a parameter inside one [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// One named parameter with its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter<R: Real> {
    name: String,
    value: Tensor<R>,
    grad: Tensor<R>,
    m: Tensor<R>,
    v: Tensor<R>,
    step: u64,
    trainable: bool,
}

impl<R: Real> Parameter<R> {
    /// Parameter name (unique within its set).
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value.
    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    /// Current gradient accumulator.
    pub fn grad(&self) -> &Tensor<R> {
        &self.grad
    }

    /// Whether the optimizer updates this parameter.
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Default Adam hyper-parameters.
pub const ADAM_BETA1: f64 = 0.9;
/// Default Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Default Adam epsilon.
pub const ADAM_EPS: f64 = 1e-8;

/// The collection of all parameters of a model.
#[derive(Debug, Clone)]
pub struct ParamSet<R: Real> {
    items: Vec<Parameter<R>>,
    by_name: HashMap<String, usize>,
    grads_ready: bool,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    /// Empty set.
    pub fn new() -> Self {
        ParamSet { items: Vec::new(), by_name: HashMap::new(), grads_ready: false }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("parameter '{name}' registered twice")));
        }
        let id = ParamId(self.items.len());
        self.by_name.insert(name.clone(), id.0);
        let shape = value.shape().to_vec();
        self.items.push(Parameter {
            name,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            value,
            step: 0,
            trainable,
        });
        Ok(id)
    }

    /// Number of parameters.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// True if the set is empty.
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    /// Look up a parameter id by name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameter metadata and state.
    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.items[id.0]
    }

    /// Current value of a parameter.
    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.items[id.0].value
    }

    /// Mutable access to a parameter's value (used by the gradient checker
    /// to apply finite-difference perturbations in place).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.items[id.0].value
    }

    /// Overwrite a parameter's value (shape must match).
    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.items[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Current gradient of a parameter.
    pub fn grad(&self, id: ParamId) -> &Tensor<R> {
        &self.items[id.0].grad
    }

    /// Add `delta` into a parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<R>) -> Result<()> {
        self.items[id.0].grad.axpy(R::one(), delta)
    }

    /// Mark gradients as freshly populated (done by `Tape::apply_grads`).
    pub fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    /// Reset all gradient accumulators to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            for g in p.grad.data_mut() {
                *g = R::zero();
            }
        }
        self.grads_ready = false;
    }

    /// Iterate parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// One Adam step over every trainable parameter, with bias correction.
    ///
    /// Requires that a backward pass populated gradients since the last step
    /// (otherwise stepping is a usage error: the caller forgot backward).
    /// Gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::Usage("adam_step called without a preceding backward pass".into()));
        }
        for p in &mut self.items {
            if !p.trainable {
                continue;
            }
            p.step += 1;
            let bc1 = 1.0 - beta1.powi(p.step as i32);
            let bc2 = 1.0 - beta2.powi(p.step as i32);
            let (b1, b2) = (R::of(beta1), R::of(beta2));
            let one_m_b1 = R::of(1.0 - beta1);
            let one_m_b2 = R::of(1.0 - beta2);
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                let m = b1 * p.m.data()[i] + one_m_b1 * g;
                let v = b2 * p.v.data()[i] + one_m_b2 * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m.as_f64() / bc1;
                let v_hat = v.as_f64() / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                let x = p.value.data()[i];
                p.value.data_mut()[i] = x - R::of(delta);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Adam step with the standard defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn adam_step_default(&mut self, lr: f64) -> Result<()> {
        self.adam_step(lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    /// Snapshot all values (used to keep the best epoch during training).
    pub fn snapshot_values(&self) -> Vec<Tensor<R>> {
        self.items.iter().map(|p| p.value.clone()).collect()
    }

    /// Restore values from a snapshot taken on the same set.
    pub fn restore_values(&mut self, snapshot: &[Tensor<R>]) -> Result<()> {
        if snapshot.len() != self.items.len() {
            return Err(Error::Usage(format!(
                "snapshot has {} parameters, set has {}",
                snapshot.len(),
                self.items.len()
            )));
        }
        for (p, s) in self.items.iter_mut().zip(snapshot) {
            if p.value.shape() != s.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            p.value = s.clone();
        }
        Ok(())
    }
}

/// Uniform init on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut DetRng) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| R::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree by construction")
}

/// Creates parameters on first build, or resolves them by name when a model
/// is reconstructed from a checkpoint.
///
/// Encoders describe their parameters once through this builder; whether the
/// tensors are freshly initialized or restored from stored blobs is decided
/// by the constructor used. In load mode, shapes are validated against the
/// caller's expectation (`0` in a shape entry means "any size", used for
/// dimensions like vocabulary size that are themselves derived from the
/// stored tensor).
pub struct ParamBuilder<'a, R: Real> {
    set: &'a mut ParamSet<R>,
    rng: Option<&'a mut DetRng>,
}

impl<'a, R: Real> ParamBuilder<'a, R> {
    /// Builder that creates and initializes new parameters.
    pub fn init(set: &'a mut ParamSet<R>, rng: &'a mut DetRng) -> Self {
        ParamBuilder { set, rng: Some(rng) }
    }

    /// Builder that resolves existing parameters by name (checkpoint load).
    pub fn load(set: &'a mut ParamSet<R>) -> Self {
        ParamBuilder { set, rng: None }
    }

    /// The underlying parameter set.
    pub fn set(&self) -> &ParamSet<R> {
        self.set
    }

    fn resolve(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .set
            .find(name)
            .ok_or_else(|| Error::ArtifactMismatch(format!("checkpoint is missing parameter '{name}'")))?;
        let actual = self.set.value(id).shape();
        if actual.len() != shape.len()
            || actual.iter().zip(shape).any(|(&a, &want)| want != 0 && a != want)
        {
            return Err(Error::ArtifactMismatch(format!(
                "parameter '{name}' has shape {actual:?} but the configuration implies {shape:?}"
            )));
        }
        Ok(id)
    }

    /// Declare a parameter with fan-in-scaled uniform initialization.
    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => self.set.add(name, init_uniform(shape.to_vec(), fan_in, rng), true),
            None => self.resolve(name, shape),
        }
    }

    /// Declare a parameter with a caller-provided initializer (e.g. a word
    /// table seeded from pretrained vectors).
    pub fn param_with(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce(&mut DetRng) -> Tensor<R>,
    ) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => {
                let value = init(rng);
                if value.shape() != shape {
                    return Err(Error::Usage(format!(
                        "initializer for '{name}' produced shape {:?}, expected {shape:?}",
                        value.shape()
                    )));
                }
                self.set.add(name, value, true)
            }
            None => self.resolve(name, shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Independent scalar Adam oracle, straight from the update equations.
    struct AdamOracle {
        m: f64,
        v: f64,
        t: u64,
    }

    impl AdamOracle {
        fn new() -> Self {
            AdamOracle { m: 0.0, v: 0.0, t: 0 }
        }
        fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powi(self.t as i32));
            let v_hat = self.v / (1.0 - 0.999f64.powi(self.t as i32));
            x - lr * m_hat / (v_hat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn adam_matches_scalar_oracle_over_many_steps() {
        let mut set = ParamSet::<f64>::new();
        let p = set.add("w", Tensor::scalar(0.7), true).unwrap();
        let mut oracle = AdamOracle::new();
        let mut x = 0.7;
        for step in 0..50 {
            // A made-up but deterministic gradient sequence.
            let g = (step as f64 * 0.37).sin() + 0.1;
            set.accumulate_grad(p, &Tensor::scalar(g)).unwrap();
            set.mark_grads_ready();
            set.adam_step_default(1e-2).unwrap();
            x = oracle.step(x, g, 1e-2);
            assert!((set.value(p).data()[0] - x).abs() < 1e-12, "diverged at step {step}");
        }
    }

    #[test]
    fn adam_without_backward_is_rejected() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", Tensor::scalar(1.0), true).unwrap();
        let err = set.adam_step_default(1e-3).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn adam_with_zero_lr_leaves_values_bit_identical() {
        let mut set = ParamSet::<f32>::new();
        let p = set.add("w", Tensor::row(vec![0.25f32, -1.5, 3.0]), true).unwrap();
        let before = set.value(p).clone();
        set.accumulate_grad(p, &Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        set.mark_grads_ready();
        set.adam_step_default(0.0).unwrap();
        assert_eq!(set.value(p), &before);
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut set = ParamSet::<f64>::new();
        let p = set.add("frozen", Tensor::scalar(5.0), false).unwrap();
        set.accumulate_grad(p, &Tensor::scalar(2.0)).unwrap();
        set.mark_grads_ready();
        set.adam_step_default(0.1).unwrap();
        assert_eq!(set.value(p).data()[0], 5.0);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", Tensor::scalar(0.0), true).unwrap();
        let err = set.add("w", Tensor::scalar(1.0), true).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn init_uniform_respects_fan_in_bound_and_seed() {
        let mut rng = DetRng::seed_from_u64(7);
        let t = init_uniform::<f32>(vec![20, 25], 25, &mut rng);
        let bound = 1.0 / 5.0;
        assert!(t.data().iter().all(|x| x.abs() < bound));
        // Same seed, same stream.
        let mut rng2 = DetRng::seed_from_u64(7);
        let t2 = init_uniform::<f32>(vec![20, 25], 25, &mut rng2);
        assert_eq!(t, t2);
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut set = ParamSet::<f64>::new();
        let p = set.add("w", Tensor::row(vec![1.0, 2.0]), true).unwrap();
        let snap = set.snapshot_values();
        set.set_value(p, Tensor::row(vec![9.0, 9.0])).unwrap();
        set.restore_values(&snap).unwrap();
        assert_eq!(set.value(p).data(), &[1.0, 2.0]);
    }
}
