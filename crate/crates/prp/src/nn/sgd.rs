//! Stochastic gradient descent with momentum and decoupled weight decay.

use std::collections::HashMap;

use ndarray::{ArrayD, NdFloat};

use super::ParamSet;

/// SGD update with momentum buffer `v` per parameter:
///
/// ```text
/// v ← momentum·v + g
/// w ← w·(1 − lr·weight_decay) − lr·v
/// ```
///
/// Weight decay is decoupled from the gradient, so with zero gradients a
/// parameter shrinks geometrically by exactly `(1 − lr·weight_decay)` per
/// step, and with zero decay the update is classical momentum SGD.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, ArrayD<F>>,
}

impl<F: NdFloat> Sgd<F> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter in `model`, then leaves the
    /// gradients untouched (callers zero them at the start of each step).
    pub fn step(&mut self, model: &mut dyn ParamSet<F>) {
        let lr = F::from(self.learning_rate).unwrap();
        let mom = F::from(self.momentum).unwrap();
        let shrink = F::from(1.0 - self.learning_rate * self.weight_decay).unwrap();
        let velocity = &mut self.velocity;
        model.visit("", &mut |name, p| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            v.zip_mut_with(&p.grad, |vi, &gi| *vi = *vi * mom + gi);
            p.value.zip_mut_with(v, |w, &vi| *w = *w * shrink - lr * vi);
        });
    }

    /// Momentum buffers in deterministic (sorted-name) order, for
    /// checkpointing optimizer state.
    pub fn state(&self) -> Vec<(String, &ArrayD<F>)> {
        let mut out: Vec<_> = self.velocity.iter().map(|(k, v)| (k.clone(), v)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restores momentum buffers saved by [`Sgd::state`].
    pub fn restore(&mut self, state: impl IntoIterator<Item = (String, ArrayD<F>)>) {
        self.velocity = state.into_iter().collect();
    }
}
