use serde::{Deserialize, Serialize};

use crate::nn::graph::Gradients;
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimiser and loop hyper-parameters for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub iteration_unit: IterationUnit,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 8,
            iterations: 300,
            iteration_unit: IterationUnit::Steps,
        }
    }
}

/// Whether `iterations` counts optimiser steps or passes over the training
/// split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationUnit {
    Steps,
    Epochs,
}

impl OptimConfig {
    /// Number of optimiser steps for a training split of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        match self.iteration_unit {
            IterationUnit::Steps => self.iterations,
            IterationUnit::Epochs => self.iterations * n.div_ceil(self.batch_size.max(1)),
        }
    }
}

/// Adam with bias correction.
pub struct Adam<T> {
    cfg: OptimConfig,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { cfg: cfg.clone(), step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - b1.powi(self.step));
        let bc2 = T::of(1.0 - b2.powi(self.step));
        let (b1, b2) = (T::of(b1), T::of(b2));
        let lr = T::of(self.cfg.learning_rate);
        let eps = T::of(self.cfg.epsilon);
        let wd = T::of(self.cfg.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = params.get_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i] + wd * w.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                w.data_mut()[i] -= update;
            }
        }
    }
}
