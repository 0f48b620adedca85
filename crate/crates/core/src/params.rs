//! Trainable parameters.
//!
//! A [`ParamSet`] owns every named parameter tensor of a model together with
//! its gradient accumulator. The tape snapshots values on mount and writes
//! gradients back after `backward`, so the set itself is only mutated by the
//! single training thread.

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter { name: name.to_string(), value, grad });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range(-bound, bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let dst = self.entries[id.0].grad.data_mut();
        debug_assert_eq!(dst.len(), g.len());
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grads(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.entries {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
    }

    /// Plain gradient-descent update: value -= lr * grad.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.entries {
            let (v, g) = (&mut p.value, &p.grad);
            // split borrow: copy grad slice view first
            let gdata: Vec<f64> = g.data().to_vec();
            for (vv, gg) in v.data_mut().iter_mut().zip(gdata) {
                *vv -= lr * gg;
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn grad_shape_matches_value_and_zeroes() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(1);
        let id = ps.add_uniform("w", &[3, 4], 3, &mut rng);
        assert_eq!(ps.get(id).grad.shape(), ps.get(id).value.shape());
        ps.accumulate_grad(id, &vec![1.0; 12]);
        assert!(ps.get(id).grad.data().iter().all(|&g| g == 1.0));
        ps.zero_grads();
        assert!(ps.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(2);
        let id = ps.add_uniform("w", &[100], 16, &mut rng);
        let bound = 0.25;
        assert!(ps.get(id).value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn clip_reduces_norm() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(&[4]));
        ps.accumulate_grad(id, &[10.0, 10.0, 10.0, 10.0]);
        ps.clip_grads(1.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
    }
}
