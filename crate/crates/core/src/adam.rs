//! Adam optimizer over a named parameter set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Gradients, Scalar, Tensor};
use crate::{Error, Result};

/// Named trainable tensors. Tensors are immutable, so an update replaces each
/// entry with a fresh leaf.
#[derive(Clone)]
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Register a leaf parameter; returns its index.
    pub fn push(&mut self, name: String, tensor: Tensor<S>) -> usize {
        debug_assert!(tensor.is_leaf());
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Replace the tensor at `idx` (shape must be preserved).
    pub fn replace(&mut self, idx: usize, tensor: Tensor<S>) {
        debug_assert_eq!(self.tensors[idx].shape(), tensor.shape());
        self.tensors[idx] = tensor;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam moment buffers and hyperparameters.
///
/// Defaults β1 = 0.9, β2 = 0.999, ε = 1e-8; the learning rate is supplied per
/// step so a schedule can change it between phases.
pub struct AdamState<S: Scalar> {
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        AdamState {
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            epsilon: S::from_f64(1e-8),
            step: 0,
            first: params.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect(),
            second: params.tensors.iter().map(|t| vec![S::zero(); t.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Parameters whose gradient is absent
/// from `grads` are treated as having zero gradient (their moments still
/// decay once non-zero).
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    lr: S,
) -> Result<()> {
    if lr <= S::zero() {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be > 0")));
    }
    if state.first.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer tracks {} parameters, set has {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::one() - state.beta1.powi(t);
    let bc2 = S::one() - state.beta2.powi(t);
    for idx in 0..params.len() {
        let param = &params.tensors[idx];
        let n = param.numel();
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        let zero_grad;
        let g: &[S] = match grads.get(param) {
            Some(g) => {
                if g.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient for {} has {} elements, parameter has {}",
                        params.names[idx],
                        g.len(),
                        n
                    )));
                }
                g
            }
            None => {
                zero_grad = vec![S::zero(); n];
                &zero_grad
            }
        };
        let mut data = param.data().to_vec();
        for i in 0..n {
            m[i] = state.beta1 * m[i] + (S::one() - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (S::one() - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        let shape = param.shape().to_vec();
        params.tensors[idx] = Tensor::leaf(&shape, data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamSet::new();
        params.push("w".into(), Tensor::leaf(&[3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let mut state = AdamState::new(&params);
        let grads = Gradients::new();
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params.get(0).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // g = 1, lr = 0.1, defaults: update = lr * 1 / (1 + eps) ≈ 0.1.
        let mut params = ParamSet::new();
        params.push("w".into(), Tensor::leaf(&[1], vec![5.0f64]).unwrap());
        let root = params.get(0).scale(1.0).sum(); // d root / d w = 1
        let grads = backward(&root).unwrap();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        let moved = 5.0 - params.get(0).data()[0];
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        let mut params = ParamSet::new();
        params.push("w".into(), Tensor::leaf(&[1], vec![0.0f64]).unwrap());
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &Gradients::new(), &mut state, 0.0).is_err());
    }
}
