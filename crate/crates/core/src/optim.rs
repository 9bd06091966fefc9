//! Named parameter storage and the Adam optimizer.

use crate::error::{Result, StormError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total scalar count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }
}

/// Adam moment buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub learning_rate: T,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh state with β = (0.9, 0.999), ε = 1e-8.
    pub fn adam(params: &ParamSet<T>, learning_rate: T) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimizerState {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before any
/// parameter is touched, so a rejected step leaves everything unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.len() != params.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(StormError::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors[i].shape() {
            return Err(StormError::Dimension {
                op: "adam_step",
                lhs: params.tensors[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(StormError::Numeric(format!("gradient of {}", params.names[i])));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensors[i].data_mut();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    for (name, p) in params.iter() {
        if !p.is_finite() {
            return Err(StormError::Numeric(format!("parameter {name} after step")));
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient list.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(T::zero(), |a, &v| a + v * v)
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![value]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::vector(vec![0.3, -1.7, 2.5e-3]));
        let before = p.clone();
        let mut st = OptimizerState::adam(&p, 0.1);
        adam_step(&mut p, &[Tensor::zeros(vec![3])], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
        assert!(st.first_moment[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let mut st = OptimizerState::adam(&p, 0.1);
        adam_step(&mut p, &[Tensor::vector(vec![1.0])], &mut st).unwrap();
        assert!((p.get(0).data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::vector(vec![0.5]));
        p.push("b", Tensor::vector(vec![0.5]));
        let mut st = OptimizerState::adam(&p, 0.01);
        for g in [0.3, -0.2, 0.9] {
            let grads = vec![Tensor::vector(vec![g]), Tensor::vector(vec![g])];
            adam_step(&mut p, &grads, &mut st).unwrap();
        }
        assert_eq!(p.get(0), p.get(1));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut st = OptimizerState::adam(&p, 0.1);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step_count, 0);
        assert_eq!(p.get(0).data()[0], 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0f64, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
