//! Trainable parameters and the Adam update.

use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named leaf tensor with its Adam state.
pub struct Parameter<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Self {
        let tensor = Tensor::leaf(shape, values, true);
        let n = tensor.numel();
        Parameter {
            name: name.into(),
            tensor,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    /// Uniform init in +-1/sqrt(fan_in).
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        Parameter::new(name, shape, values)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Parameter::new(name, shape, vec![T::zero(); n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    pub fn values(&self) -> Vec<T> {
        self.tensor.values_vec()
    }

    /// Restore values and optimizer state, e.g. from a checkpoint.
    pub fn load_state(&mut self, values: Vec<T>, m: Vec<T>, v: Vec<T>, step: u64) {
        assert_eq!(values.len(), self.numel(), "{}: value count", self.name);
        assert_eq!(m.len(), self.numel(), "{}: moment count", self.name);
        assert_eq!(v.len(), self.numel(), "{}: moment count", self.name);
        self.tensor.set_values(&values);
        self.m = m;
        self.v = v;
        self.step = step;
    }

    pub fn optimizer_state(&self) -> (&[T], &[T], u64) {
        (&self.m, &self.v, self.step)
    }
}

/// Adam with bias correction. Gradients are read, never modified.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// One update over the given parameters. Panics if any parameter is
    /// missing its gradient.
    pub fn step<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>) {
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for p in params {
            p.step += 1;
            let bc1 = one - b1.powi(p.step as i32);
            let bc2 = one - b2.powi(p.step as i32);
            let (m, v) = (&mut p.m, &mut p.v);
            p.tensor.with_values_and_grad(|values, grad| {
                let grad = grad.unwrap_or_else(|| {
                    panic!("adam step: parameter {} has no gradient", p.name)
                });
                for i in 0..values.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    values[i] = values[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }
}

pub fn zero_grads<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Parameter<T>>) {
    for p in params {
        p.zero_grad();
    }
}
