use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam over every parameter of a store, consuming the accumulated `grad`s.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: i32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update and zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let correction1 = 1.0 - b1.powi(self.steps);
        let correction2 = 1.0 - b2.powi(self.steps);
        let lr = T::from_f64_lossy(self.learning_rate * correction2.sqrt() / correction1);
        let eps = T::from_f64_lossy(self.epsilon * correction2.sqrt());
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let one = T::one();
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            }
        }
        params.zero_grad();
    }
}
