use super::{Float, ParamSet, Tensor};

/// Adaptive-moment optimiser (bias-corrected).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| g.as_ref().map(|g| Tensor::zeros(g.shape()))).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(self.lr / c1);
        let c2s = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for ((id, g), (m, v)) in params.ids().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (Some(g), Some(m), Some(v)) = (g, m.as_mut(), v.as_mut()) else {
                continue;
            };
            let p = params.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / c2s + eps);
            }
        }
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay, in the
/// common `v = mu * v + (g + wd * p); p -= lr * v` form.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| g.as_ref().map(|g| Tensor::zeros(g.shape()))).collect();
        }
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((id, g), vel) in params.ids().zip(grads).zip(self.velocity.iter_mut()) {
            let (Some(g), Some(vel)) = (g, vel.as_mut()) else {
                continue;
            };
            let p = params.get_mut(id).data_mut();
            for ((p, &g), v) in p.iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(ps: &ParamSet<f64>) -> Vec<Option<Tensor<f64>>> {
        // f(p) = sum (p - 3)^2
        ps.ids()
            .map(|id| Some(ps.get(id).map(|v| 2.0 * (v - 3.0))))
            .collect()
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::from_vec(&[2], vec![0.0, 10.0]));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..2000 {
            let g = quadratic_grad(&ps);
            opt.step(&mut ps, &g);
        }
        for &v in ps.get(ps.find("p").unwrap()).data() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn sgd_first_step_matches_hand_computation() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("p", Tensor::from_vec(&[1], vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.9, 0.5);
        let g = vec![Some(Tensor::from_vec(&[1], vec![2.0]))];
        opt.step(&mut ps, &g);
        // d = 2 + 0.5 * 1 = 2.5; v = 2.5; p = 1 - 0.25
        assert!((ps.get(ps.find("p").unwrap()).item() - 0.75).abs() < 1e-12);
        opt.step(&mut ps, &g);
        // d = 2 + 0.375 = 2.375; v = 0.9 * 2.5 + 2.375 = 4.625; p = 0.75 - 0.4625
        assert!((ps.get(ps.find("p").unwrap()).item() - 0.2875).abs() < 1e-12);
    }
}
