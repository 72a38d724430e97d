use super::HasParams;

/// Adam with the widespread default moments (0.9 / 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update; `grads` must mirror `params` buffer for buffer.
    pub fn step<P: HasParams>(&mut self, params: &mut P, grads: &P) {
        let grad_slices = grads.params();
        let mut param_slices = params.params_mut();
        assert_eq!(param_slices.len(), grad_slices.len(), "param/grad layout mismatch");
        if self.m.is_empty() {
            self.m = grad_slices.iter().map(|s| vec![0.0; s.len()]).collect();
            self.v = grad_slices.iter().map(|s| vec![0.0; s.len()]).collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, (p, g)) in param_slices.iter_mut().zip(grad_slices.iter()).enumerate() {
            assert_eq!(p.len(), g.len(), "buffer {idx} length mismatch");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::derive_rng;
    use ndarray::Array2;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut lin = Linear::init(3, 2, &mut derive_rng(1, "adam"));
        let before = lin.weight.clone();
        let zero = crate::nn::zeroed_clone(&lin);
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut lin, &zero);
        }
        assert_eq!(lin.weight, before);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize ||W x - y||^2 for a fixed pair; Adam should reach ~0.
        let mut rng = derive_rng(2, "adam-quad");
        let mut lin = Linear::init(3, 2, &mut rng);
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 1.1]).unwrap();
        let y = Array2::from_shape_vec((1, 2), vec![0.9, -0.4]).unwrap();
        let mut adam = Adam::new(0.05);
        let mut final_loss = f64::MAX;
        for _ in 0..500 {
            let (pred, cache) = lin.forward(&x);
            let diff = &pred - &y;
            final_loss = diff.iter().map(|d| d * d).sum();
            let (_, gw, gb) = lin.backward(&cache, &(2.0 * diff));
            let grads = Linear { weight: gw, bias: gb };
            adam.step(&mut lin, &grads);
        }
        assert!(final_loss < 1e-6, "loss {final_loss}");
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut rng = derive_rng(3, "adam-det");
            let mut lin = Linear::init(4, 4, &mut rng);
            let x = Array2::from_shape_vec(
                (2, 4),
                crate::nn::sample_normal(&mut rng, 8, 1.0),
            )
            .unwrap();
            let mut adam = Adam::new(0.01);
            for _ in 0..20 {
                let (y, cache) = lin.forward(&x);
                let (_, gw, gb) = lin.backward(&cache, &y);
                adam.step(&mut lin, &Linear { weight: gw, bias: gb });
            }
            lin.weight
        };
        assert_eq!(run(), run());
    }
}
