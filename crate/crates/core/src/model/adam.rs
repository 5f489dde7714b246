//! Adam over a flat parameter vector.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

macro_rules! adam_impl {
    ($t:ty) => {
        impl Adam<$t> {
            pub fn new(config: AdamConfig, len: usize) -> Self {
                Adam {
                    config,
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                    t: 0,
                }
            }

            pub fn step(&mut self, params: &mut [$t], grad: &[$t]) {
                assert_eq!(params.len(), self.m.len());
                assert_eq!(grad.len(), self.m.len());
                self.t += 1;
                let c = self.config;
                let bc1 = 1.0 - c.beta1.powi(self.t);
                let bc2 = 1.0 - c.beta2.powi(self.t);
                let step = (c.lr * bc2.sqrt() / bc1) as $t;
                let eps = (c.eps * bc2.sqrt()) as $t;
                let (b1, b2) = (c.beta1 as $t, c.beta2 as $t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
                }
            }
        }
    };
}

adam_impl!(f32);
adam_impl!(f64);
