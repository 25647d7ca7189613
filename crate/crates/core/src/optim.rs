/// SGD with heavy-ball momentum and L2 weight decay, applied to a flat
/// parameter vector: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, len: usize) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
pub fn clip_norm(grads: &mut [f64], max_norm: f64) {
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for g in grads {
            *g *= s;
        }
    }
}
