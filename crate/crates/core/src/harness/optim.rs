//! Adam, gradient clipping, and parameter averaging.

use crate::ndiff::Mat;

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u32,
}

impl Adam {
    pub fn new(params: &[Mat], lr: f64) -> Self {
        let zeros = |p: &[Mat]| p.iter().map(|x| Mat::zeros(x.dim())).collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`
/// (no-op when `max_norm` is 0). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * c));
    }
    norm
}

/// Exponential moving average of parameters with a warmup: the decay
/// after `n` updates is `min(rate, (1 + n) / (10 + n))`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub rate: f64,
    shadow: Vec<Mat>,
    updates: u64,
}

impl Ema {
    pub fn new(params: &[Mat], rate: f64) -> Self {
        Self {
            rate,
            shadow: params.to_vec(),
            updates: 0,
        }
    }

    pub fn decay(&self) -> f64 {
        let n = self.updates as f64;
        self.rate.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &[Mat]) {
        let d = self.decay();
        for (s, p) in self.shadow.iter_mut().zip(params) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| *s = d * *s + (1.0 - d) * p);
        }
        self.updates += 1;
    }

    pub fn params(&self) -> &[Mat] {
        &self.shadow
    }

    pub fn into_params(self) -> Vec<Mat> {
        self.shadow
    }
}
