//! First-order optimizer state shared by the trainers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone)]
pub struct Ema {
    pub rate: f64,
    pub shadow: Vec<f64>,
}

impl Ema {
    pub fn new(init: &[f64], rate: f64) -> Self {
        Ema { rate, shadow: init.to_vec() }
    }

    pub fn update(&mut self, theta: &[f64]) {
        for (s, t) in self.shadow.iter_mut().zip(theta) {
            *s = self.rate * *s + (1.0 - self.rate) * t;
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `g` in place so that its norm is at most `max_norm`; returns the original norm.
pub fn clip_norm(g: &mut [f64], max_norm: Option<f64>) -> f64 {
    let n = l2_norm(g);
    if let Some(m) = max_norm {
        if n > m {
            let s = m / n;
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut x = vec![1.0];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut x, &[123.0]);
        assert!((x[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn ema_tracks_constant() {
        let mut e = Ema::new(&[0.0], 0.9);
        for _ in 0..200 {
            e.update(&[1.0]);
        }
        assert!((e.shadow[0] - 1.0).abs() < 1e-9);
    }
}
