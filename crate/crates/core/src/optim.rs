//! First-order adaptive-moment and limited-memory quasi-Newton updates on
//! flat parameter vectors. Both minimize.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `lr` holds one step size per coordinate.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..x.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            x[k] -= lr[k] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// L-BFGS with a fixed step: the two-loop recursion turns the gradient
/// into a search direction, curvature pairs with `s.y <= 0` are skipped.
/// Steps longer than `max_step` (Euclidean) are shortened, which keeps
/// noisy minibatch curvature estimates from throwing the iterate away.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub max_step: f64,
    memory: usize,
    history: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Self {
            max_step: f64::INFINITY,
            memory: memory.max(1),
            history: VecDeque::new(),
            prev: None,
        }
    }

    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y, rho) in self.history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        if let Some((px, pg)) = self.prev.take() {
            let s: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(&pg).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                if self.history.len() == self.memory {
                    self.history.pop_front();
                }
                self.history.push_back((s, y, 1.0 / sy));
            }
        }
        self.prev = Some((x.to_vec(), grad.to_vec()));
        let dir = self.direction(grad);
        let step: Vec<f64> = dir.iter().zip(lr).map(|(d, l)| l * d).collect();
        let len = dot(&step, &step).sqrt();
        let scale = if len > self.max_step { self.max_step / len } else { 1.0 };
        for k in 0..x.len() {
            x[k] -= scale * step[k];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Lbfgs(Lbfgs),
}

impl Optimizer {
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        match self {
            Optimizer::Adam(a) => a.step(x, grad, lr),
            Optimizer::Lbfgs(l) => l.step(x, grad, lr),
        }
    }
}
