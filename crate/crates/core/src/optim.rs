//! Limited-memory BFGS and plain gradient descent over flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimStatus {
    /// Iteration budget used up.
    Running,
    /// Gradient or progress fell below tolerance.
    Converged,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsSettings {
    pub history: usize,
    pub step_size: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
    pub grad_tol: f64,
    pub change_tol: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            history: 10,
            step_size: 1.0,
            c1: 1e-4,
            max_backtracks: 40,
            grad_tol: 1e-7,
            change_tol: 1e-9,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// L-BFGS state that survives across calls to [`Lbfgs::run`].
#[derive(Clone, Debug)]
pub struct Lbfgs {
    settings: LbfgsSettings,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    s_hist: VecDeque<Vec<f64>>,
    y_hist: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    first: bool,
    evaluations: usize,
    status: OptimStatus,
}

impl Lbfgs {
    pub fn new<F>(settings: LbfgsSettings, x0: Vec<f64>, f: &F) -> Self
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let (fx, g) = f(&x0);
        Self {
            settings,
            x: x0,
            f: fx,
            g,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
            rho: VecDeque::new(),
            first: true,
            evaluations: 1,
            status: OptimStatus::Running,
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn value(&self) -> f64 {
        self.f
    }

    pub fn gradient(&self) -> &[f64] {
        &self.g
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn status(&self) -> OptimStatus {
        self.status
    }

    #[allow(clippy::needless_range_loop)]
    fn direction(&self) -> Vec<f64> {
        let mut q: Vec<f64> = self.g.iter().map(|v| -v).collect();
        let k = self.s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s_hist[i], &q);
            q.iter_mut()
                .zip(&self.y_hist[i])
                .for_each(|(qj, yj)| *qj -= alpha[i] * yj);
        }
        if let (Some(s), Some(y)) = (self.s_hist.back(), self.y_hist.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y_hist[i], &q);
            q.iter_mut()
                .zip(&self.s_hist[i])
                .for_each(|(qj, sj)| *qj += (alpha[i] - beta) * sj);
        }
        q
    }

    /// Runs up to `max_iters` iterations, calling `on_step` with the value
    /// after each accepted step.
    pub fn run<F, C>(&mut self, f: &F, max_iters: usize, mut on_step: C) -> OptimStatus
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
        C: FnMut(f64),
    {
        if self.status != OptimStatus::Running {
            return self.status;
        }
        if max_abs(&self.g) <= self.settings.grad_tol {
            self.status = OptimStatus::Converged;
            return self.status;
        }
        for _ in 0..max_iters {
            let mut d = self.direction();
            let mut gd = dot(&self.g, &d);
            if !(gd < 0.0) {
                // not a descent direction: restart from steepest descent
                self.s_hist.clear();
                self.y_hist.clear();
                self.rho.clear();
                self.first = true;
                d = self.g.iter().map(|v| -v).collect();
                gd = dot(&self.g, &d);
            }
            let mut t = if self.first {
                let l1: f64 = self.g.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / l1) * self.settings.step_size
            } else {
                self.settings.step_size
            };
            let mut accepted = None;
            for _ in 0..=self.settings.max_backtracks {
                let xn: Vec<f64> = self.x.iter().zip(&d).map(|(x, di)| x + t * di).collect();
                let (fnew, gnew) = f(&xn);
                self.evaluations += 1;
                if fnew.is_finite() && fnew <= self.f + self.settings.c1 * t * gd {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
                t *= 0.5;
            }
            let Some((xn, fnew, gnew)) = accepted else {
                self.status = OptimStatus::LineSearchFailed;
                return self.status;
            };
            let s: Vec<f64> = xn.iter().zip(&self.x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnew.iter().zip(&self.g).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if self.s_hist.len() == self.settings.history {
                    self.s_hist.pop_front();
                    self.y_hist.pop_front();
                    self.rho.pop_front();
                }
                self.s_hist.push_back(s.clone());
                self.y_hist.push_back(y);
                self.rho.push_back(1.0 / ys);
            }
            let change = (fnew - self.f).abs();
            self.first = false;
            self.x = xn;
            self.f = fnew;
            self.g = gnew;
            on_step(fnew);
            if max_abs(&self.g) <= self.settings.grad_tol
                || max_abs(&s) <= self.settings.change_tol
                || change < self.settings.change_tol
            {
                self.status = OptimStatus::Converged;
                return self.status;
            }
        }
        self.status
    }
}

/// Fixed-step gradient descent; returns the value after each step.
pub fn gradient_descent<F>(f: &F, x: &mut [f64], step: f64, iters: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut values = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (_, g) = f(x);
        x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
        values.push(f(x).0);
    }
    values
}
