//! Deterministic full-batch first-order minimization.
//!
//! Both methods use Armijo backtracking (`c1 = 1e-4`, step halving) and stop
//! when the gradient infinity-norm falls to the tolerance, the iteration
//! budget runs out, or the line search cannot make progress.
//!
//! * [`Optimizer::GradientDescent`]: steepest descent; the trial step of each
//!   iteration is twice the previously accepted step (first trial
//!   `1 / max(1, ||g||_2)`).
//! * [`Optimizer::Lbfgs`]: limited-memory BFGS direction from the standard
//!   two-loop recursion with `gamma = s'y / y'y` initial scaling, trial step 1.
//!   Pairs with `s'y <= 1e-12` are skipped; a non-descent direction resets
//!   the memory.

use serde::{Deserialize, Serialize};

use super::objective::Objective;

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Optimizer {
    GradientDescent,
    Lbfgs { memory: usize },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Lbfgs { memory: 10 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn minimize(obj: &dyn Objective, init: Vec<f64>, method: Optimizer, stop: StopRule) -> Minimum {
    let n = obj.dim();
    assert_eq!(init.len(), n, "initial point has wrong dimension");
    let mut x = init;
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, &mut g);

    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut last_step = 1.0 / dot(&g, &g).sqrt().max(1.0);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    while iterations < stop.max_iterations {
        if inf_norm(&g) <= stop.grad_tolerance {
            break;
        }
        let (mut d, mut t) = match method {
            Optimizer::GradientDescent => (g.iter().map(|v| -v).collect::<Vec<_>>(), (2.0 * last_step).min(1e6)),
            Optimizer::Lbfgs { .. } => (lbfgs_direction(&g, &history), 1.0),
        };
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            t = 1.0 / dot(&g, &g).sqrt().max(1.0);
        }

        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            let f_new = obj.eval(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + ARMIJO_C1 * t * slope {
                accepted = Some(f_new);
                break;
            }
            t *= 0.5;
        }
        let Some(f_new) = accepted else {
            break;
        };
        iterations += 1;
        last_step = t;

        if let Optimizer::Lbfgs { memory } = method {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 {
                if history.len() == memory.max(1) {
                    history.remove(0);
                }
                history.push((s, y, 1.0 / sy));
            }
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
    }

    let grad_inf_norm = inf_norm(&g);
    Minimum {
        params: x,
        value: f,
        grad_inf_norm,
        iterations,
        converged: grad_inf_norm <= stop.grad_tolerance,
    }
}

fn lbfgs_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; history.len()];
    for (k, (s, y, rho)) in history.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
    }
    let gamma = match history.last() {
        Some((s, y, _)) => dot(s, y) / dot(y, y),
        None => 1.0 / dot(g, g).sqrt().max(1.0),
    };
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for (k, (s, y, rho)) in history.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alphas[k] - beta) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = 0.5 * sum_i c_i (x_i - i)^2
    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn eval(&self, p: &[f64], g: &mut [f64]) -> f64 {
            let mut f = 0.0;
            for (i, c) in self.0.iter().enumerate() {
                let r = p[i] - i as f64;
                f += 0.5 * c * r * r;
                g[i] = c * r;
            }
            f
        }
    }

    #[test]
    fn both_methods_reach_quadratic_minimum() {
        let obj = Quadratic(vec![1.0, 10.0, 100.0]);
        let stop = StopRule {
            max_iterations: 5000,
            grad_tolerance: 1e-9,
        };
        for method in [Optimizer::GradientDescent, Optimizer::default()] {
            let m = minimize(&obj, vec![5.0; 3], method, stop);
            assert!(m.converged, "{method:?}");
            for (i, p) in m.params.iter().enumerate() {
                assert!((p - i as f64).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_budget_returns_start() {
        let obj = Quadratic(vec![1.0]);
        let stop = StopRule {
            max_iterations: 0,
            grad_tolerance: 1e-9,
        };
        let m = minimize(&obj, vec![3.0], Optimizer::default(), stop);
        assert_eq!(m.params, vec![3.0]);
        assert_eq!(m.iterations, 0);
        assert!(!m.converged);
    }
}
