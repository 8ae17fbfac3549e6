//! Limited-memory quasi-Newton minimisation with a strong Wolfe line search.
//!
//! Full-batch and single-threaded: given the same objective and start point the
//! iterate sequence is bitwise reproducible.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Number of `(s, y)` correction pairs kept.
    pub memory_depth: usize,
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm drops to this value.
    pub grad_tol: f64,
    /// Stop once an accepted step lowers the loss by at most this fraction of
    /// `max(|f|, 1)`.
    pub loss_rel_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search_evals: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            memory_depth: 10,
            max_iterations: 200,
            grad_tol: 1e-8,
            loss_rel_tol: 1e-12,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_evals: 25,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.memory_depth >= 1
            && self.max_iterations >= 1
            && self.max_line_search_evals >= 1
            && self.grad_tol > 0.0
            && self.loss_rel_tol > 0.0
            && 0.0 < self.wolfe_c1
            && self.wolfe_c1 < self.wolfe_c2
            && self.wolfe_c2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    LossTolerance,
    MaxIterations,
    /// No step along any descent direction lowered the loss.
    LineSearchStalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub final_loss: f64,
    pub grad_inf_norm: f64,
    pub termination: Termination,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Constant start point `(1e-3)^(1/levels)`, so the product of one weight from
/// each level is `1e-3`.
pub fn init_params(levels: u32, count: usize) -> Result<Vec<f64>> {
    if !(1..=2).contains(&levels) {
        return Err(Error::Config(format!(
            "kernel hierarchies have 1 or 2 levels, got {levels}"
        )));
    }
    Ok(vec![1e-3f64.powf(1.0 / levels as f64); count])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Correction {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn search_direction(grad: &[f64], memory: &VecDeque<Correction>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; memory.len()];
    for (i, c) in memory.iter().enumerate().rev() {
        alpha[i] = c.rho * dot(&c.s, &q);
        for (qi, yi) in q.iter_mut().zip(&c.y) {
            *qi -= alpha[i] * yi;
        }
    }
    if let Some(last) = memory.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, c) in memory.iter().enumerate() {
        let beta = c.rho * dot(&c.y, &q);
        for (qi, si) in q.iter_mut().zip(&c.s) {
            *qi += si * (alpha[i] - beta);
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Clone)]
struct Trial {
    step: f64,
    loss: f64,
    slope: f64,
    grad: Vec<f64>,
}

struct Evaluator<'a, F> {
    objective: &'a mut F,
    evaluations: usize,
    iteration: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Evaluator<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluations += 1;
        let (loss, grad) = (self.objective)(x);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Optimizer {
                iteration: self.iteration,
                reason: format!("non-finite objective (loss {loss})"),
            });
        }
        if grad.len() != x.len() {
            return Err(Error::Optimizer {
                iteration: self.iteration,
                reason: format!("gradient length {} for {} parameters", grad.len(), x.len()),
            });
        }
        Ok((loss, grad))
    }

    fn trial(&mut self, x: &[f64], dir: &[f64], step: f64) -> Result<Trial> {
        let point: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + step * di).collect();
        let (loss, grad) = self.eval(&point)?;
        Ok(Trial {
            step,
            slope: dot(&grad, dir),
            loss,
            grad,
        })
    }
}

/// Minimiser of the cubic matching value and slope at both ends, kept inside
/// the middle 80% of the bracket.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.step, hi.step);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.loss - hi.loss) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mid = 0.5 * (a + b);
    let candidate = if disc >= 0.0 {
        let d2 = disc.sqrt() * (b - a).signum();
        b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2)
    } else {
        mid
    };
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if candidate.is_finite() && candidate > left + margin && candidate < right - margin {
        candidate
    } else {
        mid
    }
}

enum Search {
    Accepted(Trial),
    Failed,
}

/// Strong Wolfe line search (bracketing then zoom). Falls back to the best
/// strictly decreasing trial when the budget runs out.
fn line_search<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    eval: &mut Evaluator<'_, F>,
    x: &[f64],
    loss: f64,
    slope0: f64,
    dir: &[f64],
    initial_step: f64,
    config: &OptimConfig,
) -> Result<Search> {
    let c1 = config.wolfe_c1;
    let c2 = config.wolfe_c2;
    let budget = config.max_line_search_evals;
    let sufficient = |t: &Trial| t.loss <= loss + c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -c2 * slope0;

    let mut best: Option<Trial> = None;
    let note = |t: &Trial, best: &mut Option<Trial>| {
        if t.loss < loss && best.as_ref().map_or(true, |b| t.loss < b.loss) {
            *best = Some(t.clone());
        }
    };

    let origin = Trial {
        step: 0.0,
        loss,
        slope: slope0,
        grad: Vec::new(),
    };
    let mut prev = origin;
    let mut step = initial_step;
    let mut used = 0;
    let (mut lo, mut hi) = loop {
        if used == budget {
            return Ok(best.map_or(Search::Failed, Search::Accepted));
        }
        let t = eval.trial(x, dir, step)?;
        used += 1;
        note(&t, &mut best);
        if !sufficient(&t) || (prev.step > 0.0 && t.loss >= prev.loss) {
            break (prev, t);
        }
        if curvature(&t) {
            return Ok(Search::Accepted(t));
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        prev = t;
        step *= 2.0;
    };

    while used < budget {
        if (hi.step - lo.step).abs() <= f64::EPSILON * lo.step.abs().max(1e-300) {
            break;
        }
        let t = eval.trial(x, dir, interpolate(&lo, &hi))?;
        used += 1;
        note(&t, &mut best);
        if !sufficient(&t) || t.loss >= lo.loss {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(Search::Accepted(t));
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    Ok(best.map_or(Search::Failed, Search::Accepted))
}

/// Minimises `objective` from `init`. The objective returns the loss and its
/// gradient at a point.
///
/// Accepted steps never increase the loss. When a correction pair violates
/// the curvature condition (`s.y <= 0`) the memory is cleared and the next
/// direction is steepest descent.
pub fn minimize<F>(mut objective: F, init: Vec<f64>, config: &OptimConfig) -> Result<(Vec<f64>, OptimReport)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    config.validate()?;
    let mut eval = Evaluator {
        objective: &mut objective,
        evaluations: 0,
        iteration: 0,
    };
    let mut x = init;
    let (mut loss, mut grad) = eval.eval(&x)?;
    let mut memory: VecDeque<Correction> = VecDeque::with_capacity(config.memory_depth);
    let mut trace = vec![loss];
    let mut iterations = 0;

    let termination = loop {
        if inf_norm(&grad) <= config.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations == config.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        eval.iteration = iterations;

        let mut dir = search_direction(&grad, &memory);
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            memory.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
        }
        let steepest_step = |g: &[f64]| (1.0 / inf_norm(g)).min(1.0);
        let initial = if memory.is_empty() { steepest_step(&grad) } else { 1.0 };

        let mut outcome = line_search(&mut eval, &x, loss, slope, &dir, initial, config)?;
        if matches!(outcome, Search::Failed) && !memory.is_empty() {
            memory.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            outcome = line_search(&mut eval, &x, loss, slope, &dir, steepest_step(&grad), config)?;
        }
        let trial = match outcome {
            Search::Accepted(t) => t,
            Search::Failed => break Termination::LineSearchStalled,
        };

        let s: Vec<f64> = dir.iter().map(|d| trial.step * d).collect();
        let y: Vec<f64> = trial.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y) && sy > 0.0 {
            if memory.len() == config.memory_depth {
                memory.pop_front();
            }
            memory.push_back(Correction { rho: 1.0 / sy, s, y });
        } else {
            memory.clear();
        }

        for (xi, si) in x.iter_mut().zip(&dir) {
            *xi += trial.step * si;
        }
        let decrease = loss - trial.loss;
        loss = trial.loss;
        grad = trial.grad;
        trace.push(loss);
        if decrease <= config.loss_rel_tol * loss.abs().max(1.0) && inf_norm(&grad) > config.grad_tol {
            break Termination::LossTolerance;
        }
    };

    let report = OptimReport {
        iterations,
        evaluations: eval.evaluations,
        final_loss: loss,
        grad_inf_norm: inf_norm(&grad),
        termination,
        loss_trace: trace,
    };
    Ok((x, report))
}
