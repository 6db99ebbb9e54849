//! Limited-memory BFGS with a strong-Wolfe line search (bracketing + zoom with
//! safeguarded cubic interpolation).

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;
use thiserror::Error;

/// A smooth scalar function of `dim()` variables with its gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes `∇f(x)` into `grad` and returns `f(x)`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ObjectiveError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("objective failed: {0}")]
pub struct ObjectiveError(pub String);

/// Closure-backed objective.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, ObjectiveError> {
        Ok((self.f)(x, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖∇f‖∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when `|f_k − f_{k+1}| ≤ rel_ftol · max(|f_k|, |f_{k+1}|, 1)`.
    pub rel_ftol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_linesearch: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iter: 1000, grad_tol: 1e-9, rel_ftol: 1e-14, c1: 1e-4, c2: 0.9, max_linesearch: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// The iteration observer asked to stop.
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("bad input: {0}")]
    Input(String),
    #[error("non-finite objective or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("line search failed at iteration {} (best value {})", best.iterations, best.value)]
    LineSearch { best: Box<Minimum> },
}

impl OptimError {
    /// Recover the best iterate from a line-search failure; other errors pass through.
    pub fn into_best(self) -> Result<Minimum, OptimError> {
        match self {
            OptimError::LineSearch { best } => Ok(*best),
            other => Err(other),
        }
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,objective,grad_norm,step")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.iteration, r.objective, r.grad_norm, r.step)?;
    }
    Ok(())
}

/// State handed to the per-iteration observer.
pub struct IterState<'a> {
    pub iteration: usize,
    pub x: &'a [f64],
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Probe<'a, O: Objective + ?Sized> {
    obj: &'a O,
    x0: &'a [f64],
    dir: &'a [f64],
    evaluations: usize,
    x: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    alpha: f64,
    f: f64,
    dphi: f64,
}

impl<O: Objective + ?Sized> Probe<'_, O> {
    /// φ(α) = f(x0 + α d); leaves the trial point and gradient in `self.x`, `self.g`.
    fn sample(&mut self, alpha: f64, iteration: usize) -> Result<Sample, OptimError> {
        for ((xi, x0), d) in self.x.iter_mut().zip(self.x0).zip(self.dir) {
            *xi = x0 + alpha * d;
        }
        self.evaluations += 1;
        let f = self.obj.eval(&self.x, &mut self.g)?;
        if f.is_nan() || (f.is_finite() && self.g.iter().any(|v| !v.is_finite())) {
            return Err(OptimError::NonFinite { iteration });
        }
        let dphi = if f.is_finite() { dot(&self.g, self.dir) } else { f64::NAN };
        Ok(Sample { alpha, f, dphi })
    }
}

/// Minimizer of the cubic interpolating two samples, or `None` when degenerate.
fn cubic_min(a: Sample, b: Sample) -> Option<f64> {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

enum Search {
    /// Strong-Wolfe point found.
    Accepted(Sample),
    /// No point satisfying both conditions within the budget; carries the best decreasing point, if any.
    Failed(Option<Sample>),
}

fn strong_wolfe<O: Objective + ?Sized>(
    probe: &mut Probe<'_, O>,
    f0: f64,
    dphi0: f64,
    alpha0: f64,
    cfg: &LbfgsConfig,
    iteration: usize,
    best_x: &mut Vec<f64>,
    best_g: &mut Vec<f64>,
) -> Result<Search, OptimError> {
    let origin = Sample { alpha: 0.0, f: f0, dphi: dphi0 };
    let armijo = |s: &Sample| s.f <= f0 + cfg.c1 * s.alpha * dphi0;
    let curvature = |s: &Sample| s.dphi.abs() <= -cfg.c2 * dphi0;
    let mut best: Option<Sample> = None;
    let mut remember = |s: Sample, probe: &Probe<'_, O>, best: &mut Option<Sample>| {
        if s.f < f0 && armijo(&s) && best.is_none_or(|b| s.f < b.f) {
            *best = Some(s);
            best_x.clone_from(&probe.x);
            best_g.clone_from(&probe.g);
        }
    };

    let mut prev = origin;
    let mut alpha = alpha0;
    let mut bracket = None;
    for i in 0..cfg.max_linesearch {
        let s = probe.sample(alpha, iteration)?;
        remember(s, probe, &mut best);
        if !armijo(&s) || !s.f.is_finite() || (i > 0 && s.f >= prev.f) {
            bracket = Some((prev, s));
            break;
        }
        if curvature(&s) {
            return Ok(Search::Accepted(s));
        }
        if s.dphi >= 0.0 {
            bracket = Some((s, prev));
            break;
        }
        prev = s;
        alpha *= 2.0;
    }
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(Search::Failed(best));
    };

    for _ in 0..cfg.max_linesearch {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1e-300) {
            break;
        }
        let trial = if hi.f.is_finite() { cubic_min(lo, hi) } else { None };
        let alpha = match trial {
            Some(t) if t > a + 0.1 * width && t < b - 0.1 * width => t,
            _ => 0.5 * (a + b),
        };
        let s = probe.sample(alpha, iteration)?;
        remember(s, probe, &mut best);
        if !armijo(&s) || !s.f.is_finite() || s.f >= lo.f {
            hi = s;
        } else {
            if curvature(&s) {
                return Ok(Search::Accepted(s));
            }
            if s.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = s;
        }
    }
    Ok(Search::Failed(best))
}

/// Minimize without an observer.
pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &LbfgsConfig) -> Result<Minimum, OptimError> {
    minimize_observed(obj, x0, cfg, |_| Control::Continue)
}

/// Minimize, calling `observer` after every accepted step (and once at the start, iteration 0).
pub fn minimize_observed<O, F>(obj: &O, x0: &[f64], cfg: &LbfgsConfig, mut observer: F) -> Result<Minimum, OptimError>
where
    O: Objective + ?Sized,
    F: FnMut(&IterState<'_>) -> Control,
{
    let n = obj.dim();
    if x0.len() != n {
        return Err(OptimError::Input(format!("x0 has length {} but objective has dimension {n}", x0.len())));
    }
    if cfg.memory == 0 {
        return Err(OptimError::Input("memory must be at least 1".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::Input("x0 is not finite".into()));
    }

    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, &mut g)?;
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite { iteration: 0 });
    }
    let mut trace = vec![TraceRow { iteration: 0, objective: f, grad_norm: inf_norm(&g), step: 0.0 }];
    let finish = |x: Vec<f64>, f: f64, g: &[f64], it: usize, ev: usize, t: Termination, trace: Vec<TraceRow>| Minimum {
        x,
        value: f,
        grad_norm: inf_norm(g),
        iterations: it,
        evaluations: ev,
        termination: t,
        trace,
    };

    if observer(&IterState { iteration: 0, x: &x, value: f, grad_norm: inf_norm(&g) }) == Control::Stop {
        return Ok(finish(x, f, &g, 0, evaluations, Termination::Stopped, trace));
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];
    let mut best_x = Vec::with_capacity(n);
    let mut best_g = Vec::with_capacity(n);

    for iteration in 1..=cfg.max_iter {
        if inf_norm(&g) <= cfg.grad_tol {
            return Ok(finish(x, f, &g, iteration - 1, evaluations, Termination::GradientTolerance, trace));
        }

        // Two-loop recursion: dir = −H·g.
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[k] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for (k, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha_buf[k];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }

        let mut dphi0 = dot(&g, &dir);
        if !(dphi0 < 0.0) {
            pairs.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            dphi0 = dot(&g, &dir);
        }

        let (sample, x_new, g_new) = loop {
            let alpha0 = if pairs.is_empty() { (1.0 / dot(&g, &g).sqrt()).min(1.0) } else { 1.0 };
            let mut probe = Probe { obj, x0: &x, dir: &dir, evaluations: 0, x: vec![0.0; n], g: vec![0.0; n] };
            let outcome = strong_wolfe(&mut probe, f, dphi0, alpha0, cfg, iteration, &mut best_x, &mut best_g)?;
            evaluations += probe.evaluations;
            match outcome {
                Search::Accepted(s) => break (s, probe.x, probe.g),
                Search::Failed(Some(s)) => break (s, std::mem::take(&mut best_x), std::mem::take(&mut best_g)),
                Search::Failed(None) if !pairs.is_empty() => {
                    // Retry once along steepest descent with a fresh memory.
                    pairs.clear();
                    dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                    dphi0 = dot(&g, &dir);
                }
                Search::Failed(None) => {
                    let best = finish(x, f, &g, iteration - 1, evaluations, Termination::MaxIterations, trace);
                    return Err(OptimError::LineSearch { best: Box::new(best) });
                }
            }
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let f_old = f;
        x = x_new;
        g = g_new;
        f = sample.f;
        let gn = inf_norm(&g);
        trace.push(TraceRow { iteration, objective: f, grad_norm: gn, step: sample.alpha });

        if observer(&IterState { iteration, x: &x, value: f, grad_norm: gn }) == Control::Stop {
            return Ok(finish(x, f, &g, iteration, evaluations, Termination::Stopped, trace));
        }
        if (f_old - f).abs() <= cfg.rel_ftol * f_old.abs().max(f.abs()).max(1.0) {
            return Ok(finish(x, f, &g, iteration, evaluations, Termination::FunctionTolerance, trace));
        }
    }
    let it = cfg.max_iter;
    Ok(finish(x, f, &g, it, evaluations, Termination::MaxIterations, trace))
}
