//! Full-batch minimizers over flat parameter vectors: Adam, and L-BFGS
//! with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic scalar objective with gradient.
pub trait Objective {
    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(params)
    }
}

/// Restricts an objective to a subset of coordinates; the rest stay at `base`.
pub struct Masked<'a, O: ?Sized> {
    inner: &'a O,
    base: Vec<f64>,
    free: Vec<usize>,
}

impl<'a, O: Objective + ?Sized> Masked<'a, O> {
    pub fn new(inner: &'a O, base: Vec<f64>, free: Vec<usize>) -> Self {
        Self { inner, base, free }
    }

    pub fn free_params(&self) -> Vec<f64> {
        self.free.iter().map(|&i| self.base[i]).collect()
    }

    pub fn expand(&self, sub: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&i, &v) in self.free.iter().zip(sub) {
            full[i] = v;
        }
        full
    }
}

impl<O: Objective + ?Sized> Objective for Masked<'_, O> {
    fn evaluate(&self, sub: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, g) = self.inner.evaluate(&self.expand(sub))?;
        Ok((f, self.free.iter().map(|&i| g[i]).collect()))
    }
}

/// Why a minimizer stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    RelTol,
    MaxIter,
    LineSearchFailed,
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub params: Vec<f64>,
    /// Loss at the start and after every accepted iteration.
    pub trace: Vec<f64>,
    pub termination: Termination,
    pub evaluations: usize,
}

impl Outcome {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }
}

fn non_finite(e: Error) -> Result<Termination> {
    match e {
        Error::NonFinite { term } => Ok(Termination::NonFinite(term.to_string())),
        other => Err(other),
    }
}

fn checked(f: f64, g: &[f64]) -> Result<()> {
    if !f.is_finite() {
        return Err(Error::NonFinite { term: "loss" });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "gradient" });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates of Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected update in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Runs `iters` Adam steps. A non-finite loss stops the run and returns
/// the last finite parameters.
pub fn adam_minimize(
    objective: &(impl Objective + ?Sized),
    params: &[f64],
    iters: usize,
    config: AdamConfig,
) -> Result<Outcome> {
    if iters == 0 {
        return Err(Error::config("Adam needs at least one iteration"));
    }
    let mut state = AdamState::new(config, params.len());
    let mut x = params.to_vec();
    let mut rollback = x.clone();
    let mut trace = Vec::with_capacity(iters + 1);
    let mut evaluations = 0;
    for it in 0..=iters {
        let (f, g) = match objective.evaluate(&x).and_then(|(f, g)| checked(f, &g).map(|_| (f, g))) {
            Ok(v) => v,
            Err(e) => {
                let termination = non_finite(e)?;
                // the step that produced the bad point is undone
                let last = if it > 0 { rollback } else { x };
                return Ok(Outcome { params: last, trace, termination, evaluations });
            }
        };
        evaluations += 1;
        trace.push(f);
        if it == iters {
            break;
        }
        rollback.clone_from(&x);
        state.update(&mut x, &g);
    }
    Ok(Outcome { params: x, trace, termination: Termination::MaxIter, evaluations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
    pub grad_tol: f64,
    /// Stop when `(f_k − f_{k+1}) / max(|f_k|, |f_{k+1}|)` falls below this.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { history: 50, c1: 1e-4, c2: 0.9, max_line_evals: 25, grad_tol: 1e-8, rel_tol: 1e-15, max_iter: 1000 }
    }
}

/// Curvature pairs of the limited-memory inverse Hessian.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub config: LbfgsConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        Self { config, pairs: VecDeque::with_capacity(config.history) }
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Stores `(s, y)` if `sᵀy > 0`; returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-10 * norm(&s) * norm(&y)) || self.config.history == 0 {
            return false;
        }
        if self.pairs.len() == self.config.history {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Two-loop recursion: returns `−H g`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Probe {
    step: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

enum Search {
    Found(Probe),
    /// No strong-Wolfe point, but this one decreased sufficiently.
    Armijo(Probe),
    Failed,
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// falling back to bisection.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc >= 0.0 {
        let d2 = disc.sqrt().copysign(b - a);
        let t = b - (b - a) * ((db + d2 - d1) / (db - da + 2.0 * d2));
        if t.is_finite() {
            return t;
        }
    }
    0.5 * (a + b)
}

/// Strong-Wolfe line search along `d` (bracketing then zoom).
fn strong_wolfe(
    objective: &(impl Objective + ?Sized),
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    step0: f64,
    cfg: &LbfgsConfig,
    evaluations: &mut usize,
) -> Result<Search> {
    let eval = |step: f64, evaluations: &mut usize| -> Result<Probe> {
        let mut xt = x.to_vec();
        axpy(step, d, &mut xt);
        let (f, g) = objective.evaluate(&xt)?;
        checked(f, &g)?;
        *evaluations += 1;
        let slope = dot(&g, d);
        Ok(Probe { step, f, g, slope })
    };
    let armijo = |p: &Probe| p.f <= f0 + cfg.c1 * p.step * slope0;
    let curvature = |p: &Probe| p.slope.abs() <= -cfg.c2 * slope0;

    let mut used = 0;
    let mut prev = Probe { step: 0.0, f: f0, g: Vec::new(), slope: slope0 };
    let mut step = step0;
    let (mut lo, mut hi);
    loop {
        if used >= cfg.max_line_evals {
            return Ok(Search::Failed);
        }
        let cur = eval(step, evaluations)?;
        used += 1;
        if !armijo(&cur) || (used > 1 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Ok(Search::Found(cur));
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        step = (2.0 * cur.step)
            .max(cubic_min(prev.step, prev.f, prev.slope, cur.step, cur.f, cur.slope))
            .min(10.0 * cur.step);
        prev = cur;
    }
    // zoom: `lo` satisfies Armijo and has the lowest value seen in the bracket
    while used < cfg.max_line_evals {
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let width = b - a;
        if width * norm(d) < 1e-14 * (1.0 + norm(x)) {
            break;
        }
        let mut t = cubic_min(lo.step, lo.f, lo.slope, hi.step, hi.f, hi.slope);
        let margin = 0.1 * width;
        if !(t > a + margin && t < b - margin) {
            t = 0.5 * (a + b);
        }
        let cur = eval(t, evaluations)?;
        used += 1;
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Search::Found(cur));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    if lo.step > 0.0 && lo.f < f0 {
        Ok(Search::Armijo(lo))
    } else {
        Ok(Search::Failed)
    }
}

/// Limited-memory BFGS. Every accepted step satisfies the sufficient
/// decrease condition, so the trace is non-increasing.
pub fn lbfgs_minimize(
    objective: &(impl Objective + ?Sized),
    params: &[f64],
    state: &mut LbfgsState,
) -> Result<Outcome> {
    let cfg = state.config;
    let mut x = params.to_vec();
    let mut evaluations = 0;
    let (mut f, mut g) = match objective.evaluate(&x).and_then(|(f, g)| checked(f, &g).map(|_| (f, g))) {
        Ok(v) => v,
        Err(e) => {
            let termination = non_finite(e)?;
            return Ok(Outcome { params: x, trace: Vec::new(), termination, evaluations });
        }
    };
    evaluations += 1;
    let mut trace = vec![f];
    let finish = |x, trace, termination, evaluations| Ok(Outcome { params: x, trace, termination, evaluations });
    if norm(&g) < cfg.grad_tol {
        return finish(x, trace, Termination::GradTol, evaluations);
    }
    for _ in 0..cfg.max_iter {
        let mut d = state.direction(&g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            state.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let step0 = if state.n_pairs() == 0 { (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0) } else { 1.0 };
        let search = match strong_wolfe(objective, &x, f, slope, &d, step0, &cfg, &mut evaluations) {
            Ok(s) => s,
            Err(e) => return finish(x, trace, non_finite(e)?, evaluations),
        };
        let probe = match search {
            Search::Found(p) | Search::Armijo(p) => p,
            Search::Failed => {
                if state.n_pairs() > 0 {
                    // retry from steepest descent once before giving up
                    state.clear();
                    continue;
                }
                return finish(x, trace, Termination::LineSearchFailed, evaluations);
            }
        };
        let s: Vec<f64> = d.iter().map(|v| v * probe.step).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        state.push(s.clone(), y);
        axpy(1.0, &s, &mut x);
        let decrease = (f - probe.f) / f.abs().max(probe.f.abs()).max(f64::MIN_POSITIVE);
        f = probe.f;
        g = probe.g;
        trace.push(f);
        if norm(&g) < cfg.grad_tol {
            return finish(x, trace, Termination::GradTol, evaluations);
        }
        if decrease < cfg.rel_tol {
            return finish(x, trace, Termination::RelTol, evaluations);
        }
    }
    finish(x, trace, Termination::MaxIter, evaluations)
}
