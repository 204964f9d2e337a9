//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_evals: usize,
    pub grad_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iters: 5, history: 10, c1: 1e-4, c2: 0.9, max_line_evals: 20, grad_tolerance: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub f_initial: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Minimizer of the cubic through two points with known slopes, if it lies
/// strictly inside the safeguarded interval.
fn cubic_min(a: &Probe, b: &Probe) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = disc.sqrt().copysign(b.alpha - a.alpha);
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let margin = 0.1 * (hi - lo);
    (t.is_finite() && t > lo + margin && t < hi - margin).then_some(t)
}

struct Search<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    cfg: LbfgsConfig,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Search<'_, F> {
    fn probe(&mut self, alpha: f64) -> Result<Probe> {
        self.evals += 1;
        let (f, g) = (self.f)(&axpy(self.x, alpha, self.d))?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!("objective at step length {alpha}")));
        }
        let slope = dot(&g, self.d);
        Ok(Probe { alpha, f, g, slope })
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.f <= self.f0 + self.cfg.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// Returns an accepted probe, or `None` when no decrease was found.
    fn run(&mut self, alpha1: f64) -> Result<Option<Probe>> {
        let mut prev = Probe { alpha: 0.0, f: self.f0, g: Vec::new(), slope: self.slope0 };
        let mut alpha = alpha1;
        let mut best: Option<Probe> = None;
        for i in 0..self.cfg.max_line_evals {
            let p = self.probe(alpha)?;
            if !self.armijo(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p, best);
            }
            if self.curvature(&p) {
                return Ok(Some(p));
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev, best);
            }
            alpha *= 2.0;
            best = Some(Probe { alpha: p.alpha, f: p.f, g: p.g.clone(), slope: p.slope });
            prev = p;
            if self.evals >= self.cfg.max_line_evals {
                break;
            }
        }
        Ok(best)
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe, best: Option<Probe>) -> Result<Option<Probe>> {
        let mut best = best;
        if lo.alpha > 0.0 && best.as_ref().is_none_or(|b| lo.f < b.f) {
            best = Some(Probe { alpha: lo.alpha, f: lo.f, g: lo.g.clone(), slope: lo.slope });
        }
        while self.evals < self.cfg.max_line_evals {
            let alpha = cubic_min(&lo, &hi).unwrap_or(0.5 * (lo.alpha + hi.alpha));
            if (hi.alpha - lo.alpha).abs() < 1e-14 * lo.alpha.abs().max(1.0) {
                break;
            }
            let p = self.probe(alpha)?;
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Ok(Some(p));
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                if best.as_ref().is_none_or(|b| p.f < b.f) {
                    best = Some(Probe { alpha: p.alpha, f: p.f, g: p.g.clone(), slope: p.slope });
                }
                lo = p;
            }
        }
        Ok(best)
    }
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
///
/// Every accepted iterate satisfies the sufficient-decrease condition, so the
/// returned value never exceeds the initial one. Non-finite values abort
/// with [`CoreError::NonFinite`].
pub fn minimize<F>(x0: Vec<f64>, mut f: F, cfg: LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(&x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("objective at the starting point".into()));
    }
    let f_initial = fx;
    let mut x = x0;
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    while iterations < cfg.max_iters {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= cfg.grad_tolerance {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
            mem.clear();
        }
        let alpha1 = if mem.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut search = Search { f: &mut f, x: &x, d: &d, f0: fx, slope0: slope, cfg, evals: 0 };
        let accepted = search.run(alpha1)?;
        evaluations += search.evals;
        let Some(p) = accepted else { break };
        let s: Vec<f64> = d.iter().map(|v| p.alpha * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        x = axpy(&x, p.alpha, &d);
        fx = p.f;
        g = p.g;
        iterations += 1;
        if sy > 1e-12 {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
    }
    Ok(LbfgsReport { x, f: fx, f_initial, iterations, evaluations })
}
