//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Stop once `‖∇f‖₂ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iterations: 5000,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.grad_tol > 0.0) || self.memory == 0 || self.max_line_search == 0 {
            return Err(crate::Error::invalid(
                "optimizer tolerance, memory and line-search budget must be positive",
            ));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(crate::Error::invalid("line search needs 0 < c1 < c2 < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult<T: Real> {
    /// Best iterate found.
    pub x: DVector<T>,
    pub value: T,
    pub gradient: DVector<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl<T: Real> OptimResult<T> {
    pub fn grad_norm(&self) -> T {
        self.gradient.norm()
    }
}

struct Point<T: Real> {
    x: DVector<T>,
    f: T,
    g: DVector<T>,
}

struct Evaluator<F> {
    f: F,
    count: usize,
}

impl<F> Evaluator<F> {
    fn eval<T: Real>(&mut self, x: DVector<T>) -> Point<T>
    where
        F: FnMut(&DVector<T>) -> (T, DVector<T>),
    {
        self.count += 1;
        let (f, g) = (self.f)(&x);
        let f = if f.is_finite_value() && g.iter().all(|v| v.is_finite_value()) {
            f
        } else {
            T::from_f64(f64::INFINITY).unwrap()
        };
        Point { x, f, g }
    }
}

/// Relative value slack of the approximate Wolfe test.
const APPROX_WOLFE_EPS: f64 = 1e-6;

fn converged<T: Real>(p: &Point<T>, tol: f64) -> bool {
    p.f.is_finite_value() && p.g.norm().as_f64() <= tol * p.f.abs().as_f64().max(1.0)
}

/// Minimizes `f` from `x0`. The objective returns `(value, gradient)`;
/// non-finite values are treated as `+∞`.
pub fn minimize<T, F>(f: F, x0: DVector<T>, config: &OptimConfig) -> OptimResult<T>
where
    T: Real,
    F: FnMut(&DVector<T>) -> (T, DVector<T>),
{
    let mut ev = Evaluator { f, count: 0 };
    let mut cur = ev.eval(x0);
    let mut pairs: VecDeque<(DVector<T>, DVector<T>, T)> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;
    let mut done = converged(&cur, config.grad_tol);
    let mut failures = 0;

    while !done && iterations < config.max_iterations && cur.f.is_finite_value() {
        let mut d = two_loop(&cur.g, &pairs);
        let mut slope = cur.g.dot(&d);
        if !(slope < T::zero()) {
            pairs.clear();
            d = -cur.g.clone();
            slope = cur.g.dot(&d);
        }
        let alpha0 = if pairs.is_empty() {
            T::one().min(T::one() / cur.g.amax())
        } else {
            T::one()
        };
        match line_search(&mut ev, &cur, &d, slope, alpha0, config) {
            Some(next) => {
                failures = 0;
                let s = &next.x - &cur.x;
                let y = &next.g - &cur.g;
                let sy = s.dot(&y);
                if sy > T::EPS * y.norm_squared() && sy > T::zero() {
                    if pairs.len() == config.memory {
                        pairs.pop_front();
                    }
                    pairs.push_back((s, y, T::one() / sy));
                }
                iterations += 1;
                let stalled = next.f >= cur.f && (&next.x - &cur.x).amax() == T::zero();
                cur = next;
                done = converged(&cur, config.grad_tol);
                if stalled {
                    break;
                }
            }
            None => {
                failures += 1;
                if failures > 1 || pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
        }
    }
    OptimResult {
        converged: converged(&cur, config.grad_tol),
        x: cur.x,
        value: cur.f,
        gradient: cur.g,
        iterations,
        evaluations: ev.count,
    }
}

fn two_loop<T: Real>(g: &DVector<T>, pairs: &VecDeque<(DVector<T>, DVector<T>, T)>) -> DVector<T> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = *rho * s.dot(&q);
        q.axpy(-a, y, T::one());
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * y.dot(&q);
        q.axpy(a - b, s, T::one());
    }
    -q
}

/// Strong-Wolfe bracketing and zoom. Returns the accepted point, or the best
/// sufficiently decreasing point seen if the curvature test never passes.
fn line_search<T, F>(
    ev: &mut Evaluator<F>,
    start: &Point<T>,
    d: &DVector<T>,
    slope0: T,
    alpha0: T,
    config: &OptimConfig,
) -> Option<Point<T>>
where
    T: Real,
    F: FnMut(&DVector<T>) -> (T, DVector<T>),
{
    let c1 = T::lit(config.c1);
    let c2 = T::lit(config.c2);
    let armijo = |alpha: T, f: T| f <= start.f + c1 * alpha * slope0;
    // Approximate Wolfe test (Hager and Zhang): once value differences sink
    // into roundoff, accept on the slope alone so stiff problems can still
    // drive the gradient down.
    let f_noise = T::lit(APPROX_WOLFE_EPS) * start.f.abs();
    let approx_wolfe = |p: &Point<T>, slope: T| {
        p.f <= start.f + f_noise
            && slope >= c2 * slope0
            && slope <= (T::lit(2.0) * c1 - T::one()) * slope0
    };
    let mut best: Option<Point<T>> = None;
    let keep_best = |p: &Point<T>, best: &mut Option<Point<T>>| {
        if p.f < start.f && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Point {
                x: p.x.clone(),
                f: p.f,
                g: p.g.clone(),
            });
        }
    };

    let mut prev_alpha = T::zero();
    let mut prev_f = start.f;
    let mut prev_slope = slope0;
    let mut alpha = alpha0;
    let mut bracket = None;
    for i in 0..config.max_line_search {
        let p = ev.eval(&start.x + d * alpha);
        if !p.f.is_finite_value() {
            bracket = Some((prev_alpha, prev_f, prev_slope, alpha, p.f));
            break;
        }
        keep_best(&p, &mut best);
        let slope = p.g.dot(d);
        if approx_wolfe(&p, slope) {
            return Some(p);
        }
        if !armijo(alpha, p.f) || (i > 0 && p.f >= prev_f) {
            bracket = Some((prev_alpha, prev_f, prev_slope, alpha, p.f));
            break;
        }
        if slope.abs() <= -c2 * slope0 {
            return Some(p);
        }
        if slope >= T::zero() {
            bracket = Some((alpha, p.f, slope, prev_alpha, prev_f));
            break;
        }
        prev_alpha = alpha;
        prev_f = p.f;
        prev_slope = slope;
        alpha *= T::lit(2.0);
    }
    let Some((mut lo, mut f_lo, mut s_lo, mut hi, mut f_hi)) = bracket else {
        return best;
    };
    for _ in 0..config.max_line_search {
        let width = hi - lo;
        // Quadratic through (lo, f_lo, s_lo) and (hi, f_hi), kept inside the bracket.
        let denom = T::lit(2.0) * (f_hi - f_lo - s_lo * width);
        let mut alpha = if f_hi.is_finite_value() && denom > T::zero() {
            lo - s_lo * width * width / denom
        } else {
            lo + T::lit(0.5) * width
        };
        let a = lo.min(hi);
        let b = lo.max(hi);
        let margin = T::lit(0.1) * (b - a);
        if !(alpha > a + margin && alpha < b - margin) {
            alpha = lo + T::lit(0.5) * width;
        }
        if (b - a) <= T::EPS * b.max(T::one()) {
            break;
        }
        let p = ev.eval(&start.x + d * alpha);
        if p.f.is_finite_value() && approx_wolfe(&p, p.g.dot(d)) {
            return Some(p);
        }
        if !p.f.is_finite_value() || !armijo(alpha, p.f) || p.f >= f_lo {
            hi = alpha;
            f_hi = p.f;
            continue;
        }
        keep_best(&p, &mut best);
        let slope = p.g.dot(d);
        if slope.abs() <= -c2 * slope0 {
            return Some(p);
        }
        if slope * (hi - lo) >= T::zero() {
            hi = lo;
            f_hi = f_lo;
        }
        lo = alpha;
        f_lo = p.f;
        s_lo = slope;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn quadratic_minimum() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, -0.5, 0.0, -0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = |x: &DVector<f64>| {
            let ax = &a * x;
            (0.5 * x.dot(&ax) - b.dot(x), ax - &b)
        };
        let r = minimize(f, DVector::zeros(3), &OptimConfig::default());
        let exact = a.clone().lu().solve(&b).unwrap();
        assert!(r.converged);
        assert!((r.x - exact).amax() < 1e-9);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (v, g)
        };
        let r = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &OptimConfig::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn start_at_solution() {
        let f = |x: &DVector<f64>| (0.5 * x.norm_squared(), x.clone());
        let r = minimize(f, DVector::zeros(4), &OptimConfig::default());
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn infinite_region_is_avoided() {
        // Barrier at x = 2; minimum at x = 1.5.
        let f = |x: &DVector<f64>| {
            let v = x[0];
            if v >= 2.0 {
                (f64::INFINITY, DVector::from_element(1, f64::NAN))
            } else {
                ((v - 1.5).powi(2) - (2.0 - v).ln() * 1e-3, DVector::from_element(1, 2.0 * (v - 1.5) + 1e-3 / (2.0 - v)))
            }
        };
        let r = minimize(f, DVector::from_element(1, -10.0), &OptimConfig::default());
        assert!(r.converged);
        assert!(r.x[0] < 2.0 && (r.x[0] - 1.5).abs() < 1e-2);
    }
}
