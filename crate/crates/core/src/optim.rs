//! BFGS minimisation with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when `max_j |g_j * w_j| < gtol`, `w` = `gradient_weights`.
    pub gtol: f64,
    pub gradient_weights: Option<Vec<f64>>,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 1000,
            gtol: 1e-6,
            gradient_weights: None,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

struct Probe {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    dphi: f64,
}

struct Problem<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F> Problem<'_, F>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.evaluations += 1;
        let (f, g) = (self.f)(x.as_slice())?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((f, DVector::from_vec(g)))
    }

    fn probe(&mut self, x: &DVector<f64>, d: &DVector<f64>, alpha: f64) -> Probe {
        match self.eval(&(x + d * alpha)) {
            Some((f, g)) => {
                let dphi = g.dot(d);
                Probe { alpha, f, g, dphi }
            }
            None => Probe {
                alpha,
                f: f64::INFINITY,
                g: DVector::zeros(x.len()),
                dphi: f64::NAN,
            },
        }
    }
}

fn cubic_min(a: &Probe, b: &Probe) -> Option<f64> {
    // minimiser of the cubic through (alpha, f, dphi) at both ends
    if !a.f.is_finite() || !b.f.is_finite() || !a.dphi.is_finite() || !b.dphi.is_finite() {
        return None;
    }
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}

fn line_search<F>(
    problem: &mut Problem<'_, F>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    dphi0: f64,
    alpha_init: f64,
    opts: &BfgsOptions,
) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    // round-off slack on the sufficient-decrease test near the optimum
    let slack = 1e-14 * f0.abs().max(1.0);
    let armijo = |p: &Probe| p.f <= f0 + opts.c1 * p.alpha * dphi0 + slack;
    let curvature = |p: &Probe| p.dphi.abs() <= -opts.c2 * dphi0;

    let mut prev = Probe {
        alpha: 0.0,
        f: f0,
        g: DVector::zeros(0),
        dphi: dphi0,
    };
    let mut alpha = alpha_init;
    let mut evals = 0;
    let (mut lo, mut hi);
    loop {
        let p = problem.probe(x, d, alpha);
        evals += 1;
        if !armijo(&p) || (evals > 1 && p.f >= prev.f) {
            lo = prev;
            hi = p;
            break;
        }
        if curvature(&p) {
            return Some(p);
        }
        if p.dphi >= 0.0 {
            hi = prev;
            lo = p;
            break;
        }
        if evals >= opts.max_line_search {
            return Some(p);
        }
        prev = p;
        alpha *= 2.0;
    }

    while evals < opts.max_line_search {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        let mut trial = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
        if !(trial > a + 0.1 * width && trial < b - 0.1 * width) {
            trial = 0.5 * (a + b);
        }
        let p = problem.probe(x, d, trial);
        evals += 1;
        if !armijo(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Some(p);
            }
            if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
        if width <= 1e-16 * b.max(1.0) {
            break;
        }
    }
    // best point with a decrease, even if the curvature test never passed
    (lo.alpha > 0.0 && lo.f < f0 + slack).then_some(lo)
}

/// Minimise `f`, which returns the value and gradient or `None` where it is
/// undefined.
pub fn minimize<F>(x0: &[f64], mut f: F, opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let weights = opts
        .gradient_weights
        .clone()
        .map(DVector::from_vec)
        .unwrap_or_else(|| DVector::from_element(n, 1.0));
    let norm = |g: &DVector<f64>| g.component_mul(&weights).amax();

    let mut problem = Problem {
        f: &mut f,
        evaluations: 0,
    };
    let mut x = DVector::from_column_slice(x0);
    let Some((mut fx, mut g)) = problem.eval(&x) else {
        return BfgsOutcome {
            x: x0.to_vec(),
            f: f64::NAN,
            grad: vec![f64::NAN; n],
            grad_norm: f64::NAN,
            iterations: 0,
            evaluations: problem.evaluations,
            converged: false,
            message: "objective undefined at the starting point".into(),
        };
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut message = String::from("maximum iterations reached");
    let mut converged = false;

    while iterations < opts.max_iter {
        if norm(&g) < opts.gtol {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        let mut d = -(&h * &g);
        let mut dphi0 = g.dot(&d);
        if !(dphi0 < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            dphi0 = g.dot(&d);
        }
        let alpha_init = if fresh { (1.0 / g.amax()).min(1.0) } else { 1.0 };
        let step = line_search(&mut problem, &x, &d, fx, dphi0, alpha_init, opts);
        let Some(p) = step else {
            if fresh {
                message = "line search failed".into();
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        iterations += 1;
        let s = &d * p.alpha;
        let y = &p.g - &g;
        x += &s;
        fx = p.f;
        g = p.g;

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // rescale the initial inverse Hessian before the first update
                h *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }
    if !converged && norm(&g) < opts.gtol {
        converged = true;
        message = "gradient tolerance reached".into();
    }
    BfgsOutcome {
        grad_norm: norm(&g),
        x: x.as_slice().to_vec(),
        f: fx,
        grad: g.as_slice().to_vec(),
        iterations,
        evaluations: problem.evaluations,
        converged,
        message,
    }
}
