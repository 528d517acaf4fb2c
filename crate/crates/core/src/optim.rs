//! Derivative-free 1-D minimization and a bounded quasi-Newton minimizer.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct Minimum1d {
    pub x: f64,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Brent's method (golden section with parabolic interpolation) on `[a, b]`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> Minimum1d {
    const CGOLD: f64 = 0.381_966_011_250_105;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut evals = 1;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Minimum1d { x, fx, evals, converged: true };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum1d { x, fx, evals, converged: false }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Convergence threshold on the projected gradient sup-norm.
    pub gtol: f64,
    pub max_iter: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { gtol: 1e-7, max_iter: 300, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub fx: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Box-constrained BFGS with central-difference gradients. Coordinates with
/// `free[j] == false` stay at their starting value.
pub fn bfgs_minimize<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x0: &DVector<f64>,
    free: &[bool],
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &BfgsOptions,
) -> BfgsResult {
    let p = x0.len();
    let project = |x: &mut DVector<f64>| {
        for j in 0..p {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let mut x = x0.clone();
    project(&mut x);
    let mut fx = f(&x);

    let gradient = |f: &mut F, x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(p);
        for j in (0..p).filter(|&j| free[j]) {
            let h = opts.fd_step * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] = (x[j] + h).min(upper[j]);
            xm[j] = (x[j] - h).max(lower[j]);
            let span = xp[j] - xm[j];
            g[j] = if span > 0.0 { (f(&xp) - f(&xm)) / span } else { 0.0 };
        }
        g
    };
    let active = |x: &DVector<f64>, g: &DVector<f64>| -> Vec<bool> {
        (0..p)
            .map(|j| !free[j] || (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0))
            .collect()
    };
    let projected = |g: &DVector<f64>, act: &[bool]| -> DVector<f64> {
        DVector::from_iterator(p, (0..p).map(|j| if act[j] { 0.0 } else { g[j] }))
    };

    let mut g = gradient(&mut f, &x);
    let mut hinv = DMatrix::<f64>::identity(p, p);
    let mut iterations = 0;
    let mut reset_pending = false;
    loop {
        let act = active(&x, &g);
        let pg = projected(&g, &act);
        let gnorm = crate::linalg::sup_norm(&pg);
        if gnorm <= opts.gtol {
            return BfgsResult { x, fx, grad_norm: gnorm, iterations, converged: true };
        }
        if iterations >= opts.max_iter {
            return BfgsResult { x, fx, grad_norm: gnorm, iterations, converged: false };
        }
        iterations += 1;
        let mut d = -(&hinv * &pg);
        for j in 0..p {
            if act[j] {
                d[j] = 0.0;
            }
        }
        if d.dot(&pg) >= 0.0 {
            hinv = DMatrix::identity(p, p);
            d = -pg.clone();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut cand = &x + &d * alpha;
            project(&mut cand);
            let fc = f(&cand);
            let decrease = pg.dot(&(&cand - &x));
            if fc.is_finite() && fc <= fx + 1e-4 * decrease {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            if reset_pending {
                return BfgsResult { x, fx, grad_norm: gnorm, iterations, converged: false };
            }
            // retry once along steepest descent
            hinv = DMatrix::identity(p, p);
            reset_pending = true;
            continue;
        };
        reset_pending = false;
        let gn = gradient(&mut f, &xn);
        let s = &xn - &x;
        let yv = projected(&gn, &act) - &pg;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
}
