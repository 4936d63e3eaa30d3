//! Derivative-free bound-constrained minimization with linear interpolation
//! models and a trust region, in the COBYLA family.
//!
//! The search keeps n+1 interpolation points, fits a linear model by solving
//! the interpolation system around the incumbent, and takes box-clipped steps
//! of bounded infinity norm. The trust radius shrinks when the model stops
//! predicting descent and the point set is rebuilt around the incumbent at
//! the new scale.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct DfoOptions {
    pub rhobeg: f64,
    pub rhoend: f64,
    pub maxfun: usize,
}

impl Default for DfoOptions {
    fn default() -> Self {
        Self {
            rhobeg: 0.2,
            rhoend: 1e-3,
            maxfun: 250,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DfoResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub n_evals: usize,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        1e300
    }
}

struct Search<'a, F> {
    f: &'a mut F,
    n_evals: usize,
    maxfun: usize,
}

impl<F: FnMut(&[f64]) -> f64> Search<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.n_evals += 1;
        sanitize((self.f)(x))
    }

    fn exhausted(&self) -> bool {
        self.n_evals >= self.maxfun
    }
}

/// Minimizes `f` over the unit box [0,1]^n starting from `x0`.
pub fn minimize_unit_box<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: DfoOptions,
) -> DfoResult {
    let n = x0.len();
    let mut search = Search {
        f: &mut f,
        n_evals: 0,
        maxfun: opts.maxfun,
    };

    let center: Vec<f64> = x0.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let f0 = search.eval(&center);
    if n == 0 || search.exhausted() {
        return DfoResult {
            x: center,
            value: f0,
            n_evals: search.n_evals,
        };
    }

    // pts[0] is the center of the most recent rebuild; pts[1..] its axis offsets.
    let offsets = |center: &[f64], h: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let mut y = center.to_vec();
                let step = if y[k] + h <= 1.0 { h } else { -h };
                y[k] = (y[k] + step).clamp(0.0, 1.0);
                y
            })
            .collect()
    };

    let mut pts: Vec<Vec<f64>> = vec![center.clone()];
    let mut vals: Vec<f64> = vec![f0];
    for p in offsets(&center, opts.rhobeg) {
        if search.exhausted() {
            break;
        }
        let v = search.eval(&p);
        pts.push(p);
        vals.push(v);
    }

    let mut rho = opts.rhobeg;
    while rho >= opts.rhoend && !search.exhausted() && pts.len() == n + 1 {
        let best = argmin(&vals);
        let others: Vec<usize> = (0..pts.len()).filter(|&i| i != best).collect();
        let s = DMatrix::from_fn(n, n, |r, k| pts[others[r]][k] - pts[best][k]);
        let df = DVector::from_fn(n, |r, _| vals[others[r]] - vals[best]);
        let grad = match s.lu().solve(&df) {
            Some(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => {
                rho *= 0.5;
                rebuild(&mut pts, &mut vals, &mut search, &offsets, rho);
                continue;
            }
        };

        // Box-clipped steepest step of the linear model, infinity-norm radius.
        let bx = &pts[best];
        let mut cand = bx.clone();
        let mut predicted = 0.0;
        for k in 0..n {
            let d = if grad[k] > 0.0 { -rho } else { rho };
            let d = d.clamp(-bx[k], 1.0 - bx[k]);
            cand[k] = (bx[k] + d).clamp(0.0, 1.0);
            predicted -= grad[k] * d;
        }

        if predicted <= 1e-12 * (1.0 + vals[best].abs()) {
            rho *= 0.5;
            rebuild(&mut pts, &mut vals, &mut search, &offsets, rho);
            continue;
        }

        let fc = search.eval(&cand);
        let actual = vals[best] - fc;

        // Replace the worst point, never the incumbent.
        let worst = (0..pts.len())
            .filter(|&i| i != best)
            .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
            .unwrap();
        if fc < vals[worst] {
            pts[worst] = cand;
            vals[worst] = fc;
        }

        let ratio = actual / predicted;
        if ratio < 0.1 {
            rho *= 0.5;
            rebuild(&mut pts, &mut vals, &mut search, &offsets, rho);
        } else if ratio > 0.7 {
            rho = (rho * 1.5).min(opts.rhobeg);
        }
    }

    let best = argmin(&vals);
    DfoResult {
        x: pts[best].clone(),
        value: vals[best],
        n_evals: search.n_evals,
    }
}

fn argmin(vals: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    best
}

fn rebuild<F: FnMut(&[f64]) -> f64>(
    pts: &mut Vec<Vec<f64>>,
    vals: &mut Vec<f64>,
    search: &mut Search<'_, F>,
    offsets: &impl Fn(&[f64], f64) -> Vec<Vec<f64>>,
    rho: f64,
) {
    let best = argmin(vals);
    let center = pts[best].clone();
    let fc = vals[best];
    pts.clear();
    vals.clear();
    pts.push(center.clone());
    vals.push(fc);
    for p in offsets(&center, rho) {
        if search.exhausted() {
            break;
        }
        let v = search.eval(&p);
        pts.push(p);
        vals.push(v);
    }
}
