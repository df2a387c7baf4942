//! Reference solvers built on `nalgebra` with their own formulas. Nothing in
//! here calls the production solvers; inputs and outputs are plain vectors
//! and row-major matrices so results can be compared directly.

use nalgebra::{DMatrix, DVector};

pub fn to_dmatrix(rows: usize, cols: usize, row_major: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, row_major)
}

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn solve_spd(m: &DMatrix<f64>, rhs: &[f64]) -> Vec<f64> {
    let rhs = dv(rhs);
    match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs).as_slice().to_vec(),
        None => m
            .clone()
            .lu()
            .solve(&rhs)
            .expect("oracle: singular system")
            .as_slice()
            .to_vec(),
    }
}

/// Dense direct solve `m x = rhs` by LU with partial pivoting.
pub fn dense_solve(m: &DMatrix<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    m.clone().lu().solve(&dv(rhs)).map(|x| x.as_slice().to_vec())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.as_slice().to_vec();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// `max g^T d  s.t.  1/2 d^T H d <= delta` by bisection on the multiplier of
/// `d = H^-1 g / lambda` until the quadratic constraint is tight.
pub fn trust_region_qp(g: &[f64], h: &DMatrix<f64>, delta: f64) -> Vec<f64> {
    let hg = DVector::from_vec(solve_spd(h, g));
    let hmat = h.clone();
    let kl = |lambda: f64| {
        let d = &hg / lambda;
        0.5 * d.dot(&(&hmat * &d))
    };
    let (mut lo, mut hi) = (1e-12, 1.0);
    while kl(hi) > delta {
        hi *= 2.0;
    }
    while kl(lo) < delta {
        lo /= 2.0;
        if lo < 1e-300 {
            break;
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if kl(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-16 * hi {
            break;
        }
    }
    let lambda = 0.5 * (lo + hi);
    (&hg / lambda).as_slice().to_vec()
}

/// Projection of `point` onto `{x : a^T (x - anchor) + b <= 0}` in the
/// metric `l`, via the KKT system of the equality-constrained problem.
pub fn halfspace_projection(point: &[f64], anchor: &[f64], a: &[f64], b: f64, l: &DMatrix<f64>) -> Vec<f64> {
    let n = point.len();
    let av = dv(a);
    let viol = av.dot(&(dv(point) - dv(anchor))) + b;
    if viol <= 0.0 {
        return point.to_vec();
    }
    // [L  a; a^T 0] [x; mu] = [L p; a^T anchor - b]
    let mut k = DMatrix::<f64>::zeros(n + 1, n + 1);
    k.view_mut((0, 0), (n, n)).copy_from(l);
    for i in 0..n {
        k[(i, n)] = a[i];
        k[(n, i)] = a[i];
    }
    let lp = l * dv(point);
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from(&lp);
    rhs[n] = av.dot(&dv(anchor)) - b;
    let sol = k.lu().solve(&rhs).expect("oracle: singular KKT system");
    sol.rows(0, n).as_slice().to_vec()
}

/// Two-stage reference for the PCPO update: trust-region QP, then metric projection.
pub fn two_stage_update(
    theta: &[f64],
    g: &[f64],
    a: &[f64],
    b: f64,
    h: &DMatrix<f64>,
    delta: f64,
    kl_metric: bool,
) -> Vec<f64> {
    let d = trust_region_qp(g, h, delta);
    let mid: Vec<f64> = theta.iter().zip(&d).map(|(t, s)| t + s).collect();
    let l = if kl_metric {
        h.clone()
    } else {
        DMatrix::identity(theta.len(), theta.len())
    };
    halfspace_projection(&mid, theta, a, b, &l)
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
        if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Minimise a convex function of one variable on `[0, inf)` by grid search
/// over an expanding range, then golden-section polish.
fn grid_then_polish(f: &dyn Fn(f64) -> f64, scale: f64) -> f64 {
    let mut hi = scale.max(1e-12);
    while f(2.0 * hi) < f(hi) {
        hi *= 2.0;
    }
    let hi = 4.0 * hi;
    let n = 400;
    let mut best: usize = 0;
    let mut best_val = f(0.0);
    for i in 1..=n {
        let v = f(hi * i as f64 / n as f64);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let lo = hi * best.saturating_sub(1) as f64 / n as f64;
    let up = hi * (best + 1).min(n) as f64 / n as f64;
    golden_min(f, lo, up, 400)
}

/// Reference solution of
/// `max g^T x  s.t.  1/2 x^T H x <= delta,  a^T x + b <= 0`
/// from the Lagrange dual `D(lambda, nu) = |g - nu a|^2_{H^-1} / (2 lambda) + lambda delta - nu b`,
/// minimised over `lambda > 0, nu >= 0` by grid search and polish in each
/// variable. Returns the step `x` or `None` when the problem is infeasible.
pub fn cpo_dual_step(g: &[f64], a: &[f64], b: f64, h: &DMatrix<f64>, delta: f64) -> Option<Vec<f64>> {
    let hinv = h.clone().try_inverse().expect("oracle: singular H");
    let gv = dv(g);
    let av = dv(a);
    let s = av.dot(&(&hinv * &av));
    if b > 0.0 && b * b > 2.0 * delta * s {
        return None;
    }
    let norm_sq = |nu: f64| {
        let v = &gv - &av * nu;
        v.dot(&(&hinv * &v))
    };
    let inner = |nu: f64| {
        let m = norm_sq(nu);
        let f = |lambda: f64| m / (2.0 * lambda) + lambda * delta - nu * b;
        let lambda = grid_then_polish(&f, (m / (2.0 * delta)).sqrt().max(1e-8) * 0.25);
        (lambda.max(1e-300), f(lambda.max(1e-300)))
    };
    let outer = |nu: f64| inner(nu).1;
    let scale = (gv.norm() / av.norm().max(1e-300)).max(1e-6);
    let nu = grid_then_polish(&outer, scale);
    let (lambda, _) = inner(nu);
    let x = (&hinv * (&gv - &av * nu)) / lambda;
    Some(x.as_slice().to_vec())
}

/// L2 projection of `p` onto `{x : A x <= c}` (two dimensions) by a fine grid
/// over a box, refined around the best feasible grid point and polished by
/// solving the nearly-active equality-constrained projections.
pub fn grid_projection_2d(p: [f64; 2], normals: &[[f64; 2]], rhs: &[f64]) -> [f64; 2] {
    let feasible = |x: [f64; 2]| {
        normals
            .iter()
            .zip(rhs)
            .all(|(n, c)| n[0] * x[0] + n[1] * x[1] <= *c)
    };
    let dist = |x: [f64; 2]| (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
    let mut center = p;
    let mut half = 4.0 * (1.0 + p[0].abs().max(p[1].abs()));
    let steps = 200;
    let mut best: Option<[f64; 2]> = None;
    for _ in 0..80 {
        let mut local: Option<([f64; 2], f64)> = None;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = [
                    center[0] - half + 2.0 * half * i as f64 / steps as f64,
                    center[1] - half + 2.0 * half * j as f64 / steps as f64,
                ];
                if feasible(x) {
                    let d = dist(x);
                    if local.is_none_or(|(_, bd)| d < bd) {
                        local = Some((x, d));
                    }
                }
            }
        }
        let (x, d) = local.expect("oracle: no feasible grid point");
        best = Some(x);
        center = x;
        // The best grid point can sit up to about sqrt(2 d* s) from the true
        // projection, so the next box keeps that radius plus a few cells.
        let cell = 2.0 * half / steps as f64;
        let next = 4.0 * cell + 3.0 * (d.sqrt() * cell).sqrt();
        if next >= 0.99 * half {
            break;
        }
        half = next;
    }
    let grid = best.expect("oracle: grid search produced no point");
    polish_2d(p, grid, normals, rhs, 10.0 * half)
}

/// Polish a grid minimiser: solve the equality-constrained projection for
/// every subset of at most two constraints that are nearly active at the grid
/// point and keep the closest feasible candidate.
fn polish_2d(p: [f64; 2], grid: [f64; 2], normals: &[[f64; 2]], rhs: &[f64], radius: f64) -> [f64; 2] {
    let slack_tol = 1e-12;
    let feasible = |x: [f64; 2]| {
        normals
            .iter()
            .zip(rhs)
            .all(|(n, c)| n[0] * x[0] + n[1] * x[1] <= *c + slack_tol * (1.0 + c.abs()))
    };
    let dist = |x: [f64; 2]| (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
    let near: Vec<usize> = (0..normals.len())
        .filter(|&i| {
            let n = normals[i];
            let nn = (n[0] * n[0] + n[1] * n[1]).sqrt();
            (rhs[i] - n[0] * grid[0] - n[1] * grid[1]) / nn <= radius
        })
        .collect();
    let mut candidates = vec![grid];
    for &i in &near {
        let n = normals[i];
        let t = (n[0] * p[0] + n[1] * p[1] - rhs[i]) / (n[0] * n[0] + n[1] * n[1]);
        candidates.push([p[0] - t * n[0], p[1] - t * n[1]]);
        for &j in near.iter().filter(|&&j| j > i) {
            let m = normals[j];
            let det = n[0] * m[1] - n[1] * m[0];
            if det.abs() > 1e-14 {
                candidates.push([(rhs[i] * m[1] - n[1] * rhs[j]) / det, (n[0] * rhs[j] - rhs[i] * m[0]) / det]);
            }
        }
    }
    candidates
        .into_iter()
        .filter(|x| feasible(*x))
        .min_by(|x, y| dist(*x).total_cmp(&dist(*y)))
        .unwrap_or(grid)
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + step;
            let hi = f(&y);
            y[i] = x[i] - step;
            let lo = f(&y);
            y[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Central finite-difference Hessian (row-major, symmetrised).
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hmat = DMatrix::<f64>::zeros(n, n);
    let mut y = x.to_vec();
    let f0 = f(x);
    for i in 0..n {
        for j in i..n {
            let val = if i == j {
                y[i] = x[i] + step;
                let hi = f(&y);
                y[i] = x[i] - step;
                let lo = f(&y);
                y[i] = x[i];
                (hi - 2.0 * f0 + lo) / (step * step)
            } else {
                let mut eval = |si: f64, sj: f64| {
                    y[i] = x[i] + si * step;
                    y[j] = x[j] + sj * step;
                    let v = f(&y);
                    y[i] = x[i];
                    y[j] = x[j];
                    v
                };
                (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * step * step)
            };
            hmat[(i, j)] = val;
            hmat[(j, i)] = val;
        }
    }
    hmat
}

/// Exact discounted quantities of a tabular CMDP under a stochastic policy,
/// computed with dense `nalgebra` solves.
#[derive(Clone, Debug)]
pub struct TabularOracle {
    pub j_r: f64,
    pub j_c: f64,
    pub v_r: Vec<f64>,
    pub v_c: Vec<f64>,
    pub d: Vec<f64>,
    pub adv_r: Vec<Vec<f64>>,
    pub adv_c: Vec<Vec<f64>>,
}

/// `transition[s][a][s']`, `reward[s][a]`, `cost[s][a]`, `pi[s][a]`.
pub fn tabular_oracle(
    transition: &[Vec<Vec<f64>>],
    reward: &[Vec<f64>],
    cost: &[Vec<f64>],
    mu: &[f64],
    gamma: f64,
    pi: &[Vec<f64>],
) -> TabularOracle {
    let n = mu.len();
    let na = pi[0].len();
    let p = DMatrix::from_fn(n, n, |s, t| (0..na).map(|a| pi[s][a] * transition[s][a][t]).sum());
    let m = DMatrix::<f64>::identity(n, n) - &p * gamma;
    let r = DVector::from_fn(n, |s, _| (0..na).map(|a| pi[s][a] * reward[s][a]).sum());
    let c = DVector::from_fn(n, |s, _| (0..na).map(|a| pi[s][a] * cost[s][a]).sum());
    let lu = m.clone().lu();
    let v_r = lu.solve(&r).expect("oracle: singular evaluation system");
    let v_c = lu.solve(&c).expect("oracle: singular evaluation system");
    let mu_v = dv(mu);
    let d = m.transpose().lu().solve(&mu_v).expect("oracle: singular occupancy system") * (1.0 - gamma);
    let adv = |x: &[Vec<f64>], v: &DVector<f64>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let next: f64 = (0..n).map(|t| transition[s][a][t] * v[t]).sum();
                        x[s][a] + gamma * next - v[s]
                    })
                    .collect()
            })
            .collect()
    };
    TabularOracle {
        j_r: mu_v.dot(&v_r),
        j_c: mu_v.dot(&v_c),
        adv_r: adv(reward, &v_r),
        adv_c: adv(cost, &v_c),
        v_r: v_r.as_slice().to_vec(),
        v_c: v_c.as_slice().to_vec(),
        d: d.as_slice().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trust_region_qp_is_tight() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let d = trust_region_qp(&[1.0, 2.0], &h, 0.01);
        let q = 0.5 * (2.0 * d[0] * d[0] + d[1] * d[1]);
        assert!((q - 0.01).abs() < 1e-12);
        assert!((d[0] / d[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn halfspace_projection_hyperplane() {
        let l = DMatrix::identity(2, 2);
        let x = halfspace_projection(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 0.0, &l);
        assert!(x[0].abs() < 1e-14 && x[1].abs() < 1e-14);
        let x = halfspace_projection(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0], -10.0, &l);
        assert_eq!(x, vec![1.0, 0.0]);
    }

    #[test]
    fn grid_projection_onto_quadrant() {
        let x = grid_projection_2d([1.0, 1.0], &[[1.0, 0.0], [0.0, 1.0]], &[0.0, 0.0]);
        assert!(x[0].abs() < 1e-9 && x[1].abs() < 1e-9);
    }

    #[test]
    fn cpo_dual_recovers_trust_region_step_when_slack() {
        let h = DMatrix::identity(2, 2);
        let x = cpo_dual_step(&[1.0, 0.0], &[0.0, 1.0], -10.0, &h, 0.5).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-7 && x[1].abs() < 1e-7);
    }

    #[test]
    fn geometric_series_evaluation() {
        let o = tabular_oracle(&[vec![vec![1.0]]], &[vec![1.0]], &[vec![0.0]], &[1.0], 0.9, &[vec![1.0]]);
        assert!((o.j_r - 10.0).abs() < 1e-12);
        assert!((o.d[0] - 1.0).abs() < 1e-12);
    }
}
