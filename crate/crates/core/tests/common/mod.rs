//! Independent reference computations shared by the test suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pepsi::model_spec::Observation;
use pepsi::{eval_score, ModelSpec};

/// Bisection on a decreasing function over an open interval: returns the
/// point where it changes sign, to machine precision.
pub fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-dimensional oracle: root of `sum g / (1 + l g)` on the feasible interval.
pub fn oracle_1d(g: &[f64]) -> f64 {
    let lo = g
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -1.0 / v)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = g
        .iter()
        .filter(|&&v| v < 0.0)
        .map(|&v| -1.0 / v)
        .fold(f64::INFINITY, f64::min);
    bisect(lo, hi, |l| g.iter().map(|&v| v / (1.0 + l * v)).sum())
}

/// Two-dimensional oracle. The feasible polygon's extent in the first
/// coordinate comes from enumerating constraint intersections; for each
/// first coordinate the second is found by bisection of its partial
/// derivative, and the profile derivative (envelope theorem) is bisected in
/// the first coordinate.
pub fn oracle_2d(g: &[[f64; 2]]) -> [f64; 2] {
    let feasible = |l: [f64; 2]| g.iter().all(|r| 1.0 + l[0] * r[0] + l[1] * r[1] >= -1e-12);
    let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            let det = g[i][0] * g[j][1] - g[i][1] * g[j][0];
            if det.abs() < 1e-14 {
                continue;
            }
            // Solve l' g_i = -1, l' g_j = -1.
            let l0 = (-g[j][1] + g[i][1]) / det;
            let l1 = (-g[i][0] + g[j][0]) / det;
            if feasible([l0, l1]) {
                a = a.min(l0);
                b = b.max(l0);
            }
        }
    }
    assert!(a < b, "feasible region must be bounded with interior");
    let inner = |l0: f64| -> f64 {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for r in g {
            let c = 1.0 + l0 * r[0];
            if r[1] > 0.0 {
                lo = lo.max(-c / r[1]);
            } else if r[1] < 0.0 {
                hi = hi.min(-c / r[1]);
            }
        }
        bisect(lo, hi, |l1| {
            g.iter().map(|r| r[1] / (1.0 + l0 * r[0] + l1 * r[1])).sum()
        })
    };
    let l0 = bisect(a, b, |l0| {
        let l1 = inner(l0);
        g.iter().map(|r| r[0] / (1.0 + l0 * r[0] + l1 * r[1])).sum()
    });
    [l0, inner(l0)]
}

/// Zero strictly inside the convex hull of the rows (angular gaps below pi).
pub fn zero_inside_hull_2d(g: &[[f64; 2]]) -> bool {
    let mut ang: Vec<f64> = g.iter().map(|r| r[1].atan2(r[0])).collect();
    ang.sort_by(|a, b| a.total_cmp(b));
    let mut max_gap = ang[0] + 2.0 * std::f64::consts::PI - ang[ang.len() - 1];
    for w in ang.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    max_gap < std::f64::consts::PI - 0.2
}

pub fn mean_score(
    spec: &ModelSpec,
    params: &DVector<f64>,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
) -> DVector<f64> {
    let n = y.len();
    let mut total = DVector::zeros(spec.dim_g());
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        total += eval_score(spec, params, Observation { y: y[i], x: &row }).unwrap();
    }
    total / n as f64
}

pub fn central_difference(
    spec: &ModelSpec,
    params: &DVector<f64>,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(spec.dim_g(), params.len());
    for k in 0..params.len() {
        let mut up = params.clone();
        let mut down = params.clone();
        up[k] += h;
        down[k] -= h;
        let d = (mean_score(spec, &up, y, x) - mean_score(spec, &down, y, x)) / (2.0 * h);
        jac.set_column(k, &d);
    }
    jac
}
