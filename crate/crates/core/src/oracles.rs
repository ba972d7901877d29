//! Independent reference implementations used by tests.
//!
//! Everything here recomputes a quantity the production code also computes,
//! by a deliberately different route: direct per-entry evaluation, explicit
//! scalar loops, exhaustive enumeration, or finite differences. Production
//! code must never call into this module.

use ndarray::Array2;

/// Sinusoid entry pair (sin, cos) at position `p`, frequency index `i`,
/// evaluated via exp/ln rather than powf.
pub fn sinusoid_direct(p: usize, i: usize, d: usize) -> (f64, f64) {
    let exponent = -(2.0 * i as f64 / d as f64) * 10000f64.ln();
    let phase = p as f64 * exponent.exp();
    (phase.sin(), phase.cos())
}

/// Single-query attention by scalar loops: softmax(q·Kᵀ/divisor)·V, one
/// output row per query row. `causal` masks keys with index > query index.
pub fn attention_loop(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    divisor: f64,
    causal: bool,
) -> Array2<f64> {
    let (t_q, d) = q.dim();
    let t_k = k.nrows();
    let d_v = v.ncols();
    let mut out = Array2::zeros((t_q, d_v));
    for i in 0..t_q {
        let limit = if causal { i + 1 } else { t_k };
        let mut scores = vec![0.0; limit];
        for (j, score) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[[i, c]] * k[[j, c]];
            }
            *score = dot / divisor;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= z;
        }
        for (j, w) in weights.iter().enumerate() {
            for c in 0..d_v {
                out[[i, c]] += w * v[[j, c]];
            }
        }
    }
    out
}

/// Central finite difference of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Best total credit over every order-preserving one-to-one matching of
/// `n_pred` predicted against `n_gt` reference items, by exhaustive
/// recursion. Exponential; callers keep both sides small.
pub fn best_matching_exhaustive(
    n_pred: usize,
    n_gt: usize,
    credit: &dyn Fn(usize, usize) -> f64,
) -> f64 {
    fn go(i: usize, j: usize, n_pred: usize, n_gt: usize, credit: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == n_gt || j == n_pred {
            return 0.0;
        }
        let skip_gt = go(i + 1, j, n_pred, n_gt, credit);
        let skip_pred = go(i, j + 1, n_pred, n_gt, credit);
        let pair = credit(j, i) + go(i + 1, j + 1, n_pred, n_gt, credit);
        skip_gt.max(skip_pred).max(pair)
    }
    go(0, 0, n_pred, n_gt, credit)
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}
