//! Hand-written neural-net primitives with explicit forward/backward passes.
//!
//! Every layer owns its parameters and a same-shaped gradient accumulator;
//! `backward` adds into the accumulator so batches are plain loops. There is
//! no autodiff tape: call sites keep whatever the backward pass needs (the
//! input, or a cache struct returned by forward). All layers are per-sample;
//! none carry a batch dimension.

mod attention;
mod conv;
mod linear;
mod norm;

pub use attention::{AttnCache, AttnMask, AttnScale, KvCache, MultiHeadAttention};
pub use conv::{col2im, im2col, Conv2d, Conv2dCache, MaxPool2d, PoolCache};
pub use linear::Linear;
pub use norm::{ChannelNorm, LayerNorm};

use crate::scalar::{s, Scalar};
use ndarray::{Array, Array2, Dimension, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A parameter tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar, D: Dimension> {
    pub w: Array<S, D>,
    pub g: Array<S, D>,
}

impl<S: Scalar, D: Dimension> Param<S, D> {
    pub fn new(w: Array<S, D>) -> Self {
        let g = Array::zeros(w.raw_dim());
        Param { w, g }
    }

    pub fn visit(&mut self, name: String, f: &mut dyn FnMut(ParamView<'_, S>)) {
        let shape = self.w.shape().to_vec();
        f(ParamView {
            name,
            shape,
            value: self.w.as_slice_mut().expect("params are contiguous"),
            grad: self.g.as_slice_mut().expect("grads are contiguous"),
        })
    }
}

/// One flattened parameter tensor, as seen by the optimizer, the checkpoint
/// writer and the gradient-check harness.
pub struct ParamView<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [S],
    pub grad: &'a mut [S],
}

/// Anything holding parameters exposes them through a named visitor.
/// Names are `/`-separated paths; visiting order is fixed by construction,
/// which makes checkpoints and optimizer state deterministic.
pub trait Params<S: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>));
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn fill<S: Scalar>(n: usize, mut draw: impl FnMut() -> f64) -> Vec<S> {
    (0..n).map(|_| s(draw())).collect()
}

/// He fan-in normal, for weights feeding ReLUs.
pub fn he_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<S> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Array2::from_shape_vec(shape, fill(shape.0 * shape.1, || dist.sample(rng)))
        .expect("shape matches")
}

/// Xavier uniform, for linear maps inside the transformer.
pub fn xavier_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<S> {
    let limit = (6.0 / (shape.0 + shape.1) as f64).sqrt();
    Array2::from_shape_vec(
        shape,
        fill(shape.0 * shape.1, || rng.random_range(-limit..limit)),
    )
    .expect("shape matches")
}

/// Plain normal draw, for embeddings.
pub fn normal2<S: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_vec(shape, fill(shape.0 * shape.1, || dist.sample(rng)))
        .expect("shape matches")
}

// ---------------------------------------------------------------------------
// Activations and elementwise ops
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar, D: Dimension>(x: &Array<S, D>) -> Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

/// Needs the forward *input*; the subgradient at 0 is 0.
pub fn relu_backward<S: Scalar, D: Dimension>(x: &Array<S, D>, dy: &Array<S, D>) -> Array<S, D> {
    Zip::from(x)
        .and(dy)
        .map_collect(|&x, &d| if x > S::zero() { d } else { S::zero() })
}

/// Row-wise softmax, stable under large scores and `-inf` masking.
pub fn softmax_rows<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Jacobian-vector product of row-wise softmax given its output `y`:
/// dx = y ⊙ (dy − rowsum(dy ⊙ y)).
pub fn softmax_rows_backward<S: Scalar>(y: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy * y;
    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot = drow.sum();
        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| {
            *d = *d - y * dot;
        });
    }
    dx
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept entries are scaled by 1/(1−p) so evaluation is the
/// identity. `p = 0` draws nothing from the rng.
pub fn dropout<S: Scalar>(
    x: &Array2<S>,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<S>, Array2<S>) {
    if p <= 0.0 {
        return (x.clone(), Array2::ones(x.raw_dim()));
    }
    assert!(p < 1.0, "dropout probability must be < 1");
    let keep = s::<S>(1.0 / (1.0 - p));
    let mask = Array2::from_shape_vec(
        x.raw_dim(),
        (0..x.len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect(),
    )
    .expect("shape matches");
    (x * &mask, mask)
}

pub fn dropout_backward<S: Scalar>(mask: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    dy * mask
}

/// Global L2 norm across every gradient in the visitor.
pub fn grad_norm<S: Scalar>(model: &mut dyn Params<S>) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |p| {
        sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    });
    sq.sqrt()
}

pub fn zero_grads<S: Scalar>(model: &mut dyn Params<S>) {
    model.visit("", &mut |p| p.grad.fill(S::zero()));
}

/// Sum of |entries| of a 1-sample projection loss, used by gradient checks.
pub fn weighted_sum<S: Scalar>(y: &Array2<S>, proj: &Array2<S>) -> S {
    (y * proj).sum()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::rng::{label, stream};

    pub fn rng(seed: u64) -> ChaCha8Rng {
        stream(seed, &[label("nn-test")])
    }

    pub fn randn2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        normal2(rng, shape, 1.0)
    }

    pub fn randn3(
        rng: &mut ChaCha8Rng,
        shape: (usize, usize, usize),
    ) -> ndarray::Array3<f64> {
        let dist = Normal::new(0.0, 1.0).unwrap();
        ndarray::Array3::from_shape_vec(
            shape,
            (0..shape.0 * shape.1 * shape.2)
                .map(|_| dist.sample(rng))
                .collect(),
        )
        .unwrap()
    }

    /// Central finite difference: `f` re-evaluates the loss with one
    /// coordinate set to the given value.
    pub fn numeric_grad_at(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
        let h = 1e-5;
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel <= 1e-4 || (analytic - numeric).abs() <= 1e-8,
            "{what}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
        );
    }
}
