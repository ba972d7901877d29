//! Affine map y = xW + b over rows of a sequence.

use super::{xavier_uniform, Param, ParamView, Params};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    /// in × out.
    pub w: Param<S, Ix2>,
    pub b: Param<S, Ix1>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(xavier_uniform(rng, (d_in, d_out))),
            b: Param::new(Array1::zeros(d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.w.ncols()
    }

    /// x: T × in → T × out.
    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.w.w) + &self.b.w
    }

    /// Single row, for incremental decoding.
    pub fn forward_row(&self, x: &ndarray::ArrayView1<S>) -> Array1<S> {
        x.dot(&self.w.w) + &self.b.w
    }

    /// Accumulates dW += xᵀ·dy, db += Σ dy rows; returns dx = dy·Wᵀ.
    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        self.w.g += &x.t().dot(dy);
        self.b.g += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.w.t())
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.w.visit(format!("{prefix}/w"), f);
        self.b.visit(format!("{prefix}/b"), f);
    }
}
