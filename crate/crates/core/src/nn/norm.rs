//! Normalization layers. Both are deterministic in eval mode (no running
//! statistics): LayerNorm normalizes each sequence row over features,
//! ChannelNorm normalizes each spatial position over channels.

use super::{Param, ParamView, Params};
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis, Ix1};

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar> {
    pub g: Param<S, Ix1>,
    pub b: Param<S, Ix1>,
    eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            g: Param::new(Array1::ones(d)),
            b: Param::new(Array1::zeros(d)),
            eps: 1e-5,
        }
    }

    fn xhat(&self, x: &Array2<S>) -> Array2<S> {
        let mean = x.mean_axis(Axis(1)).expect("nonempty rows");
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("rows");
        let sigma = var.mapv(|v| (v + s::<S>(self.eps)).sqrt());
        &centered / &sigma.insert_axis(Axis(1))
    }

    /// x: T × D.
    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        self.xhat(x) * &self.g.w + &self.b.w
    }

    pub fn forward_row(&self, x: &ArrayView1<S>) -> Array1<S> {
        let n = s::<S>(x.len() as f64);
        let mean = x.sum() / n;
        let var = x.fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let sigma = (var + s::<S>(self.eps)).sqrt();
        let xhat = x.mapv(|v| (v - mean) / sigma);
        xhat * &self.g.w + &self.b.w
    }

    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        let mean = x.mean_axis(Axis(1)).expect("rows").insert_axis(Axis(1));
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("rows");
        let sigma = var
            .mapv(|v| (v + s::<S>(self.eps)).sqrt())
            .insert_axis(Axis(1));
        let xhat = &centered / &sigma;

        self.g.g += &(dy * &xhat).sum_axis(Axis(0));
        self.b.g += &dy.sum_axis(Axis(0));

        let dxhat = dy * &self.g.w;
        let m1 = dxhat.mean_axis(Axis(1)).expect("rows").insert_axis(Axis(1));
        let m2 = (&dxhat * &xhat)
            .mean_axis(Axis(1))
            .expect("rows")
            .insert_axis(Axis(1));
        (dxhat - m1 - xhat * m2) / &sigma
    }
}

impl<S: Scalar> Params<S> for LayerNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.g.visit(format!("{prefix}/g"), f);
        self.b.visit(format!("{prefix}/b"), f);
    }
}

/// Per-position channel normalization for C×H×W maps, with per-channel
/// scale/shift. Plays batch-norm's role in the backbone without any
/// batch-coupled state.
#[derive(Debug, Clone)]
pub struct ChannelNorm<S: Scalar> {
    pub g: Param<S, Ix1>,
    pub b: Param<S, Ix1>,
    eps: f64,
}

impl<S: Scalar> ChannelNorm<S> {
    pub fn new(c: usize) -> Self {
        ChannelNorm {
            g: Param::new(Array1::ones(c)),
            b: Param::new(Array1::zeros(c)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<S>) -> Array3<S> {
        let (c, h, w) = x.dim();
        let xm = x.to_shape((c, h * w)).expect("contiguous");
        let (xhat, _) = col_stats(&xm.to_owned(), self.eps);
        let y = xhat * &self.g.w.view().insert_axis(Axis(1))
            + &self.b.w.view().insert_axis(Axis(1));
        y.into_shape_with_order((c, h, w)).expect("shape")
    }

    pub fn backward(&mut self, x: &Array3<S>, dy: &Array3<S>) -> Array3<S> {
        let (c, h, w) = x.dim();
        let xm = x.to_shape((c, h * w)).expect("contiguous").to_owned();
        let dym = dy.to_shape((c, h * w)).expect("contiguous").to_owned();
        let (xhat, sigma) = col_stats(&xm, self.eps);

        self.g.g += &(&dym * &xhat).sum_axis(Axis(1));
        self.b.g += &dym.sum_axis(Axis(1));

        let dxhat = &dym * &self.g.w.view().insert_axis(Axis(1));
        let m1 = dxhat.mean_axis(Axis(0)).expect("cols");
        let m2 = (&dxhat * &xhat).mean_axis(Axis(0)).expect("cols");
        let dx = (dxhat - m1 - xhat * m2) / &sigma;
        dx.into_shape_with_order((c, h, w)).expect("shape")
    }
}

/// Column-wise x̂ and σ of a (C, n) view.
fn col_stats<S: Scalar>(xm: &Array2<S>, eps: f64) -> (Array2<S>, Array1<S>) {
    let mean = xm.mean_axis(Axis(0)).expect("nonempty columns");
    let centered = xm - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("cols");
    let sigma = var.mapv(|v| (v + s::<S>(eps)).sqrt());
    let xhat = centered / &sigma;
    (xhat, sigma)
}

impl<S: Scalar> Params<S> for ChannelNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.g.visit(format!("{prefix}/g"), f);
        self.b.visit(format!("{prefix}/b"), f);
    }
}
