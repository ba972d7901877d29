//! Positional encodings: shared sinusoid table, adaptive 2D encoding, and
//! the 1D fallback applied after flattening.
//!
//! Feature maps keep the channel-first (D, H, W) layout used by the conv
//! stack. `flatten` converts to the (H·W, D) sequence layout expected by the
//! encoder, scanning rows left to right, top to bottom: s = h·W + w.

use ndarray::{s, Array1, Array2, Array3, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal2, Param, ParamView, Params};
use crate::scalar::{s as sc, Scalar};

/// Which positional encoding the model applies between the backbone and the
/// encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosEnc {
    #[serde(rename = "a2dpe")]
    A2dpe,
    #[serde(rename = "1d")]
    OneD,
}

/// Sinusoid table of shape (length, d): row p holds
/// sin(p/10000^(2i/d)) at column 2i and cos of the same phase at 2i+1.
pub fn sinusoid_table<S: Scalar>(length: usize, d: usize) -> Result<Array2<S>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoid table needs a positive even dimension, got {d}"
        )));
    }
    let mut table = Array2::zeros((length, d));
    for p in 0..length {
        for i in 0..d / 2 {
            let phase = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[[p, 2 * i]] = sc(phase.sin());
            table[[p, 2 * i + 1]] = sc(phase.cos());
        }
    }
    Ok(table)
}

/// Adds the sinusoid table to a (T, D) sequence. The gradient of this op is
/// the identity, so callers pass gradients straight through.
pub fn pe_1d<S: Scalar>(seq: &Array2<S>) -> Result<Array2<S>> {
    let (t, d) = seq.dim();
    Ok(seq + &sinusoid_table::<S>(t, d)?)
}

/// (D, H, W) feature map to (H·W, D) sequence, s = h·W + w.
pub fn flatten<S: Scalar>(f: &Array3<S>) -> Array2<S> {
    let (d, h, w) = f.dim();
    let hwd = f.view().permuted_axes([1, 2, 0]);
    let contiguous = hwd.as_standard_layout().into_owned();
    contiguous
        .into_shape_with_order((h * w, d))
        .expect("h*w*d elements reshape to (h*w, d)")
}

/// Inverse of `flatten`; also the gradient of `flatten` when applied to the
/// sequence gradient.
pub fn unflatten<S: Scalar>(seq: &Array2<S>, h: usize, w: usize) -> Result<Array3<S>> {
    let (hw, d) = seq.dim();
    if hw != h * w {
        return Err(Error::shape(format!(
            "cannot unflatten {hw} rows into {h}x{w} grid"
        )));
    }
    let grid = seq
        .view()
        .into_shape_with_order((h, w, d))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(grid.permuted_axes([2, 0, 1]).as_standard_layout().into_owned())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adaptive 2D positional encoding. Two tiny gating networks map the global
/// mean feature g to scalar scales for the row and column sinusoid tables:
///
///   alpha = sigmoid(relu(g·W1_h)·W2_h)
///   out[d,h,w] = in[d,h,w] + alpha·T_h[h,d] + beta·T_w[w,d]
///
/// The gates share no parameters; neither path has biases.
#[derive(Debug, Clone)]
pub struct A2dpe<S: Scalar> {
    pub w1_h: Param<S, Ix2>,
    pub w2_h: Param<S, Ix2>,
    pub w1_w: Param<S, Ix2>,
    pub w2_w: Param<S, Ix2>,
}

/// Everything `A2dpe::backward` needs: the input (for dg), the gate
/// intermediates, and the two tables.
pub struct A2dpeCache<S: Scalar> {
    x: Array3<S>,
    g: Array1<S>,
    hidden_h: Array1<S>,
    hidden_w: Array1<S>,
    pub alpha: S,
    pub beta: S,
    table_h: Array2<S>,
    table_w: Array2<S>,
}

impl<S: Scalar> A2dpe<S> {
    pub fn new(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        A2dpe {
            w1_h: Param::new(normal2(rng, (d, d), std)),
            w2_h: Param::new(normal2(rng, (d, 1), std)),
            w1_w: Param::new(normal2(rng, (d, d), std)),
            w2_w: Param::new(normal2(rng, (d, 1), std)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1_h.w.nrows()
    }

    fn gate(&self, g: &Array1<S>, w1: &Array2<S>, w2: &Array2<S>) -> (Array1<S>, S) {
        let pre = g.dot(w1);
        let hidden = pre.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let logit = hidden.dot(&w2.index_axis(Axis(1), 0));
        (hidden, sc(sigmoid(logit.as_f64())))
    }

    /// Gate scales for an input, without building the output map.
    pub fn scales(&self, x: &Array3<S>) -> (S, S) {
        let g = spatial_mean(x);
        let (_, alpha) = self.gate(&g, &self.w1_h.w, &self.w2_h.w);
        let (_, beta) = self.gate(&g, &self.w1_w.w, &self.w2_w.w);
        (alpha, beta)
    }

    pub fn forward(&self, x: &Array3<S>) -> Result<(Array3<S>, A2dpeCache<S>)> {
        let (d, h, w) = x.dim();
        if d != self.dim() {
            return Err(Error::shape(format!(
                "a2dpe built for {} channels, input has {d}",
                self.dim()
            )));
        }
        let g = spatial_mean(x);
        let (hidden_h, alpha) = self.gate(&g, &self.w1_h.w, &self.w2_h.w);
        let (hidden_w, beta) = self.gate(&g, &self.w1_w.w, &self.w2_w.w);
        let table_h = sinusoid_table::<S>(h, d)?;
        let table_w = sinusoid_table::<S>(w, d)?;
        let y = apply_scales(x, alpha, &table_h, beta, &table_w);
        Ok((
            y,
            A2dpeCache { x: x.clone(), g, hidden_h, hidden_w, alpha, beta, table_h, table_w },
        ))
    }

    /// Applies caller-supplied scales instead of the learned gates. Test hook
    /// for pinning alpha and beta to exact values.
    pub fn forward_with_scales(x: &Array3<S>, alpha: S, beta: S) -> Result<Array3<S>> {
        let (d, h, w) = x.dim();
        let table_h = sinusoid_table::<S>(h, d)?;
        let table_w = sinusoid_table::<S>(w, d)?;
        Ok(apply_scales(x, alpha, &table_h, beta, &table_w))
    }

    /// Accumulates parameter gradients and returns dx. The input reaches the
    /// output both directly and through the spatial mean g, so dx is dy plus
    /// the gate gradient spread uniformly over positions.
    pub fn backward(&mut self, cache: &A2dpeCache<S>, dy: &Array3<S>) -> Array3<S> {
        let (d, h, w) = cache.x.dim();
        let mut d_alpha = S::zero();
        let mut d_beta = S::zero();
        for hh in 0..h {
            for ww in 0..w {
                for dd in 0..d {
                    let dv = dy[[dd, hh, ww]];
                    d_alpha += dv * cache.table_h[[hh, dd]];
                    d_beta += dv * cache.table_w[[ww, dd]];
                }
            }
        }
        let dg_h = gate_backward(
            &cache.g,
            &cache.hidden_h,
            cache.alpha,
            d_alpha,
            &mut self.w1_h,
            &mut self.w2_h,
        );
        let dg_w = gate_backward(
            &cache.g,
            &cache.hidden_w,
            cache.beta,
            d_beta,
            &mut self.w1_w,
            &mut self.w2_w,
        );
        let dg = dg_h + dg_w;
        let inv = sc::<S>(1.0 / (h * w) as f64);
        let mut dx = dy.clone();
        for dd in 0..d {
            let spread = dg[dd] * inv;
            dx.slice_mut(s![dd, .., ..]).mapv_inplace(|v| v + spread);
        }
        dx
    }
}

fn spatial_mean<S: Scalar>(x: &Array3<S>) -> Array1<S> {
    let (_, h, w) = x.dim();
    let inv = sc::<S>(1.0 / (h * w) as f64);
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) * inv
}

fn apply_scales<S: Scalar>(
    x: &Array3<S>,
    alpha: S,
    table_h: &Array2<S>,
    beta: S,
    table_w: &Array2<S>,
) -> Array3<S> {
    let (d, h, w) = x.dim();
    let mut y = x.clone();
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                y[[dd, hh, ww]] += alpha * table_h[[hh, dd]] + beta * table_w[[ww, dd]];
            }
        }
    }
    y
}

/// Backward through one gate: d_scale arrives for sigmoid(hidden·w2) with
/// hidden = relu(g·w1). Accumulates into w1/w2 grads, returns dg.
fn gate_backward<S: Scalar>(
    g: &Array1<S>,
    hidden: &Array1<S>,
    scale: S,
    d_scale: S,
    w1: &mut Param<S, Ix2>,
    w2: &mut Param<S, Ix2>,
) -> Array1<S> {
    let d_logit = d_scale * scale * (S::one() - scale);
    {
        let mut w2_col = w2.g.index_axis_mut(Axis(1), 0);
        w2_col += &hidden.mapv(|v| v * d_logit);
    }
    let d_hidden = w2.w.index_axis(Axis(1), 0).mapv(|v| v * d_logit);
    let d_pre: Array1<S> = hidden
        .iter()
        .zip(d_hidden.iter())
        .map(|(&hv, &dv)| if hv > S::zero() { dv } else { S::zero() })
        .collect();
    let g_col = g.view().insert_axis(Axis(1));
    let d_pre_row = d_pre.view().insert_axis(Axis(0));
    w1.g += &g_col.dot(&d_pre_row);
    w1.w.dot(&d_pre)
}

impl<S: Scalar> Params<S> for A2dpe<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<S>)) {
        self.w1_h.visit(format!("{prefix}/w1_h"), f);
        self.w2_h.visit(format!("{prefix}/w2_h"), f);
        self.w1_w.visit(format!("{prefix}/w1_w"), f);
        self.w2_w.visit(format!("{prefix}/w2_w"), f);
    }
}
