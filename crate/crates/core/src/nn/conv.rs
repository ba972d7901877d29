//! 2D convolution via im2col + matmul, and max pooling.

use super::{he_normal, Param, ParamView, Params};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// Patch matrix: rows index (channel, ky, kx), columns index output pixels
/// in row-major (oy, ox) order. Out-of-image taps read as zero.
pub fn im2col<S: Scalar>(x: &Array3<S>, k: usize, stride: usize, pad: usize) -> Array2<S> {
    let (c, h, w) = x.dim();
    let (h_out, w_out) = out_hw((h, w), k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, h_out * w_out));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w_out + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch-space values back to image
/// space, so ⟨im2col(x), C⟩ = ⟨x, col2im(C)⟩.
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    in_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let (c, h, w) = in_dim;
    let (h_out, w_out) = out_hw((h, w), k, stride, pad);
    let mut x = Array3::zeros(in_dim);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] =
                            x[[ci, iy as usize, ix as usize]] + cols[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    x
}

fn out_hw(hw: (usize, usize), k: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (hw.0 + 2 * pad - k) / stride + 1,
        (hw.1 + 2 * pad - k) / stride + 1,
    )
}

#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    /// c_out × (c_in·k·k): one flattened filter per row.
    pub w: Param<S, Ix2>,
    pub b: Param<S, Ix1>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<S: Scalar> {
    cols: Array2<S>,
    in_dim: (usize, usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            w: Param::new(he_normal(rng, (c_out, fan_in), fan_in)),
            b: Param::new(Array1::zeros(c_out)),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_dim(&self, in_dim: (usize, usize, usize)) -> (usize, usize, usize) {
        let (h, w) = out_hw((in_dim.1, in_dim.2), self.k, self.stride, self.pad);
        (self.c_out, h, w)
    }

    pub fn forward(&self, x: &Array3<S>) -> (Array3<S>, Conv2dCache<S>) {
        let in_dim = x.dim();
        assert_eq!(in_dim.0, self.c_in, "channel mismatch");
        let (_, h_out, w_out) = self.out_dim(in_dim);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let mut y = self.w.w.dot(&cols);
        for (mut row, &b) in y.outer_iter_mut().zip(self.b.w.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y
            .into_shape_with_order((self.c_out, h_out, w_out))
            .expect("conv output shape");
        (y, Conv2dCache { cols, in_dim })
    }

    pub fn backward(&mut self, cache: &Conv2dCache<S>, dy: &Array3<S>) -> Array3<S> {
        let (c_out, h_out, w_out) = dy.dim();
        assert_eq!(c_out, self.c_out);
        let dy_mat = dy
            .to_shape((c_out, h_out * w_out))
            .expect("contiguous grad");
        self.w.g += &dy_mat.dot(&cache.cols.t());
        self.b.g += &dy_mat.sum_axis(Axis(1));
        let dcols = self.w.w.t().dot(&dy_mat);
        col2im(&dcols, cache.in_dim, self.k, self.stride, self.pad)
    }
}

impl<S: Scalar> Params<S> for Conv2d<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.w.visit(format!("{prefix}/w"), f);
        self.b.visit(format!("{prefix}/b"), f);
    }
}

/// Parameter-free max pooling; out-of-image taps never win.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct PoolCache {
    /// Winning input (y, x) per output element, flattened in (c, oy, ox) order.
    arg: Vec<(u32, u32)>,
    in_dim: (usize, usize, usize),
    out_dim: (usize, usize, usize),
}

impl MaxPool2d {
    pub fn forward<S: Scalar>(&self, x: &Array3<S>) -> (Array3<S>, PoolCache) {
        let (c, h, w) = x.dim();
        let (h_out, w_out) = out_hw((h, w), self.k, self.stride, self.pad);
        let mut y = Array3::zeros((c, h_out, w_out));
        let mut arg = Vec::with_capacity(c * h_out * w_out);
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = S::neg_infinity();
                    let mut best_at = (0u32, 0u32);
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_at = (iy as u32, ix as u32);
                            }
                        }
                    }
                    y[[ci, oy, ox]] = best;
                    arg.push(best_at);
                }
            }
        }
        (
            y,
            PoolCache {
                arg,
                in_dim: (c, h, w),
                out_dim: (c, h_out, w_out),
            },
        )
    }

    pub fn backward<S: Scalar>(&self, cache: &PoolCache, dy: &Array3<S>) -> Array3<S> {
        assert_eq!(dy.dim(), cache.out_dim);
        let (_, h_out, w_out) = cache.out_dim;
        let mut dx = Array3::zeros(cache.in_dim);
        for ci in 0..cache.in_dim.0 {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let (iy, ix) = cache.arg[(ci * h_out + oy) * w_out + ox];
                    dx[[ci, iy as usize, ix as usize]] =
                        dx[[ci, iy as usize, ix as usize]] + dy[[ci, oy, ox]];
                }
            }
        }
        dx
    }
}
