//! Multi-head scaled dot-product attention.
//!
//! Two execution paths share the same parameters: the full-sequence path
//! used for training (returns a cache for backward) and an incremental
//! per-row path used by greedy decoding against a [`KvCache`].

use super::{softmax_rows, softmax_rows_backward, Linear, ParamView, Params};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Position t may attend to positions ≤ t. Requires T_q = T_k.
    Causal,
}

/// Score scaling. `Standard` is 1/√(hidden/heads); `Hidden` divides by the
/// full hidden size instead, exactly as the architecture's attention formula
/// is written, and is exercised only where that formula is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    #[serde(rename = "sqrt")]
    Standard,
    Hidden,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S: Scalar> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
    pub scale: AttnScale,
}

pub struct AttnCache<S: Scalar> {
    q_in: Array2<S>,
    kv_in: Array2<S>,
    /// Projected queries, keys, values (all heads side by side). Exposed so
    /// reference checks can recompute attention from the same projections.
    pub q: Array2<S>,
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// Per-head attention weights, T_q × T_k; also read by inspection tools.
    pub attn: Vec<Array2<S>>,
    /// Head outputs side by side, before the output projection.
    pub concat: Array2<S>,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(
        hidden: usize,
        heads: usize,
        scale: AttnScale,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::config(format!(
                "hidden {hidden} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(hidden, hidden, rng),
            wk: Linear::new(hidden, hidden, rng),
            wv: Linear::new(hidden, hidden, rng),
            wo: Linear::new(hidden, hidden, rng),
            heads,
            scale,
        })
    }

    pub fn hidden(&self) -> usize {
        self.wq.d_out()
    }

    fn d_head(&self) -> usize {
        self.hidden() / self.heads
    }

    fn scale_factor(&self) -> S {
        match self.scale {
            AttnScale::Standard => s(1.0 / (self.d_head() as f64).sqrt()),
            AttnScale::Hidden => s(1.0 / self.hidden() as f64),
        }
    }

    /// q_in: T_q × D, kv_in: T_k × D → T_q × D.
    pub fn forward(
        &self,
        q_in: &Array2<S>,
        kv_in: &Array2<S>,
        mask: AttnMask,
    ) -> (Array2<S>, AttnCache<S>) {
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let (t_q, t_k) = (q.nrows(), k.nrows());
        if mask == AttnMask::Causal {
            assert_eq!(t_q, t_k, "causal mask needs square attention");
        }
        let (dh, sf) = (self.d_head(), self.scale_factor());

        let mut concat = Array2::zeros((t_q, self.hidden()));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![.., cols.clone()]);
            let ks = k.slice(s![.., cols.clone()]);
            let vs = v.slice(s![.., cols.clone()]);
            let mut scores = qs.dot(&ks.t());
            scores.mapv_inplace(|x| x * sf);
            if mask == AttnMask::Causal {
                for i in 0..t_q {
                    for j in i + 1..t_k {
                        scores[[i, j]] = S::neg_infinity();
                    }
                }
            }
            let a = softmax_rows(&scores);
            concat.slice_mut(s![.., cols]).assign(&a.dot(&vs));
            attn.push(a);
        }
        let y = self.wo.forward(&concat);
        (
            y,
            AttnCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                q,
                k,
                v,
                attn,
                concat,
            },
        )
    }

    /// Returns (d q_in, d kv_in); for self-attention add them.
    pub fn backward(&mut self, cache: &AttnCache<S>, dy: &Array2<S>) -> (Array2<S>, Array2<S>) {
        let (dh, sf) = (self.d_head(), self.scale_factor());
        let dconcat = self.wo.backward(&cache.concat, dy);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &cache.attn[h];
            let qs = cache.q.slice(s![.., cols.clone()]);
            let ks = cache.k.slice(s![.., cols.clone()]);
            let vs = cache.v.slice(s![.., cols.clone()]);
            let do_h = dconcat.slice(s![.., cols.clone()]);

            dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&do_h));
            let da = do_h.dot(&vs.t());
            // Masked cells have a = 0, which zeroes their score gradient.
            let mut dscores = softmax_rows_backward(a, &da);
            dscores.mapv_inplace(|x| x * sf);
            dq.slice_mut(s![.., cols.clone()]).assign(&dscores.dot(&ks));
            dk.slice_mut(s![.., cols]).assign(&dscores.t().dot(&qs));
        }
        let dq_in = self.wq.backward(&cache.q_in, &dq);
        let dk_in = self.wk.backward(&cache.kv_in, &dk);
        let dv_in = self.wv.backward(&cache.kv_in, &dv);
        (dq_in, dk_in + dv_in)
    }

    // --- incremental path ---------------------------------------------

    /// Projects all rows of `memory` once; used for cross-attention, where
    /// keys and values never change during decoding.
    pub fn precompute_kv(&self, memory: &Array2<S>) -> KvCache<S> {
        let k = self.wk.forward(memory);
        let v = self.wv.forward(memory);
        let len = k.nrows();
        KvCache { k, v, len }
    }

    /// Projects one new position into a growing self-attention cache.
    pub fn append_kv(&self, cache: &mut KvCache<S>, x: &ArrayView1<S>) {
        cache.push(self.wk.forward_row(x), self.wv.forward_row(x));
    }

    /// One query row attending over everything cached. Causality holds by
    /// construction: the cache only contains past positions.
    pub fn attend_one(&self, x: &ArrayView1<S>, cache: &KvCache<S>) -> Array1<S> {
        let (dh, sf) = (self.d_head(), self.scale_factor());
        let q = self.wq.forward_row(x);
        let ks = cache.k_view();
        let vs = cache.v_view();
        let mut concat = Array1::zeros(self.hidden());
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![cols.clone()]);
            let kh = ks.slice(s![.., cols.clone()]);
            let vh = vs.slice(s![.., cols.clone()]);
            let mut scores = kh.dot(&qh);
            scores.mapv_inplace(|v| v * sf);
            softmax_inplace(&mut scores);
            concat.slice_mut(s![cols]).assign(&scores.dot(&vh));
        }
        self.wo.forward_row(&concat.view())
    }
}

fn softmax_inplace<S: Scalar>(x: &mut Array1<S>) {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    x.mapv_inplace(|v| (v - max).exp());
    let sum = x.sum();
    x.mapv_inplace(|v| v / sum);
}

impl<S: Scalar> Params<S> for MultiHeadAttention<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.wq.visit(&format!("{prefix}/wq"), f);
        self.wk.visit(&format!("{prefix}/wk"), f);
        self.wv.visit(&format!("{prefix}/wv"), f);
        self.wo.visit(&format!("{prefix}/wo"), f);
    }
}

/// Preallocated key/value rows for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<S: Scalar> {
    k: Array2<S>,
    v: Array2<S>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn with_capacity(max_len: usize, hidden: usize) -> Self {
        KvCache {
            k: Array2::zeros((max_len, hidden)),
            v: Array2::zeros((max_len, hidden)),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn push(&mut self, k_row: Array1<S>, v_row: Array1<S>) {
        assert!(self.len < self.k.nrows(), "kv cache full");
        self.k.row_mut(self.len).assign(&k_row);
        self.v.row_mut(self.len).assign(&v_row);
        self.len += 1;
    }

    fn k_view(&self) -> ArrayView2<'_, S> {
        self.k.slice(s![..self.len, ..])
    }

    fn v_view(&self) -> ArrayView2<'_, S> {
        self.v.slice(s![..self.len, ..])
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::weighted_sum;
    use super::*;

    fn attn(hidden: usize, heads: usize, seed: u64) -> MultiHeadAttention<f64> {
        let mut r = rng(seed);
        MultiHeadAttention::new(hidden, heads, AttnScale::Standard, &mut r).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut r = rng(0);
        assert!(MultiHeadAttention::<f64>::new(10, 3, AttnScale::Standard, &mut r).is_err());
        assert!(MultiHeadAttention::<f64>::new(8, 0, AttnScale::Standard, &mut r).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let a = attn(8, 2, 30);
        let mut r = rng(31);
        let x = randn2(&mut r, (5, 8));
        let (_, cache) = a.forward(&x, &x, AttnMask::Causal);
        for head in &cache.attn {
            for (i, row) in head.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                for j in i + 1..5 {
                    assert_eq!(row[j], 0.0, "future position attended");
                }
            }
        }
    }

    #[test]
    fn causal_output_ignores_future_inputs() {
        let a = attn(8, 1, 32);
        let mut r = rng(33);
        let x = randn2(&mut r, (6, 8));
        let (y, _) = a.forward(&x, &x, AttnMask::Causal);
        let mut x2 = x.clone();
        for j in 0..8 {
            x2[[5, j]] += 100.0;
            x2[[4, j]] -= 7.0;
        }
        let (y2, _) = a.forward(&x2, &x2, AttnMask::Causal);
        for t in 0..4 {
            for j in 0..8 {
                assert_eq!(y[[t, j]], y2[[t, j]], "row {t} depends on the future");
            }
        }
        assert_ne!(y.row(5), y2.row(5));
    }

    #[test]
    fn hidden_scale_divides_by_hidden_not_sqrt_dk() {
        let mut r = rng(34);
        let std =
            MultiHeadAttention::<f64>::new(16, 1, AttnScale::Standard, &mut r).unwrap();
        let mut lit = std.clone();
        lit.scale = AttnScale::Hidden;
        assert!((std.scale_factor() - 0.25).abs() < 1e-15);
        assert!((lit.scale_factor() - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut a = attn(6, 2, 35);
        let mut r = rng(36);
        let q_in = randn2(&mut r, (3, 6));
        let kv_in = randn2(&mut r, (5, 6));
        let (y, cache) = a.forward(&q_in, &kv_in, AttnMask::None);
        let proj = randn2(&mut r, y.dim());
        let (dq_in, dkv_in) = a.backward(&cache, &proj);

        let loss = |a: &MultiHeadAttention<f64>, q: &Array2<f64>, kv: &Array2<f64>| {
            weighted_sum(&a.forward(q, kv, AttnMask::None).0, &proj)
        };

        for i in 0..3 {
            for j in 0..6 {
                let num = numeric_grad_at(
                    |v| {
                        let mut qm = q_in.clone();
                        qm[[i, j]] = v;
                        loss(&a, &qm, &kv_in)
                    },
                    q_in[[i, j]],
                );
                assert_close(dq_in[[i, j]], num, &format!("dq_in[{i},{j}]"));
            }
        }
        for i in 0..5 {
            for j in 0..6 {
                let num = numeric_grad_at(
                    |v| {
                        let mut km = kv_in.clone();
                        km[[i, j]] = v;
                        loss(&a, &q_in, &km)
                    },
                    kv_in[[i, j]],
                );
                assert_close(dkv_in[[i, j]], num, &format!("dkv_in[{i},{j}]"));
            }
        }
        // A few parameter entries from each projection.
        let dwq = a.wq.w.g.clone();
        let dwo = a.wo.w.g.clone();
        for &(i, j) in &[(0, 0), (2, 3), (5, 5)] {
            let num = numeric_grad_at(
                |v| {
                    let mut am = a.clone();
                    am.wq.w.w[[i, j]] = v;
                    loss(&am, &q_in, &kv_in)
                },
                a.wq.w.w[[i, j]],
            );
            assert_close(dwq[[i, j]], num, &format!("dWq[{i},{j}]"));
            let num = numeric_grad_at(
                |v| {
                    let mut am = a.clone();
                    am.wo.w.w[[i, j]] = v;
                    loss(&am, &q_in, &kv_in)
                },
                a.wo.w.w[[i, j]],
            );
            assert_close(dwo[[i, j]], num, &format!("dWo[{i},{j}]"));
        }
    }

    #[test]
    fn self_attention_gradient_sums_both_routes() {
        let mut a = attn(4, 1, 37);
        let mut r = rng(38);
        let x = randn2(&mut r, (4, 4));
        let (y, cache) = a.forward(&x, &x, AttnMask::Causal);
        let proj = randn2(&mut r, y.dim());
        let (dq, dkv) = a.backward(&cache, &proj);
        let dx = dq + dkv;
        for i in 0..4 {
            for j in 0..4 {
                let num = numeric_grad_at(
                    |v| {
                        let mut xm = x.clone();
                        xm[[i, j]] = v;
                        weighted_sum(&a.forward(&xm, &xm, AttnMask::Causal).0, &proj)
                    },
                    x[[i, j]],
                );
                assert_close(dx[[i, j]], num, &format!("self dx[{i},{j}]"));
            }
        }
    }

    #[test]
    fn incremental_self_attention_matches_full_causal_forward() {
        for heads in [1, 2, 4] {
            let a = attn(8, heads, 40 + heads as u64);
            let mut r = rng(41);
            let x = randn2(&mut r, (7, 8));
            let (full, _) = a.forward(&x, &x, AttnMask::Causal);
            let mut cache = KvCache::with_capacity(7, 8);
            for t in 0..7 {
                a.append_kv(&mut cache, &x.row(t));
                let y = a.attend_one(&x.row(t), &cache);
                for j in 0..8 {
                    assert!(
                        (y[j] - full[[t, j]]).abs() < 1e-12,
                        "heads={heads} t={t} j={j}: {} vs {}",
                        y[j],
                        full[[t, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn incremental_cross_attention_matches_full_forward() {
        let a = attn(8, 2, 42);
        let mut r = rng(43);
        let mem = randn2(&mut r, (9, 8));
        let q = randn2(&mut r, (3, 8));
        let (full, _) = a.forward(&q, &mem, AttnMask::None);
        let cache = a.precompute_kv(&mem);
        for t in 0..3 {
            let y = a.attend_one(&q.row(t), &cache);
            for j in 0..8 {
                assert!((y[j] - full[[t, j]]).abs() < 1e-12);
            }
        }
    }
}
