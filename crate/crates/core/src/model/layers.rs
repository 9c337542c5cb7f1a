//! Parameterized building blocks with explicit caches for the backward pass.

use crate::nn::ops::{
    gemm, layer_norm_backward_into, layer_norm_into, softmax_rows_backward_into,
    softmax_rows_inplace, LayerNormCache, View, ViewMut, LAYER_NORM_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Linear {
    pub fn lookup<T: Scalar>(p: &ParamStore<T>, prefix: &str) -> Self {
        Linear {
            w: p.id(&format!("{prefix}.weight")).expect("schema weight"),
            b: p.id(&format!("{prefix}.bias")).expect("schema bias"),
        }
    }

    pub fn dims<T: Scalar>(&self, p: &ParamStore<T>) -> (usize, usize) {
        let s = p.get(self.w).shape();
        (s[0], s[1])
    }

    /// `y = x·W + b` for `rows` rows.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let (inp, out) = self.dims(p);
        let bias = p.data(self.b);
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            View::mat(x, rows, inp),
            View::mat(p.data(self.w), inp, out),
            T::one(),
            ViewMut::mat(&mut y, rows, out),
        );
        y
    }

    /// Accumulates weight/bias gradients. When `dx` is given, writes `dy·Wᵀ`
    /// into it (`accumulate` adds instead of overwriting).
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Gradients<T>,
        x: &[T],
        rows: usize,
        dy: &[T],
        dx: Option<&mut [T]>,
        accumulate: bool,
    ) {
        let (inp, out) = self.dims(p);
        gemm(
            View::mat(x, rows, inp).t(),
            View::mat(dy, rows, out),
            T::one(),
            ViewMut::mat(&mut g.bufs[self.w], inp, out),
        );
        let db = &mut g.bufs[self.b];
        for row in dy.chunks_exact(out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        if let Some(dx) = dx {
            let beta = if accumulate { T::one() } else { T::zero() };
            gemm(
                View::mat(dy, rows, out),
                View::mat(p.data(self.w), inp, out).t(),
                beta,
                ViewMut::mat(dx, rows, inp),
            );
        }
    }
}

impl Norm {
    pub fn lookup<T: Scalar>(p: &ParamStore<T>, prefix: &str) -> Self {
        Norm {
            g: p.id(&format!("{prefix}.weight")).expect("schema gamma"),
            b: p.id(&format!("{prefix}.bias")).expect("schema beta"),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let mut y = vec![T::zero(); x.len()];
        let cache = layer_norm_into(
            x,
            p.data(self.g),
            p.data(self.b),
            T::from_f64_lossy(LAYER_NORM_EPS),
            &mut y,
        );
        (y, cache)
    }

    /// Adds the input gradient into `dx`.
    pub fn backward_add<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Gradients<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
        dx: &mut [T],
    ) {
        let mut tmp = vec![T::zero(); dy.len()];
        let (dg, db) = two_mut(&mut g.bufs, self.g, self.b);
        layer_norm_backward_into(cache, p.data(self.g), dy, &mut tmp, dg, db);
        for (d, t) in dx.iter_mut().zip(tmp) {
            *d += t;
        }
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mask<'a> {
    /// `false` marks a padded key.
    pub key_valid: Option<&'a [bool]>,
    /// Query `i` sees keys `j <= i + offset` when set.
    pub causal_offset: Option<usize>,
}

impl Mask<'_> {
    pub const NONE: Mask<'static> = Mask {
        key_valid: None,
        causal_offset: None,
    };

    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        self.key_valid.is_none_or(|v| v[j]) && self.causal_offset.is_none_or(|o| j <= i + o)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × lq × lk` attention weights.
    probs: Vec<T>,
    ctx: Vec<T>,
    lq: usize,
    lk: usize,
}

impl Attention {
    pub fn lookup<T: Scalar>(p: &ParamStore<T>, prefix: &str) -> Self {
        Attention {
            q: Linear::lookup(p, &format!("{prefix}.q")),
            k: Linear::lookup(p, &format!("{prefix}.k")),
            v: Linear::lookup(p, &format!("{prefix}.v")),
            o: Linear::lookup(p, &format!("{prefix}.o")),
        }
    }

    /// Multi-head attention of `xq` (`lq` rows) over `xkv` (`lk` rows).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        heads: usize,
        xq: &[T],
        lq: usize,
        xkv: &[T],
        lk: usize,
        mask: Mask<'_>,
    ) -> (Vec<T>, AttnCache<T>) {
        let q = self.q.forward(p, xq, lq);
        let k = self.k.forward(p, xkv, lk);
        let v = self.v.forward(p, xkv, lk);
        let (ctx, probs) = attend(&q, &k, &v, lq, lk, heads, mask);
        let out = self.o.forward(p, &ctx, lq);
        (
            out,
            AttnCache {
                q,
                k,
                v,
                probs,
                ctx,
                lq,
                lk,
            },
        )
    }

    /// Returns `(dxq, dxkv)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Gradients<T>,
        heads: usize,
        cache: &AttnCache<T>,
        xq: &[T],
        xkv: &[T],
        dout: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let AttnCache {
            q,
            k,
            v,
            probs,
            ctx,
            lq,
            lk,
        } = cache;
        let (lq, lk) = (*lq, *lk);
        let h = q.len() / lq;
        let dh = h / heads;
        let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();

        let mut dctx = vec![T::zero(); lq * h];
        self.o.backward(p, g, ctx, lq, dout, Some(&mut dctx), false);

        let mut dq = vec![T::zero(); lq * h];
        let mut dk = vec![T::zero(); lk * h];
        let mut dv = vec![T::zero(); lk * h];
        let mut dp = vec![T::zero(); lq * lk];
        let mut ds = vec![T::zero(); lq * lk];
        for hd in 0..heads {
            let c0 = hd * dh;
            let ph = &probs[hd * lq * lk..(hd + 1) * lq * lk];
            gemm(
                View::mat(&dctx, lq, h).cols(c0, dh),
                View::mat(v, lk, h).cols(c0, dh).t(),
                T::zero(),
                ViewMut::mat(&mut dp, lq, lk),
            );
            gemm(
                View::mat(ph, lq, lk).t(),
                View::mat(&dctx, lq, h).cols(c0, dh),
                T::zero(),
                ViewMut::mat(&mut dv, lk, h).cols(c0, dh),
            );
            softmax_rows_backward_into(ph, &dp, lk, &mut ds);
            ds.iter_mut().for_each(|x| *x *= scale);
            gemm(
                View::mat(&ds, lq, lk),
                View::mat(k, lk, h).cols(c0, dh),
                T::zero(),
                ViewMut::mat(&mut dq, lq, h).cols(c0, dh),
            );
            gemm(
                View::mat(&ds, lq, lk).t(),
                View::mat(q, lq, h).cols(c0, dh),
                T::zero(),
                ViewMut::mat(&mut dk, lk, h).cols(c0, dh),
            );
        }

        let mut dxq = vec![T::zero(); xq.len()];
        self.q.backward(p, g, xq, lq, &dq, Some(&mut dxq), false);
        let mut dxkv = vec![T::zero(); xkv.len()];
        self.k.backward(p, g, xkv, lk, &dk, Some(&mut dxkv), false);
        self.v.backward(p, g, xkv, lk, &dv, Some(&mut dxkv), true);
        (dxq, dxkv)
    }
}

/// Scaled dot-product attention over precomputed projections. Returns the
/// concatenated head outputs and the attention weights.
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    heads: usize,
    mask: Mask<'_>,
) -> (Vec<T>, Vec<T>) {
    let h = q.len() / lq;
    let dh = h / heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim").sqrt();
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut ctx = vec![T::zero(); lq * h];
    for hd in 0..heads {
        let c0 = hd * dh;
        let ph = &mut probs[hd * lq * lk..(hd + 1) * lq * lk];
        gemm(
            View::mat(q, lq, h).cols(c0, dh),
            View::mat(k, lk, h).cols(c0, dh).t(),
            T::zero(),
            ViewMut::mat(ph, lq, lk),
        );
        for i in 0..lq {
            for j in 0..lk {
                let s = &mut ph[i * lk + j];
                *s = if mask.allowed(i, j) {
                    *s * scale
                } else {
                    T::neg_infinity()
                };
            }
        }
        softmax_rows_inplace(ph, lk);
        gemm(
            View::mat(ph, lq, lk),
            View::mat(v, lk, h).cols(c0, dh),
            T::zero(),
            ViewMut::mat(&mut ctx, lq, h).cols(c0, dh),
        );
    }
    (ctx, probs)
}

/// Inverted dropout driven by an optional generator; inactive without one.
pub(crate) struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    pub fn new(p: f64, rng: Option<&'a mut Rng>) -> Self {
        Dropout { p, rng }
    }

    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    /// Applies dropout in place and returns the scaled keep-mask.
    pub fn apply<T: Scalar>(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        let rng = self.rng.as_deref_mut()?;
        if self.p <= 0.0 {
            return None;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.bernoulli(self.p) { T::zero() } else { keep })
            .collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

/// Multiplies `dy` by a dropout mask when one was applied.
pub(crate) fn dropout_backward<T: Scalar>(mask: &Option<Vec<T>>, dy: &[T]) -> Vec<T> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(&d, &k)| d * k).collect(),
        None => dy.to_vec(),
    }
}
