//! Forward and backward kernels for every primitive the transformer uses.
//!
//! Tensors are treated as stacks of rows over their last axis. Backward
//! functions return fresh gradients; the `_into` kernels used by the model
//! accumulate into caller-owned buffers instead.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn mat(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        View {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `start..start + width` of this view.
    pub fn cols(self, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= self.cols);
        View {
            off: self.off + start * self.cs,
            cols: width,
            ..self
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn mat(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        ViewMut {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= self.cols);
        ViewMut {
            off: self.off + start * self.cs,
            cols: width,
            ..self
        }
    }

    pub fn t(self) -> Self {
        ViewMut {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `c <- a·b + beta·c`.
pub fn gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.off + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "matrix view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above; `c` is a unique borrow
    // so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `[m,k]·[k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = two_d(a)?;
    let (k2, n) = two_d(b)?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = vec![T::zero(); m * n];
    gemm(
        View::mat(a.data(), m, k),
        View::mat(b.data(), k, n),
        T::zero(),
        ViewMut::mat(&mut c, m, n),
    );
    Tensor::new(vec![m, n], c)
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = two_d(a)?;
    let (_, n) = two_d(b)?;
    if dc.shape() != [m, n] {
        return Err(Error::Shape(format!("upstream gradient {:?}", dc.shape())));
    }
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    gemm(
        View::mat(dc.data(), m, n),
        View::mat(b.data(), k, n).t(),
        T::zero(),
        ViewMut::mat(&mut da, m, k),
    );
    gemm(
        View::mat(a.data(), m, k).t(),
        View::mat(dc.data(), m, n),
        T::zero(),
        ViewMut::mat(&mut db, k, n),
    );
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

fn two_d<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    }
}

/// In-place softmax over each row of length `n`. Entries equal to `-inf`
/// get probability 0; a row that is entirely `-inf` becomes all zeros.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.grad = None;
    let n = x.last_dim();
    softmax_rows_inplace(y.data_mut(), n);
    y
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row, written into `dx`.
pub fn softmax_rows_backward_into<T: Scalar>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(y.shape());
    softmax_rows_backward_into(y.data(), dy.data(), y.last_dim(), dx.data_mut());
    dx
}

/// Normalized activations and inverse standard deviations kept for backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer norm into `y`; returns the cache.
pub fn layer_norm_into<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) -> LayerNormCache<T> {
    let h = gamma.len();
    let rows = x.len() / h;
    let hf = T::from_usize(h).expect("width");
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().copied().sum::<T>() / hf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = &mut xhat[r * h..(r + 1) * h];
        let yr = &mut y[r * h..(r + 1) * h];
        for i in 0..h {
            xh[i] = (xr[i] - mean) * rs;
            yr[i] = xh[i] * gamma[i] + beta[i];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Accumulates `dgamma`/`dbeta` and writes (overwrites) `dx`.
pub fn layer_norm_backward_into<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let h = gamma.len();
    let hf = T::from_usize(h).expect("width");
    let mut dxhat = vec![T::zero(); h];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let dyr = &dy[r * h..(r + 1) * h];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..h {
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= hf;
        mean_dx /= hf;
        let dxr = &mut dx[r * h..(r + 1) * h];
        for i in 0..h {
            dxr[i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let h = x.last_dim();
    if gamma.len() != h || beta.len() != h {
        return Err(Error::Shape(format!(
            "layer norm over width {h} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut y = Tensor::zeros(x.shape());
    let cache = layer_norm_into(
        x.data(),
        gamma.data(),
        beta.data(),
        T::from_f64_lossy(eps),
        y.data_mut(),
    );
    Ok((y, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(gamma.shape());
    let mut db = Tensor::zeros(gamma.shape());
    layer_norm_backward_into(
        cache,
        gamma.data(),
        dy.data(),
        dx.data_mut(),
        dg.data_mut(),
        db.data_mut(),
    );
    (dx, dg, db)
}

const GELU_A: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape());
    for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
        *o = gelu_scalar(v);
    }
    y
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &v), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *o = g * gelu_grad_scalar(v);
    }
    dx
}

/// Summed token negative log-likelihood over rows whose target is not
/// `ignore_id`. Writes `scale · ∂sum/∂logits` into `dlogits` and returns
/// `(sum, counted rows)`.
pub fn cross_entropy_sum_into<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    ignore_id: usize,
    scale: T,
    dlogits: &mut [T],
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for (t, &target) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
        if target == ignore_id {
            drow.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        if target >= vocab {
            return Err(Error::TokenOutOfRange {
                id: target,
                size: vocab,
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        let log_z = max + sum.ln();
        total += (log_z - row[target]).to_f64_lossy();
        let inv = scale / sum;
        drow.iter_mut().for_each(|d| *d *= inv);
        drow[target] -= scale;
        count += 1;
    }
    Ok((total, count))
}

/// Mean cross-entropy over non-ignored positions with its gradient.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_id: usize,
) -> Result<(T, Tensor<T>)> {
    let (rows, vocab) = logits.rows_cols();
    if rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let counted = targets.iter().filter(|&&t| t != ignore_id).count();
    if counted == 0 {
        return Err(Error::Empty("every target position is ignored".into()));
    }
    let scale = T::one() / T::from_usize(counted).expect("count");
    let mut d = Tensor::zeros(logits.shape());
    let (sum, _) = cross_entropy_sum_into(logits.data(), vocab, targets, ignore_id, scale, d.data_mut())?;
    Ok((T::from_f64_lossy(sum / counted as f64), d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);

        let x = t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);

        let z = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matmul(&z, &x).unwrap().data().iter().all(|&v| v == 0.0));

        let err = matmul(&x, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&t(&[2], &[0., 0.])).data(), &[0.5, 0.5]);
        assert_eq!(softmax_rows(&t(&[2], &[1000., 1000.])).data(), &[0.5, 0.5]);
        assert_eq!(
            softmax_rows(&t(&[2], &[0., f64::NEG_INFINITY])).data(),
            &[1.0, 0.0]
        );
        let y = softmax_rows(&Tensor::<f32>::new(vec![2], vec![1000., 1000.]).unwrap());
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[3], &[1., 1., 1.]);
        let zeros = t(&[3], &[0., 0., 0.]);
        let (y, _) = layer_norm(&t(&[3], &[4., 4., 4.]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (y, _) = layer_norm(&t(&[2], &[1., 3.]), &t(&[2], &[1., 1.]), &t(&[2], &[0., 0.]), 1e-12)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let beta = t(&[3], &[0.5, -1., 2.]);
        let (y, _) = layer_norm(&t(&[2, 3], &[1., 5., -2., 0., 3., 9.]), &zeros, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -1., 2., 0.5, -1., 2.]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 164;
        let logits = Tensor::<f64>::zeros(&[1, v]);
        let (loss, _) = cross_entropy(&logits, &[7], usize::MAX).unwrap();
        assert!((loss - (164f64).ln()).abs() < 1e-12);
        assert!((loss - 5.0999).abs() < 1e-4);

        let mut l = Tensor::<f64>::zeros(&[1, 5]);
        l.data_mut()[3] = 1000.0;
        assert!(cross_entropy(&l, &[3], usize::MAX).unwrap().0 < 1e-6);

        let two = t(&[2, 3], &[0.2, -1.0, 0.7, 3.0, 0.1, -0.5]);
        let one = t(&[1, 3], &[0.2, -1.0, 0.7]);
        let (a, da) = cross_entropy(&two, &[2, 99], 99).unwrap();
        let (b, db) = cross_entropy(&one, &[2], 99).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert_eq!(&da.data()[..3], db.data());
        assert!(da.data()[3..].iter().all(|&g| g == 0.0));

        assert!(matches!(cross_entropy(&one, &[99], 99), Err(Error::Empty(_))));
    }
}
