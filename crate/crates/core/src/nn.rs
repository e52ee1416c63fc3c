//! Differentiable building blocks with hand-written backward passes.
//!
//! Activations are kept as 2-D `tokens × features` matrices; batched
//! `N × n × D` tensors are flattened to `(N·n) × D` before calling in here.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is drawn from the supplied generator in
/// training mode and disabled entirely in evaluation mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// A named view of one parameter tensor.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorViewMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// A collection of named parameter tensors. Gradients are stored in a value
/// of the same type, so both sides enumerate tensors in the same order.
pub trait ParamSet<T: Scalar> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>);

    fn views(&self) -> Vec<TensorView<'_, T>> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn views_mut(&mut self) -> Vec<TensorViewMut<'_, T>> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.views().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_mat<'a, T: Scalar>(
    out: &mut Vec<TensorView<'a, T>>,
    name: String,
    m: &'a Array2<T>,
) {
    out.push(TensorView {
        name,
        shape: m.shape().to_vec(),
        data: m.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_vec<'a, T: Scalar>(
    out: &mut Vec<TensorView<'a, T>>,
    name: String,
    v: &'a Array1<T>,
) {
    out.push(TensorView {
        name,
        shape: v.shape().to_vec(),
        data: v.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mat_mut<'a, T: Scalar>(
    out: &mut Vec<TensorViewMut<'a, T>>,
    name: String,
    m: &'a mut Array2<T>,
) {
    let shape = m.shape().to_vec();
    out.push(TensorViewMut {
        name,
        shape,
        data: m.as_slice_mut().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_vec_mut<'a, T: Scalar>(
    out: &mut Vec<TensorViewMut<'a, T>>,
    name: String,
    v: &'a mut Array1<T>,
) {
    let shape = v.shape().to_vec();
    out.push(TensorViewMut {
        name,
        shape,
        data: v.as_slice_mut().expect("parameters are contiguous"),
    });
}

/// Truncated normal (cut at two standard deviations).
pub fn trunc_normal<T: Scalar>(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                return T::lit(z * std);
            }
        }
    })
}

/// Affine map `y = x·W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: trunc_normal((fan_in, fan_out), std, rng),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only, for layers fed directly by data.
    pub fn accumulate(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
    }

    pub(crate) fn push<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        push_mat(out, join(prefix, "w"), &self.w);
        push_vec(out, join(prefix, "b"), &self.b);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        push_mat_mut(out, join(prefix, "w"), &mut self.w);
        push_vec_mut(out, join(prefix, "b"), &mut self.b);
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            w: self.w.mapv(|v| U::lit(v.as_f64())),
            b: self.b.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(gelu_scalar)
}

/// `dL/dx` given the pre-activation input and `dL/dy`.
pub fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &xv| *d *= gelu_grad_scalar(xv));
    dx
}

/// Layer normalisation over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * s);
            *inv = s;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.iter().copied().sum::<T>();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = inv / d * (d * gv - sum_g - xv * sum_gx);
            }
        }
        dx
    }

    pub(crate) fn push<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        push_vec(out, join(prefix, "gamma"), &self.gamma);
        push_vec(out, join(prefix, "beta"), &self.beta);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        push_vec_mut(out, join(prefix, "gamma"), &mut self.gamma);
        push_vec_mut(out, join(prefix, "beta"), &mut self.beta);
    }

    pub fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.mapv(|v| U::lit(v.as_f64())),
            beta: self.beta.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-p)`. Returns `None`
/// in evaluation mode or when `p == 0`.
pub fn dropout_mask<T: Scalar>(shape: (usize, usize), p: f64, mode: &mut Mode<'_>) -> Option<Array2<T>> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let scale = T::lit(1.0 / (1.0 - p));
            Some(Array2::from_shape_simple_fn(shape, || {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            }))
        }
        _ => None,
    }
}

pub fn apply_mask<T: Scalar>(x: &mut Array2<T>, mask: Option<&Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.2, -0.1, 0.0, 0.4, 1.7, 4.0] {
            let a = gelu_grad_scalar(x);
            let n = fd(gelu_scalar, x);
            assert!((a - n).abs() < 1e-8, "x={x}: {a} vs {n}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_191_990_607_477_9).abs() < 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let ln = LayerNorm::<f64>::new(4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [10.0, -10.0, 0.0, 5.0]];
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean: f64 = row.sum() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_is_disabled_in_eval() {
        assert!(dropout_mask::<f32>((3, 3), 0.7, &mut Mode::Eval).is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask::<f64>((50, 50), 0.7, &mut Mode::Train(&mut rng)).unwrap();
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 2500.0;
        assert!((kept - 0.3).abs() < 0.05);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.3).abs() < 1e-12));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut v = [1000.0f64, 1000.0, 999.0];
        softmax_in_place(&mut v);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v[0] - v[1]).abs() < 1e-15);
    }
}
