//! Per-slot classifier, per-class top-k pooling, loss and prediction.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{apply_mask, dropout_mask, gelu, gelu_backward, join, Linear, Mode, TensorView, TensorViewMut};
use crate::scalar::Scalar;

/// Three pointwise layers `D_c → D → D → C` with dropout after each hidden
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub dropout: f64,
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub l3: Linear<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn init(d_in: usize, d: usize, classes: usize, dropout: f64, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("classifier dropout must lie in [0, 1), got {dropout}")));
        }
        if classes == 0 {
            return Err(Error::Config("class count must be >= 1".into()));
        }
        Ok(Self {
            dropout,
            l1: Linear::init(d_in, d, std, rng),
            l2: Linear::init(d, d, std, rng),
            l3: Linear::init(d, classes, std, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.fan_in(), l.fan_out());
        Self {
            dropout: self.dropout,
            l1: z(&self.l1),
            l2: z(&self.l2),
            l3: z(&self.l3),
        }
    }

    pub fn classes(&self) -> usize {
        self.l3.fan_out()
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierParams<U> {
        ClassifierParams {
            dropout: self.dropout,
            l1: self.l1.cast(),
            l2: self.l2.cast(),
            l3: self.l3.cast(),
        }
    }

    pub(crate) fn push<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        self.l1.push(&join(prefix, "l1"), out);
        self.l2.push(&join(prefix, "l2"), out);
        self.l3.push(&join(prefix, "l3"), out);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        self.l1.push_mut(&join(prefix, "l1"), out);
        self.l2.push_mut(&join(prefix, "l2"), out);
        self.l3.push_mut(&join(prefix, "l3"), out);
    }
}

pub struct ClassifierCache<T> {
    x: Array2<T>,
    h1: Array2<T>,
    a1: Array2<T>,
    m1: Option<Array2<T>>,
    h2: Array2<T>,
    a2: Array2<T>,
    m2: Option<Array2<T>>,
}

/// Slot-wise classifier on `(N·n) × D_c` rows, giving `(N·n) × C` scores.
pub fn classify_rows<T: Scalar>(
    x: &Array2<T>,
    params: &ClassifierParams<T>,
    mode: &mut Mode<'_>,
) -> Result<(Array2<T>, ClassifierCache<T>)> {
    if x.ncols() != params.l1.fan_in() {
        return Err(Error::shape(
            "classify",
            format!("feature width {} != classifier input {}", x.ncols(), params.l1.fan_in()),
        ));
    }
    let h1 = params.l1.forward(x);
    let mut a1 = gelu(&h1);
    let m1 = dropout_mask::<T>(a1.dim(), params.dropout, mode);
    apply_mask(&mut a1, m1.as_ref());
    let h2 = params.l2.forward(&a1);
    let mut a2 = gelu(&h2);
    let m2 = dropout_mask::<T>(a2.dim(), params.dropout, mode);
    apply_mask(&mut a2, m2.as_ref());
    let out = params.l3.forward(&a2);
    let cache = ClassifierCache {
        x: x.clone(),
        h1,
        a1,
        m1,
        h2,
        a2,
        m2,
    };
    Ok((out, cache))
}

/// Returns `dL/dx` and accumulates parameter gradients.
pub fn classify_backward<T: Scalar>(
    params: &ClassifierParams<T>,
    cache: &ClassifierCache<T>,
    d_out: &Array2<T>,
    grad: &mut ClassifierParams<T>,
) -> Array2<T> {
    let mut d_a2 = params.l3.backward(&cache.a2, d_out, &mut grad.l3);
    apply_mask(&mut d_a2, cache.m2.as_ref());
    let d_h2 = gelu_backward(&cache.h2, &d_a2);
    let mut d_a1 = params.l2.backward(&cache.a1, &d_h2, &mut grad.l2);
    apply_mask(&mut d_a1, cache.m1.as_ref());
    let d_h1 = gelu_backward(&cache.h1, &d_a1);
    params.l1.backward(&cache.x, &d_h1, &mut grad.l1)
}

/// `N × n × D_c` to the class activation map `N × n × C`.
pub fn classify<T: Scalar>(o: &Array3<T>, params: &ClassifierParams<T>, mode: &mut Mode<'_>) -> Result<Array3<T>> {
    let (n_img, n, d) = o.dim();
    let flat = o.to_owned().into_shape_with_order((n_img * n, d)).expect("contiguous");
    let (cam, _) = classify_rows(&flat, params, mode)?;
    let c = cam.ncols();
    Ok(cam.into_shape_with_order((n_img, n, c)).expect("contiguous"))
}

/// Top-k pooling result: `o_pred` is `N × C`, `topk_idx` is `N × k × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK<T> {
    pub o_pred: Array2<T>,
    pub topk_idx: Array3<usize>,
}

/// For each sample and class, averages the `k` largest scores along the slot
/// axis. Ties go to the lower slot index.
///
/// With `eligible`, slots marked false are ranked after every eligible slot,
/// so they are only chosen when fewer than `k` slots are eligible.
pub fn topk_pool<T: Scalar>(o_cam: &Array3<T>, k: usize, eligible: Option<&Array2<bool>>) -> Result<TopK<T>> {
    let (n_img, n, c) = o_cam.dim();
    if k == 0 || k > n {
        return Err(Error::TopKRange { k, slots: n });
    }
    if let Some(e) = eligible {
        if e.dim() != (n_img, n) {
            return Err(Error::shape("topk_pool", format!("mask {:?} vs CAM {:?}", e.dim(), o_cam.dim())));
        }
    }
    let k_t = T::from_usize(k).unwrap();
    let mut o_pred = Array2::zeros((n_img, c));
    let mut topk_idx = Array3::zeros((n_img, k, c));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n_img {
        for cls in 0..c {
            order.clear();
            order.extend(0..n);
            let rank_ok = |j: usize| eligible.is_none_or(|e| e[[i, j]]);
            order.sort_by(|&a, &b| {
                rank_ok(b)
                    .cmp(&rank_ok(a))
                    .then_with(|| o_cam[[i, b, cls]].partial_cmp(&o_cam[[i, a, cls]]).unwrap_or(std::cmp::Ordering::Equal))
                    .then(a.cmp(&b))
            });
            let mut sum = T::zero();
            for (r, &j) in order[..k].iter().enumerate() {
                topk_idx[[i, r, cls]] = j;
                sum += o_cam[[i, j, cls]];
            }
            o_pred[[i, cls]] = sum / k_t;
        }
    }
    Ok(TopK { o_pred, topk_idx })
}

/// Scatters `dL/do_pred` back onto the selected CAM entries; every other
/// entry gets zero.
pub fn topk_backward<T: Scalar>(topk: &TopK<T>, d_pred: &Array2<T>, n: usize) -> Array3<T> {
    let (n_img, k, c) = topk.topk_idx.dim();
    let inv_k = T::one() / T::from_usize(k).unwrap();
    let mut d = Array3::zeros((n_img, n, c));
    for i in 0..n_img {
        for r in 0..k {
            for cls in 0..c {
                d[[i, topk.topk_idx[[i, r, cls]], cls]] += d_pred[[i, cls]] * inv_k;
            }
        }
    }
    d
}

/// Softmax cross-entropy averaged over the batch, with its gradient with
/// respect to `o_pred`.
pub fn mil_loss<T: Scalar>(o_pred: &Array2<T>, labels: &[i32]) -> Result<(T, Array2<T>)> {
    let (n_img, c) = o_pred.dim();
    if labels.len() != n_img {
        return Err(Error::shape("mil_loss", format!("{} labels for {n_img} rows", labels.len())));
    }
    if n_img == 0 {
        return Err(Error::Empty("loss batch"));
    }
    let inv_n = T::one() / T::from_usize(n_img).unwrap();
    let mut loss = T::zero();
    let mut grad = Array2::zeros((n_img, c));
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 || y as usize >= c {
            return Err(Error::InvalidLabel {
                label: y as i64,
                classes: c,
            });
        }
        let row = o_pred.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y as usize];
        for (cls, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if cls == y as usize { T::one() } else { T::zero() };
            grad[[i, cls]] = (p - target) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Argmax per row, ties to the lowest class index.
pub fn predict<T: Scalar>(o_pred: &Array2<T>) -> Vec<usize> {
    o_pred
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn example_cam() -> Array3<f64> {
        let mut cam = Array3::zeros((1, 4, 2));
        for (j, (a, b)) in [(3.0, 0.0), (1.0, 2.0), (2.0, 5.0), (0.0, 1.0)].into_iter().enumerate() {
            cam[[0, j, 0]] = a;
            cam[[0, j, 1]] = b;
        }
        cam
    }

    #[test]
    fn topk_example() {
        let t = topk_pool(&example_cam(), 2, None).unwrap();
        assert_eq!(t.o_pred, array![[2.5, 3.5]]);
        assert_eq!(t.topk_idx.slice(s![0, .., 0]).to_vec(), vec![0, 2]);
        assert_eq!(t.topk_idx.slice(s![0, .., 1]).to_vec(), vec![2, 1]);
        assert_eq!(predict(&t.o_pred), vec![1]);
    }

    #[test]
    fn topk_extremes() {
        let cam = example_cam();
        assert_eq!(topk_pool(&cam, 4, None).unwrap().o_pred, array![[1.5, 2.0]]);
        assert_eq!(topk_pool(&cam, 1, None).unwrap().o_pred, array![[3.0, 5.0]]);
        assert!(matches!(topk_pool(&cam, 5, None), Err(Error::TopKRange { k: 5, slots: 4 })));
        assert!(topk_pool(&cam, 0, None).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let cam = Array3::from_elem((1, 3, 1), 1.0);
        let t = topk_pool(&cam, 2, None).unwrap();
        assert_eq!(t.topk_idx.slice(s![0, .., 0]).to_vec(), vec![0, 1]);
        assert_eq!(predict(&array![[1.0, 1.0]]), vec![0]);
    }

    #[test]
    fn eligibility_mask_ranks_invalid_last() {
        let cam = example_cam();
        let mask = array![[false, true, true, true]];
        let t = topk_pool(&cam, 2, Some(&mask)).unwrap();
        assert_eq!(t.topk_idx.slice(s![0, .., 0]).to_vec(), vec![2, 1]);
        let none = array![[false, false, false, false]];
        assert_eq!(topk_pool(&cam, 2, Some(&none)).unwrap(), topk_pool(&cam, 2, None).unwrap());
    }

    #[test]
    fn loss_examples() {
        let (l, _) = mil_loss(&array![[2.5, 3.5]], &[1]).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 5e-6);
        let (l, _) = mil_loss(&Array2::<f64>::zeros((3, 5)), &[0, 2, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        let (l, _) = mil_loss(&array![[0.0f64, 800.0]], &[1]).unwrap();
        assert!(l.abs() < 1e-300);
        assert!(matches!(mil_loss(&array![[0.0, 1.0]], &[2]), Err(Error::InvalidLabel { label: 2, classes: 2 })));
        assert!(mil_loss(&array![[0.0, 1.0]], &[-1]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let x = array![[0.3f64, -1.2, 0.8], [2.0, 0.1, -0.4]];
        let labels = [2, 0];
        let (_, g) = mil_loss(&x, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let fd = (mil_loss(&a, &labels).unwrap().0 - mil_loss(&b, &labels).unwrap().0) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_shape_and_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ClassifierParams::<f64>::init(3, 4, 2, 0.7, 0.5, &mut rng).unwrap();
        let o = Array3::from_shape_simple_fn((1, 4, 3), || rng.random_range(-1.0..1.0));
        assert_eq!(classify(&o, &p, &mut Mode::Eval).unwrap().shape(), &[1, 4, 2]);
        p.l3.w.fill(0.0);
        p.l3.b = array![0.25, -1.5];
        let cam = classify(&o, &p, &mut Mode::Eval).unwrap();
        for j in 0..4 {
            assert_eq!(cam.slice(s![0, j, ..]).to_vec(), vec![0.25, -1.5]);
        }
    }

    fn brute_force(cam: &Array3<f64>, k: usize) -> Array2<f64> {
        let (n_img, n, c) = cam.dim();
        Array2::from_shape_fn((n_img, c), |(i, cls)| {
            let mut v: Vec<f64> = (0..n).map(|j| cam[[i, j, cls]]).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v[..k].iter().sum::<f64>() / k as f64
        })
    }

    proptest! {
        #[test]
        fn topk_matches_sorting_oracle(seed in any::<u64>(), n in 1usize..12, c in 1usize..5, k_frac in 0.0f64..1.0) {
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values so ties occur
            let cam = Array3::from_shape_simple_fn((2, n, c), || rng.random_range(0..6) as f64 * 0.5);
            let t = topk_pool(&cam, k, None).unwrap();
            prop_assert_eq!(&t.o_pred, &brute_force(&cam, k));
            for i in 0..2 {
                for cls in 0..c {
                    let mut idx: Vec<usize> = t.topk_idx.slice(s![i, .., cls]).to_vec();
                    idx.sort_unstable();
                    idx.dedup();
                    prop_assert_eq!(idx.len(), k);
                }
            }
        }

        #[test]
        fn gradient_is_zero_outside_selection(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = Array3::from_shape_simple_fn((2, 6, 3), || rng.random_range(-2.0..2.0));
            let t = topk_pool(&cam, 2, None).unwrap();
            let (_, dp) = mil_loss(&t.o_pred, &[0, 2]).unwrap();
            let d = topk_backward(&t, &dp, 6);
            for i in 0..2 {
                for cls in 0..3 {
                    let sel: Vec<usize> = t.topk_idx.slice(s![i, .., cls]).to_vec();
                    for j in 0..6 {
                        if !sel.contains(&j) {
                            prop_assert_eq!(d[[i, j, cls]], 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn raising_a_selected_entry_does_not_lower_its_logit(seed in any::<u64>(), bump in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = Array3::from_shape_simple_fn((1, 5, 2), || rng.random_range(-2.0..2.0));
            let t = topk_pool(&cam, 3, None).unwrap();
            let j = t.topk_idx[[0, 0, 1]];
            let mut raised = cam.clone();
            raised[[0, j, 1]] += bump;
            prop_assert!(topk_pool(&raised, 3, None).unwrap().o_pred[[0, 1]] >= t.o_pred[[0, 1]]);
        }

        #[test]
        fn prediction_ignores_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0));
            prop_assert_eq!(predict(&x), predict(&(&x + shift)));
        }
    }
}
