//! Cross-attentive fusion of local concept tokens with the global token, and
//! the parameter-free fusion baselines used for ablation.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    apply_mask, dropout_mask, gelu, gelu_backward, join, push_mat, push_mat_mut, trunc_normal, LayerNorm,
    LayerNormCache, Linear, Mode, TensorView, TensorViewMut,
};
use crate::scalar::Scalar;

/// How local and global tokens are combined before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-attention: concepts query the global token.
    Ours,
    /// Global token appended as an extra slot: `n + 1` slots.
    Concat1,
    /// Global token concatenated onto every concept's features: width `2D`.
    Concat2,
    /// Mean of the concept slots plus the global token: one slot.
    AvgSum,
    LocalOnly,
    GlobalOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ours,
        Variant::Concat1,
        Variant::Concat2,
        Variant::AvgSum,
        Variant::LocalOnly,
        Variant::GlobalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Concat1 => "concat1",
            Variant::Concat2 => "concat2",
            Variant::AvgSum => "avg_sum",
            Variant::LocalOnly => "local_only",
            Variant::GlobalOnly => "global_only",
        }
    }

    /// Slot count seen by the classifier when the fusion input has `n` concepts.
    pub fn slots(self, n: usize) -> usize {
        match self {
            Variant::Ours | Variant::Concat2 | Variant::LocalOnly => n,
            Variant::Concat1 => n + 1,
            Variant::AvgSum | Variant::GlobalOnly => 1,
        }
    }

    /// Feature width seen by the classifier.
    pub fn width(self, d: usize) -> usize {
        match self {
            Variant::Concat2 => 2 * d,
            _ => d,
        }
    }

    /// Whether the classifier slots map one-to-one onto concept slots.
    pub fn slots_are_concepts(self) -> bool {
        matches!(self, Variant::Ours | Variant::Concat2 | Variant::LocalOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Divisor applied to the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√n`, with `n` the number of concept slots.
    #[default]
    SqrtN,
    /// `√(D/H)`, the usual per-head key width.
    SqrtDk,
}

impl AttentionScale {
    pub fn divisor(self, n: usize, d_head: usize) -> f64 {
        match self {
            AttentionScale::SqrtN => (n as f64).sqrt(),
            AttentionScale::SqrtDk => (d_head as f64).sqrt(),
        }
    }
}

/// Attention parameters. `w_q`, `w_k`, `w_v` are `D × D`; head `h` owns
/// columns `h·D/H .. (h+1)·D/H` of each.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub heads: usize,
    pub dropout: f64,
    pub scale: AttentionScale,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_proj: Array2<T>,
    pub ln: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

/// Post-softmax weights and pre-softmax logits, both `N × H × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub weights: Array3<T>,
    pub logits: Array3<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(d: usize, heads: usize, dropout: f64, scale: AttentionScale, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("latent width {d} is not divisible by {heads} heads")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("fusion dropout must lie in [0, 1), got {dropout}")));
        }
        Ok(Self {
            heads,
            dropout,
            scale,
            w_q: trunc_normal((d, d), std, rng),
            w_k: trunc_normal((d, d), std, rng),
            w_v: trunc_normal((d, d), std, rng),
            w_proj: trunc_normal((d, d), std, rng),
            ln: LayerNorm::new(d),
            mlp1: Linear::init(d, 4 * d, std, rng),
            mlp2: Linear::init(4 * d, d, std, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            heads: self.heads,
            dropout: self.dropout,
            scale: self.scale,
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_proj: Array2::zeros((d, d)),
            ln: LayerNorm::zeros(d),
            mlp1: Linear::zeros(d, 4 * d),
            mlp2: Linear::zeros(4 * d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn cast<U: Scalar>(&self) -> FusionParams<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        FusionParams {
            heads: self.heads,
            dropout: self.dropout,
            scale: self.scale,
            w_q: c(&self.w_q),
            w_k: c(&self.w_k),
            w_v: c(&self.w_v),
            w_proj: c(&self.w_proj),
            ln: self.ln.cast(),
            mlp1: self.mlp1.cast(),
            mlp2: self.mlp2.cast(),
        }
    }

    pub(crate) fn push<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        push_mat(out, join(prefix, "w_q"), &self.w_q);
        push_mat(out, join(prefix, "w_k"), &self.w_k);
        push_mat(out, join(prefix, "w_v"), &self.w_v);
        push_mat(out, join(prefix, "w_proj"), &self.w_proj);
        self.ln.push(&join(prefix, "ln"), out);
        self.mlp1.push(&join(prefix, "mlp1"), out);
        self.mlp2.push(&join(prefix, "mlp2"), out);
    }

    pub(crate) fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        push_mat_mut(out, join(prefix, "w_q"), &mut self.w_q);
        push_mat_mut(out, join(prefix, "w_k"), &mut self.w_k);
        push_mat_mut(out, join(prefix, "w_v"), &mut self.w_v);
        push_mat_mut(out, join(prefix, "w_proj"), &mut self.w_proj);
        self.ln.push_mut(&join(prefix, "ln"), out);
        self.mlp1.push_mut(&join(prefix, "mlp1"), out);
        self.mlp2.push_mut(&join(prefix, "mlp2"), out);
    }
}

fn check_stage<T: Scalar>(x: &Array2<T>, stage: &str) -> Result<()> {
    match x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(row) => Err(Error::NonFinite {
            stage: stage.to_string(),
            row: Some(row),
        }),
        None => Ok(()),
    }
}

fn check_pair<T>(zl: &Array3<T>, zg: &Array3<T>, d: Option<usize>) -> Result<()> {
    let (n_img, _, dl) = zl.dim();
    let (ng, one, dg) = zg.dim();
    if ng != n_img || one != 1 || dg != dl || d.is_some_and(|d| d != dl) {
        return Err(Error::shape(
            "fuse",
            format!("Z_l is {:?}, Z_g is {:?}, latent width {d:?}", zl.shape(), zg.shape()),
        ));
    }
    Ok(())
}

fn flatten<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (a, b, c) = x.dim();
    x.to_owned().into_shape_with_order((a * b, c)).expect("contiguous")
}

fn unflatten<T: Scalar>(x: Array2<T>, rows: usize) -> Array3<T> {
    let (r, c) = x.dim();
    x.into_shape_with_order((rows, r / rows, c)).expect("contiguous")
}

/// Per-head logits `N × H × n` from projected queries `(N·n) × D` and keys `N × D`.
fn logits_from<T: Scalar>(q: &Array2<T>, k: &Array2<T>, n: usize, heads: usize, divisor: T) -> Array3<T> {
    let n_img = k.nrows();
    let dk = k.ncols() / heads;
    let mut out = Array3::zeros((n_img, heads, n));
    for i in 0..n_img {
        for h in 0..heads {
            let key = k.slice(s![i, h * dk..(h + 1) * dk]);
            for j in 0..n {
                let query = q.slice(s![i * n + j, h * dk..(h + 1) * dk]);
                out[[i, h, j]] = query.dot(&key) / divisor;
            }
        }
    }
    out
}

/// `M = Q Kᵀ / scale` per head: `N × H × n`.
pub fn attention_logits<T: Scalar>(zl: &Array3<T>, zg: &Array3<T>, params: &FusionParams<T>) -> Result<Array3<T>> {
    check_pair(zl, zg, Some(params.dim()))?;
    let n = zl.shape()[1];
    let q = flatten(zl).dot(&params.w_q);
    let k = zg.index_axis(Axis(1), 0).dot(&params.w_k);
    let divisor = T::lit(params.scale.divisor(n, params.d_head()));
    Ok(logits_from(&q, &k, n, params.heads, divisor))
}

/// Softmax over the concept axis (the last one) for every sample and head.
pub fn attention_normalize<T: Scalar>(logits: &Array3<T>) -> Array3<T> {
    let mut w = logits.clone();
    for mut lane in w.lanes_mut(Axis(2)) {
        let mut v = lane.to_vec();
        crate::nn::softmax_in_place(&mut v);
        lane.iter_mut().zip(v).for_each(|(d, s)| *d = s);
    }
    w
}

/// Everything the backward pass needs from one cross-attention forward.
pub struct FusionCache<T> {
    n_img: usize,
    n: usize,
    divisor: T,
    zl: Array2<T>,
    zg: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    weights: Array3<T>,
    heads_out: Array2<T>,
    mask: Option<Array2<T>>,
    ln: LayerNormCache<T>,
    ln_out: Array2<T>,
    hidden: Array2<T>,
    act: Array2<T>,
}

/// Cross-attention on flattened inputs: `zl` is `(N·n) × D`, `zg` is `N × D`.
/// Returns `O` as `(N·n) × D`.
pub fn fuse_rows<T: Scalar>(
    zl: &Array2<T>,
    zg: &Array2<T>,
    n: usize,
    params: &FusionParams<T>,
    mode: &mut Mode<'_>,
) -> Result<(Array2<T>, AttentionMap<T>, FusionCache<T>)> {
    let n_img = zg.nrows();
    let d = params.dim();
    if zl.nrows() != n_img * n || zl.ncols() != d || zg.ncols() != d {
        return Err(Error::shape(
            "fuse",
            format!("Z_l rows {:?}, Z_g {:?}, n = {n}, D = {d}", zl.dim(), zg.dim()),
        ));
    }
    let heads = params.heads;
    let dk = params.d_head();
    let divisor = T::lit(params.scale.divisor(n, dk));
    let q = zl.dot(&params.w_q);
    let k = zg.dot(&params.w_k);
    let v = zg.dot(&params.w_v);
    let logits = logits_from(&q, &k, n, heads, divisor);
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            stage: "attention logits".into(),
            row: None,
        });
    }
    let weights = attention_normalize(&logits);

    let mut heads_out = Array2::zeros((n_img * n, d));
    for i in 0..n_img {
        for h in 0..heads {
            let val = v.slice(s![i, h * dk..(h + 1) * dk]);
            for j in 0..n {
                let w = weights[[i, h, j]];
                heads_out
                    .slice_mut(s![i * n + j, h * dk..(h + 1) * dk])
                    .assign(&val.mapv(|x| x * w));
            }
        }
    }
    let mut inter = heads_out.dot(&params.w_proj);
    let mask = dropout_mask::<T>(inter.dim(), params.dropout, mode);
    apply_mask(&mut inter, mask.as_ref());
    for i in 0..n_img {
        let g = zg.row(i);
        for j in 0..n {
            let mut row = inter.row_mut(i * n + j);
            row += &g;
        }
    }
    check_stage(&inter, "fusion residual")?;

    let (ln_out, ln) = params.ln.forward(&inter);
    let hidden = params.mlp1.forward(&ln_out);
    let act = gelu(&hidden);
    let mut out = params.mlp2.forward(&act);
    out += &inter;
    check_stage(&out, "fusion output")?;

    let map = AttentionMap {
        weights: weights.clone(),
        logits,
    };
    let cache = FusionCache {
        n_img,
        n,
        divisor,
        zl: zl.clone(),
        zg: zg.clone(),
        q,
        k,
        v,
        weights,
        heads_out,
        mask,
        ln,
        ln_out,
        hidden,
        act,
    };
    Ok((out, map, cache))
}

/// Backward through [`fuse_rows`]. Accumulates into `grad` and returns
/// `(dZ_l, dZ_g)` in the flattened layouts.
pub fn fuse_backward<T: Scalar>(
    params: &FusionParams<T>,
    cache: &FusionCache<T>,
    d_out: &Array2<T>,
    grad: &mut FusionParams<T>,
) -> (Array2<T>, Array2<T>) {
    let (n_img, n) = (cache.n_img, cache.n);
    let heads = params.heads;
    let dk = params.d_head();

    let d_act = params.mlp2.backward(&cache.act, d_out, &mut grad.mlp2);
    let d_hidden = gelu_backward(&cache.hidden, &d_act);
    let d_ln_out = params.mlp1.backward(&cache.ln_out, &d_hidden, &mut grad.mlp1);
    let mut d_inter = params.ln.backward(&cache.ln, &d_ln_out, &mut grad.ln);
    d_inter += d_out;

    let mut d_zg = Array2::zeros(cache.zg.dim());
    for i in 0..n_img {
        let mut acc = d_zg.row_mut(i);
        for j in 0..n {
            acc += &d_inter.row(i * n + j);
        }
    }
    let mut d_proj_out = d_inter;
    apply_mask(&mut d_proj_out, cache.mask.as_ref());
    grad.w_proj += &cache.heads_out.t().dot(&d_proj_out);
    let d_heads = d_proj_out.dot(&params.w_proj.t());

    let mut d_q = Array2::zeros(cache.q.dim());
    let mut d_k = Array2::zeros(cache.k.dim());
    let mut d_v = Array2::zeros(cache.v.dim());
    let mut dw = vec![T::zero(); n];
    for i in 0..n_img {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let val = cache.v.slice(s![i, cols.clone()]);
            for (j, dwj) in dw.iter_mut().enumerate() {
                let dh = d_heads.slice(s![i * n + j, cols.clone()]);
                *dwj = dh.dot(&val);
                let w = cache.weights[[i, h, j]];
                let mut dv = d_v.slice_mut(s![i, cols.clone()]);
                dv.scaled_add(w, &dh);
            }
            let inner: T = (0..n).map(|j| cache.weights[[i, h, j]] * dw[j]).sum();
            let key = cache.k.slice(s![i, cols.clone()]).to_owned();
            for (j, &dwj) in dw.iter().enumerate() {
                let dlogit = cache.weights[[i, h, j]] * (dwj - inner) / cache.divisor;
                d_q.slice_mut(s![i * n + j, cols.clone()]).scaled_add(dlogit, &key);
                let query = cache.q.slice(s![i * n + j, cols.clone()]);
                d_k.slice_mut(s![i, cols.clone()]).scaled_add(dlogit, &query);
            }
        }
    }
    grad.w_q += &cache.zl.t().dot(&d_q);
    grad.w_k += &cache.zg.t().dot(&d_k);
    grad.w_v += &cache.zg.t().dot(&d_v);
    let d_zl = d_q.dot(&params.w_q.t());
    d_zg += &d_k.dot(&params.w_k.t());
    d_zg += &d_v.dot(&params.w_v.t());
    (d_zl, d_zg)
}

/// Cross-attentive fusion: `Z_l` is `N × n × D`, `Z_g` is `N × 1 × D`.
pub fn fuse<T: Scalar>(
    zl: &Array3<T>,
    zg: &Array3<T>,
    params: &FusionParams<T>,
    mode: &mut Mode<'_>,
) -> Result<(Array3<T>, AttentionMap<T>)> {
    check_pair(zl, zg, Some(params.dim()))?;
    let (n_img, n, _) = zl.dim();
    let zg2 = zg.index_axis(Axis(1), 0).to_owned();
    let (out, map, _) = fuse_rows(&flatten(zl), &zg2, n, params, mode)?;
    Ok((unflatten(out, n_img), map))
}

/// Parameter-free fusion baselines on flattened inputs. Returns
/// `(N·slots) × width`.
pub fn ablate_rows<T: Scalar>(variant: Variant, zl: &Array2<T>, zg: &Array2<T>, n: usize) -> Result<Array2<T>> {
    let n_img = zg.nrows();
    let d = zg.ncols();
    if zl.nrows() != n_img * n || zl.ncols() != d {
        return Err(Error::shape("fuse_ablation", format!("Z_l rows {:?}, Z_g {:?}, n = {n}", zl.dim(), zg.dim())));
    }
    let out = match variant {
        Variant::Ours => {
            return Err(Error::UnknownVariant("ours is not a parameter-free ablation".into()));
        }
        Variant::LocalOnly => zl.clone(),
        Variant::GlobalOnly => zg.clone(),
        Variant::Concat1 => {
            let mut out = Array2::zeros((n_img * (n + 1), d));
            for i in 0..n_img {
                out.slice_mut(s![i * (n + 1)..i * (n + 1) + n, ..])
                    .assign(&zl.slice(s![i * n..(i + 1) * n, ..]));
                out.row_mut(i * (n + 1) + n).assign(&zg.row(i));
            }
            out
        }
        Variant::Concat2 => {
            let mut out = Array2::zeros((n_img * n, 2 * d));
            for i in 0..n_img {
                for j in 0..n {
                    out.slice_mut(s![i * n + j, ..d]).assign(&zl.row(i * n + j));
                    out.slice_mut(s![i * n + j, d..]).assign(&zg.row(i));
                }
            }
            out
        }
        Variant::AvgSum => {
            let inv = T::one() / T::from_usize(n).unwrap();
            let mut out = zg.clone();
            for i in 0..n_img {
                let mean = zl.slice(s![i * n..(i + 1) * n, ..]).sum_axis(Axis(0)) * inv;
                let mut row = out.row_mut(i);
                row += &mean;
            }
            out
        }
    };
    Ok(out)
}

/// Gradients of [`ablate_rows`] with respect to `(Z_l, Z_g)`.
pub fn ablate_backward<T: Scalar>(variant: Variant, d_out: &Array2<T>, n_img: usize, n: usize, d: usize) -> (Array2<T>, Array2<T>) {
    let mut d_zl = Array2::zeros((n_img * n, d));
    let mut d_zg = Array2::zeros((n_img, d));
    match variant {
        Variant::Ours => unreachable!("ours has its own backward"),
        Variant::LocalOnly => d_zl.assign(d_out),
        Variant::GlobalOnly => d_zg.assign(d_out),
        Variant::Concat1 => {
            for i in 0..n_img {
                d_zl.slice_mut(s![i * n..(i + 1) * n, ..])
                    .assign(&d_out.slice(s![i * (n + 1)..i * (n + 1) + n, ..]));
                d_zg.row_mut(i).assign(&d_out.row(i * (n + 1) + n));
            }
        }
        Variant::Concat2 => {
            for i in 0..n_img {
                for j in 0..n {
                    d_zl.row_mut(i * n + j).assign(&d_out.slice(s![i * n + j, ..d]));
                    let mut g = d_zg.row_mut(i);
                    g += &d_out.slice(s![i * n + j, d..]);
                }
            }
        }
        Variant::AvgSum => {
            let inv = T::one() / T::from_usize(n).unwrap();
            for i in 0..n_img {
                let g = d_out.row(i);
                d_zg.row_mut(i).assign(&g);
                for j in 0..n {
                    d_zl.row_mut(i * n + j).assign(&g.mapv(|x| x * inv));
                }
            }
        }
    }
    (d_zl, d_zg)
}

/// Parameter-free fusion on `N × n × D` / `N × 1 × D` tensors.
pub fn fuse_ablation<T: Scalar>(variant: Variant, zl: &Array3<T>, zg: &Array3<T>) -> Result<Array3<T>> {
    check_pair(zl, zg, None)?;
    let (n_img, n, _) = zl.dim();
    let zg2 = zg.index_axis(Axis(1), 0).to_owned();
    let out = ablate_rows(variant, &flatten(zl), &zg2, n)?;
    Ok(unflatten(out, n_img))
}
