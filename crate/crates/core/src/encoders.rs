//! Global and local encoders producing `Z_g` (`N × 1 × D`) and `Z_l`
//! (`N × n × D`).

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch::FeatureBatch;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, join, Linear, TensorView, TensorViewMut};
use crate::scalar::Scalar;

/// What the global encoder receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GlobalInput {
    /// Precomputed feature of width `dim`, projected to `D`.
    Feature { dim: usize },
    /// Raw `side × side × 3` image: patch embedding to `embed_dim`, mean pool
    /// over patches, projection to `D`.
    Image { side: usize, patch: usize, embed_dim: usize },
}

impl GlobalInput {
    pub fn input_width(&self) -> usize {
        match *self {
            GlobalInput::Feature { dim } => dim,
            GlobalInput::Image { side, .. } => side * side * 3,
        }
    }
}

/// What the local encoder receives per concept slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalInput {
    /// Precomputed feature of width `dim`, refined by two pointwise layers.
    Feature { dim: usize },
    /// Raw `side × side × 3` crop through a two-layer conv stack: a
    /// non-overlapping `cell × cell` convolution to `channels`, then a
    /// convolution spanning the whole remaining map to `D`.
    Crop { side: usize, cell: usize, channels: usize },
}

impl LocalInput {
    pub fn input_width(&self) -> usize {
        match *self {
            LocalInput::Feature { dim } => dim,
            LocalInput::Crop { side, .. } => side * side * 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalEncoder<T> {
    Projection { proj: Linear<T> },
    Patches { side: usize, patch: usize, embed: Linear<T>, proj: Linear<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalEncoder<T> {
    Pointwise { l1: Linear<T>, l2: Linear<T> },
    Crops { side: usize, cell: usize, conv1: Linear<T>, conv2: Linear<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub global: GlobalEncoder<T>,
    pub local: LocalEncoder<T>,
}

pub struct GlobalCache<T> {
    /// Projection input: the raw feature, or the patch-mean image.
    x: Array2<T>,
    pooled: Option<Array2<T>>,
}

pub struct LocalCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(global: GlobalInput, local: LocalInput, d_model: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let global = match global {
            GlobalInput::Feature { dim } => GlobalEncoder::Projection {
                proj: Linear::init(dim, d_model, std, rng),
            },
            GlobalInput::Image { side, patch, embed_dim } => {
                if patch == 0 || side % patch != 0 {
                    return Err(Error::Config(format!("patch size {patch} must divide image side {side}")));
                }
                GlobalEncoder::Patches {
                    side,
                    patch,
                    embed: Linear::init(patch * patch * 3, embed_dim, std, rng),
                    proj: Linear::init(embed_dim, d_model, std, rng),
                }
            }
        };
        let local = match local {
            LocalInput::Feature { dim } => LocalEncoder::Pointwise {
                l1: Linear::init(dim, d_model, std, rng),
                l2: Linear::init(d_model, d_model, std, rng),
            },
            LocalInput::Crop { side, cell, channels } => {
                if cell == 0 || side % cell != 0 {
                    return Err(Error::Config(format!("cell size {cell} must divide crop side {side}")));
                }
                let cells = (side / cell) * (side / cell);
                LocalEncoder::Crops {
                    side,
                    cell,
                    conv1: Linear::init(cell * cell * 3, channels, std, rng),
                    conv2: Linear::init(cells * channels, d_model, std, rng),
                }
            }
        };
        Ok(Self { global, local })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.fan_in(), l.fan_out());
        Self {
            global: match &self.global {
                GlobalEncoder::Projection { proj } => GlobalEncoder::Projection { proj: z(proj) },
                GlobalEncoder::Patches { side, patch, embed, proj } => GlobalEncoder::Patches {
                    side: *side,
                    patch: *patch,
                    embed: z(embed),
                    proj: z(proj),
                },
            },
            local: match &self.local {
                LocalEncoder::Pointwise { l1, l2 } => LocalEncoder::Pointwise { l1: z(l1), l2: z(l2) },
                LocalEncoder::Crops { side, cell, conv1, conv2 } => LocalEncoder::Crops {
                    side: *side,
                    cell: *cell,
                    conv1: z(conv1),
                    conv2: z(conv2),
                },
            },
        }
    }

    pub fn d_model(&self) -> usize {
        match &self.local {
            LocalEncoder::Pointwise { l2, .. } => l2.fan_out(),
            LocalEncoder::Crops { conv2, .. } => conv2.fan_out(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            global: match &self.global {
                GlobalEncoder::Projection { proj } => GlobalEncoder::Projection { proj: proj.cast() },
                GlobalEncoder::Patches { side, patch, embed, proj } => GlobalEncoder::Patches {
                    side: *side,
                    patch: *patch,
                    embed: embed.cast(),
                    proj: proj.cast(),
                },
            },
            local: match &self.local {
                LocalEncoder::Pointwise { l1, l2 } => LocalEncoder::Pointwise { l1: l1.cast(), l2: l2.cast() },
                LocalEncoder::Crops { side, cell, conv1, conv2 } => LocalEncoder::Crops {
                    side: *side,
                    cell: *cell,
                    conv1: conv1.cast(),
                    conv2: conv2.cast(),
                },
            },
        }
    }

    pub(crate) fn push<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        let (g, l) = (join(prefix, "global"), join(prefix, "local"));
        match &self.global {
            GlobalEncoder::Projection { proj } => proj.push(&join(&g, "proj"), out),
            GlobalEncoder::Patches { embed, proj, .. } => {
                embed.push(&join(&g, "embed"), out);
                proj.push(&join(&g, "proj"), out);
            }
        }
        match &self.local {
            LocalEncoder::Pointwise { l1, l2 } => {
                l1.push(&join(&l, "l1"), out);
                l2.push(&join(&l, "l2"), out);
            }
            LocalEncoder::Crops { conv1, conv2, .. } => {
                conv1.push(&join(&l, "conv1"), out);
                conv2.push(&join(&l, "conv2"), out);
            }
        }
    }

    pub(crate) fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        let (g, l) = (join(prefix, "global"), join(prefix, "local"));
        match &mut self.global {
            GlobalEncoder::Projection { proj } => proj.push_mut(&join(&g, "proj"), out),
            GlobalEncoder::Patches { embed, proj, .. } => {
                embed.push_mut(&join(&g, "embed"), out);
                proj.push_mut(&join(&g, "proj"), out);
            }
        }
        match &mut self.local {
            LocalEncoder::Pointwise { l1, l2 } => {
                l1.push_mut(&join(&l, "l1"), out);
                l2.push_mut(&join(&l, "l2"), out);
            }
            LocalEncoder::Crops { conv1, conv2, .. } => {
                conv1.push_mut(&join(&l, "conv1"), out);
                conv2.push_mut(&join(&l, "conv2"), out);
            }
        }
    }
}

fn check_finite<T: Scalar>(x: ArrayView2<T>, stage: &str) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: stage.to_string(),
                row: Some(i),
            });
        }
    }
    Ok(())
}

/// Splits row-major `side × side × 3` images into non-overlapping
/// `patch × patch` patches, each flattened in `(y, x, channel)` order.
/// Returns `(rows · patches_per_image) × (patch² · 3)`.
pub fn patchify<T: Scalar>(images: ArrayView2<T>, side: usize, patch: usize) -> Array2<T> {
    let per_side = side / patch;
    let per_image = per_side * per_side;
    let width = patch * patch * 3;
    let mut out = Array2::zeros((images.nrows() * per_image, width));
    for (i, img) in images.rows().into_iter().enumerate() {
        for py in 0..per_side {
            for px in 0..per_side {
                let mut row = out.row_mut(i * per_image + py * per_side + px);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let base = ((py * patch + y) * side + px * patch + x) * 3;
                        for c in 0..3 {
                            row[k] = img[base + c];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean over each consecutive group of `group` rows.
fn group_mean<T: Scalar>(x: &Array2<T>, group: usize) -> Array2<T> {
    let n = x.nrows() / group;
    let inv = T::one() / T::from_usize(group).unwrap();
    let mut out = Array2::zeros((n, x.ncols()));
    for (i, mut o) in out.rows_mut().into_iter().enumerate() {
        for r in 0..group {
            o += &x.row(i * group + r);
        }
        o *= inv;
    }
    out
}

/// `N × G` global input to `N × D`.
pub fn encode_global_rows<T: Scalar>(x: &Array2<T>, params: &EncoderParams<T>) -> Result<(Array2<T>, GlobalCache<T>)> {
    check_finite(x.view(), "global encoder input")?;
    match &params.global {
        GlobalEncoder::Projection { proj } => {
            if x.ncols() != proj.fan_in() {
                return Err(Error::shape("encode_global", format!("input width {} != {}", x.ncols(), proj.fan_in())));
            }
            Ok((proj.forward(x), GlobalCache { x: x.clone(), pooled: None }))
        }
        GlobalEncoder::Patches { side, patch, embed, proj } => {
            if x.ncols() != side * side * 3 {
                return Err(Error::shape("encode_global", format!("input width {} != {}", x.ncols(), side * side * 3)));
            }
            let patches = patchify(x.view(), *side, *patch);
            let per_image = (side / patch) * (side / patch);
            // Embedding is affine, so pooling the patches first gives the
            // pooled embeddings.
            let mean_patch = group_mean(&patches, per_image);
            let pooled = embed.forward(&mean_patch);
            let z = proj.forward(&pooled);
            Ok((z, GlobalCache { x: mean_patch, pooled: Some(pooled) }))
        }
    }
}

pub fn encode_global_backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &GlobalCache<T>,
    dz: &Array2<T>,
    grad: &mut EncoderParams<T>,
) {
    match (&params.global, &mut grad.global) {
        (GlobalEncoder::Projection { proj }, GlobalEncoder::Projection { proj: gp }) => {
            proj.accumulate(&cache.x, dz, gp);
        }
        (GlobalEncoder::Patches { embed, proj, .. }, GlobalEncoder::Patches { embed: ge, proj: gp, .. }) => {
            let pooled = cache.pooled.as_ref().expect("patch cache");
            let dpooled = proj.backward(pooled, dz, gp);
            embed.accumulate(&cache.x, &dpooled, ge);
        }
        _ => unreachable!("gradient layout matches parameters"),
    }
}

/// `(N·n) × L` local input to `(N·n) × D`, applied independently per slot.
pub fn encode_local_rows<T: Scalar>(x: &Array2<T>, params: &EncoderParams<T>) -> Result<(Array2<T>, LocalCache<T>)> {
    check_finite(x.view(), "local encoder input")?;
    match &params.local {
        LocalEncoder::Pointwise { l1, l2 } => {
            if x.ncols() != l1.fan_in() {
                return Err(Error::shape("encode_local", format!("input width {} != {}", x.ncols(), l1.fan_in())));
            }
            let pre = l1.forward(x);
            let act = gelu(&pre);
            let z = l2.forward(&act);
            Ok((z, LocalCache { x: x.clone(), pre, act }))
        }
        LocalEncoder::Crops { side, cell, conv1, conv2 } => {
            if x.ncols() != side * side * 3 {
                return Err(Error::shape("encode_local", format!("input width {} != {}", x.ncols(), side * side * 3)));
            }
            let cells = patchify(x.view(), *side, *cell);
            let pre = conv1.forward(&cells);
            let act_cells = gelu(&pre);
            let rows = x.nrows();
            let act = act_cells
                .into_shape_with_order((rows, conv2.fan_in()))
                .expect("contiguous activations");
            let z = conv2.forward(&act);
            Ok((z, LocalCache { x: cells, pre, act }))
        }
    }
}

pub fn encode_local_backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &LocalCache<T>,
    dz: &Array2<T>,
    grad: &mut EncoderParams<T>,
) {
    match (&params.local, &mut grad.local) {
        (LocalEncoder::Pointwise { l1, l2 }, LocalEncoder::Pointwise { l1: g1, l2: g2 }) => {
            let dact = l2.backward(&cache.act, dz, g2);
            let dpre = gelu_backward(&cache.pre, &dact);
            l1.accumulate(&cache.x, &dpre, g1);
        }
        (LocalEncoder::Crops { conv1, conv2, .. }, LocalEncoder::Crops { conv1: g1, conv2: g2, .. }) => {
            let dact = conv2.backward(&cache.act, dz, g2);
            let dact_cells = dact
                .into_shape_with_order(cache.pre.raw_dim())
                .expect("contiguous gradients");
            let dpre = gelu_backward(&cache.pre, &dact_cells);
            conv1.accumulate(&cache.x, &dpre, g1);
        }
        _ => unreachable!("gradient layout matches parameters"),
    }
}

/// `Z_g` with its singleton token axis: `N × 1 × D`.
pub fn encode_global<T: Scalar>(batch: &FeatureBatch<T>, params: &EncoderParams<T>) -> Result<Array3<T>> {
    let (z, _) = encode_global_rows(&batch.z_g_in, params)?;
    Ok(z.insert_axis(Axis(1)))
}

/// `Z_l`: `N × n × D`.
pub fn encode_local<T: Scalar>(batch: &FeatureBatch<T>, params: &EncoderParams<T>) -> Result<Array3<T>> {
    let (n_img, n, l) = batch.z_l_in.dim();
    let flat = batch
        .z_l_in
        .to_owned()
        .into_shape_with_order((n_img * n, l))
        .expect("contiguous input");
    let (z, _) = encode_local_rows(&flat, params)?;
    let d = z.ncols();
    Ok(z.into_shape_with_order((n_img, n, d)).expect("contiguous output"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(n_img: usize, n: usize, g: usize, l: usize, seed: u64) -> FeatureBatch<f64> {
        let mut r = rng(seed);
        FeatureBatch {
            z_g_in: Array2::from_shape_simple_fn((n_img, g), || r.random_range(-1.0..1.0)),
            z_l_in: Array3::from_shape_simple_fn((n_img, n, l), || r.random_range(-1.0..1.0)),
            valid: Array2::from_elem((n_img, n), true),
            labels: vec![0; n_img],
            provenance: vec![(0, 0); n_img],
        }
    }

    #[test]
    fn shapes() {
        let p = EncoderParams::<f64>::init(
            GlobalInput::Feature { dim: 5 },
            LocalInput::Feature { dim: 5 },
            8,
            0.5,
            &mut rng(1),
        )
        .unwrap();
        let b = batch(2, 4, 5, 5, 2);
        assert_eq!(encode_global(&b, &p).unwrap().shape(), &[2, 1, 8]);
        assert_eq!(encode_local(&b, &p).unwrap().shape(), &[2, 4, 8]);
    }

    #[test]
    fn constant_image_pools_to_single_patch_embedding() {
        let side = 32;
        let patch = 16;
        let embed_dim = 6;
        let mut p = EncoderParams::<f64>::init(
            GlobalInput::Image { side, patch, embed_dim },
            LocalInput::Feature { dim: 3 },
            embed_dim,
            0.3,
            &mut rng(4),
        )
        .unwrap();
        if let GlobalEncoder::Patches { proj, .. } = &mut p.global {
            proj.w = Array2::eye(embed_dim);
            proj.b = Array1::zeros(embed_dim);
        }
        let mut img = Array2::zeros((1, side * side * 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = [0.2, -0.4, 0.9][i % 3];
        }
        let b = FeatureBatch {
            z_g_in: img.clone(),
            z_l_in: Array3::zeros((1, 1, 3)),
            valid: Array2::from_elem((1, 1), true),
            labels: vec![0],
            provenance: vec![(0, 0)],
        };
        let z = encode_global(&b, &p).unwrap();
        let GlobalEncoder::Patches { embed, .. } = &p.global else { unreachable!() };
        let one_patch = patchify(img.view(), side, patch).row(0).to_owned().insert_axis(Axis(0));
        let expect = embed.forward(&one_patch);
        for (a, e) in z.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn slot_permutation_permutes_rows() {
        let p = EncoderParams::<f64>::init(
            GlobalInput::Feature { dim: 4 },
            LocalInput::Feature { dim: 4 },
            6,
            0.5,
            &mut rng(9),
        )
        .unwrap();
        let b = batch(2, 5, 4, 4, 3);
        let perm = [3, 0, 4, 1, 2];
        let z = encode_local(&b, &p).unwrap();
        let zp = encode_local(&b.permute_slots(&perm), &p).unwrap();
        for i in 0..2 {
            for (j, &src) in perm.iter().enumerate() {
                assert_eq!(zp.slice(ndarray::s![i, j, ..]), z.slice(ndarray::s![i, src, ..]));
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = EncoderParams::<f64>::init(
            GlobalInput::Feature { dim: 4 },
            LocalInput::Feature { dim: 4 },
            6,
            0.5,
            &mut rng(9),
        )
        .unwrap()
        .zeros_like();
        let z = encode_local(&batch(2, 3, 4, 4, 1), &p).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_input_names_row() {
        let p = EncoderParams::<f64>::init(
            GlobalInput::Feature { dim: 4 },
            LocalInput::Feature { dim: 4 },
            6,
            0.5,
            &mut rng(9),
        )
        .unwrap();
        let mut b = batch(3, 2, 4, 4, 1);
        b.z_g_in[[2, 1]] = f64::NAN;
        match encode_global(&b, &p) {
            Err(Error::NonFinite { row, .. }) => assert_eq!(row, Some(2)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn crop_stack_shapes() {
        let p = EncoderParams::<f64>::init(
            GlobalInput::Feature { dim: 4 },
            LocalInput::Crop { side: 8, cell: 4, channels: 3 },
            5,
            0.5,
            &mut rng(2),
        )
        .unwrap();
        let b = batch(2, 3, 4, 8 * 8 * 3, 5);
        assert_eq!(encode_local(&b, &p).unwrap().shape(), &[2, 3, 5]);
    }
}
