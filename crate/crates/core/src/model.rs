//! The full network: encoders, fusion (or an ablation), classifier, top-k.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::batch::FeatureBatch;
use crate::data::synth::stream;
use crate::encoders::{
    encode_global_backward, encode_global_rows, encode_local_backward, encode_local_rows, EncoderParams, GlobalInput,
    LocalInput,
};
use crate::error::{Error, Result};
use crate::fusion::{ablate_backward, ablate_rows, fuse_backward, fuse_rows, AttentionMap, AttentionScale, FusionParams, Variant};
use crate::mil::{classify_backward, classify_rows, mil_loss, predict, topk_backward, topk_pool, ClassifierParams, TopK};
use crate::nn::{Mode, ParamSet, TensorView, TensorViewMut};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub global_input: GlobalInput,
    pub local_input: LocalInput,
    pub d_model: usize,
    pub heads: usize,
    pub classes: usize,
    /// Concept slots per image (`n`).
    pub slots: usize,
    pub k: usize,
    pub variant: Variant,
    pub fusion_dropout: f64,
    pub classifier_dropout: f64,
    #[serde(default)]
    pub scale: AttentionScale,
    /// Rank padded slots last in top-k selection.
    #[serde(default)]
    pub exclude_padded: bool,
    pub init_std: f64,
}

impl ModelConfig {
    /// Defaults for precomputed features of width `dim`.
    pub fn for_features(dim: usize, classes: usize) -> Self {
        Self {
            global_input: GlobalInput::Feature { dim },
            local_input: LocalInput::Feature { dim },
            d_model: 256,
            heads: 8,
            classes,
            slots: 30,
            k: 5,
            variant: Variant::Ours,
            fusion_dropout: 0.1,
            classifier_dropout: 0.7,
            scale: AttentionScale::SqrtN,
            exclude_padded: false,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.slots == 0 {
            return bad("slots must be >= 1".into());
        }
        if self.k == 0 || self.k > self.slots {
            return Err(Error::TopKRange {
                k: self.k,
                slots: self.slots,
            });
        }
        for (name, p) in [("fusion_dropout", self.fusion_dropout), ("classifier_dropout", self.classifier_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    /// `k` as applied to the classifier slots; single-slot ablations pool
    /// their only slot.
    pub fn effective_k(&self) -> usize {
        self.k.min(self.variant.slots(self.slots))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoders: EncoderParams<T>,
    /// Present only for [`Variant::Ours`].
    pub fusion: Option<FusionParams<T>>,
    pub classifier: ClassifierParams<T>,
}

/// Forward outputs for one batch.
#[derive(Debug, Clone)]
pub struct Output<T> {
    /// `N × slots × C`
    pub o_cam: Array3<T>,
    pub topk: TopK<T>,
    pub attention: Option<AttentionMap<T>>,
    /// `N × slots`; false on classifier slots that hold padding.
    pub slot_valid: Array2<bool>,
}

impl<T: Scalar> Output<T> {
    pub fn predictions(&self) -> Vec<usize> {
        predict(&self.topk.o_pred)
    }
}

enum FuseCache<T> {
    Attention(crate::fusion::FusionCache<T>),
    Ablation,
}

struct Caches<T> {
    global: crate::encoders::GlobalCache<T>,
    local: crate::encoders::LocalCache<T>,
    fuse: FuseCache<T>,
    classifier: crate::mil::ClassifierCache<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(&[seed, 0x1417]);
        let std = config.init_std;
        let encoders = EncoderParams::init(config.global_input, config.local_input, config.d_model, std, &mut rng)?;
        let fusion = match config.variant {
            Variant::Ours => Some(FusionParams::init(
                config.d_model,
                config.heads,
                config.fusion_dropout,
                config.scale,
                std,
                &mut rng,
            )?),
            _ => None,
        };
        let classifier = ClassifierParams::init(
            config.variant.width(config.d_model),
            config.d_model,
            config.classes,
            config.classifier_dropout,
            std,
            &mut rng,
        )?;
        Ok(Self {
            config,
            encoders,
            fusion,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoders: self.encoders.zeros_like(),
            fusion: self.fusion.as_ref().map(FusionParams::zeros_like),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoders: self.encoders.cast(),
            fusion: self.fusion.as_ref().map(FusionParams::cast),
            classifier: self.classifier.cast(),
        }
    }

    fn check_batch(&self, batch: &FeatureBatch<T>) -> Result<()> {
        let cfg = &self.config;
        let (n_img, n, l) = batch.z_l_in.dim();
        if n != cfg.slots {
            return Err(Error::shape("model", format!("batch has {n} concept slots, model expects {}", cfg.slots)));
        }
        if batch.z_g_in.nrows() != n_img || batch.valid.dim() != (n_img, n) || batch.labels.len() != n_img {
            return Err(Error::shape("model", "batch components disagree on the image count"));
        }
        if l != cfg.local_input.input_width() || batch.z_g_in.ncols() != cfg.global_input.input_width() {
            return Err(Error::shape(
                "model",
                format!(
                    "input widths global {} / local {l}, model expects {} / {}",
                    batch.z_g_in.ncols(),
                    cfg.global_input.input_width(),
                    cfg.local_input.input_width()
                ),
            ));
        }
        if n_img == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(())
    }

    fn slot_valid(&self, valid: &Array2<bool>) -> Array2<bool> {
        let n_img = valid.nrows();
        match self.config.variant {
            Variant::Ours | Variant::Concat2 | Variant::LocalOnly => valid.clone(),
            Variant::Concat1 => {
                let mut out = Array2::from_elem((n_img, valid.ncols() + 1), true);
                out.slice_mut(ndarray::s![.., ..valid.ncols()]).assign(valid);
                out
            }
            Variant::AvgSum | Variant::GlobalOnly => Array2::from_elem((n_img, 1), true),
        }
    }

    fn run(&self, batch: &FeatureBatch<T>, mode: &mut Mode<'_>) -> Result<(Output<T>, Caches<T>)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (n_img, n, l) = batch.z_l_in.dim();
        let flat_local = batch.z_l_in.to_owned().into_shape_with_order((n_img * n, l)).expect("contiguous");
        let (zg, global) = encode_global_rows(&batch.z_g_in, &self.encoders)?;
        let (zl, local) = encode_local_rows(&flat_local, &self.encoders)?;

        let (fused, attention, fuse) = match (&self.fusion, cfg.variant) {
            (Some(p), Variant::Ours) => {
                let (o, map, cache) = fuse_rows(&zl, &zg, n, p, mode)?;
                (o, Some(map), FuseCache::Attention(cache))
            }
            (None, v) if v != Variant::Ours => (ablate_rows(v, &zl, &zg, n)?, None, FuseCache::Ablation),
            _ => return Err(Error::Config("fusion parameters do not match the variant".into())),
        };
        let (cam, classifier) = classify_rows(&fused, &self.classifier, mode)?;
        let slots = cfg.variant.slots(n);
        let o_cam = cam.into_shape_with_order((n_img, slots, cfg.classes)).expect("contiguous");
        let slot_valid = self.slot_valid(&batch.valid);
        let eligible = cfg.exclude_padded.then_some(&slot_valid);
        let topk = topk_pool(&o_cam, cfg.effective_k(), eligible)?;
        let out = Output {
            o_cam,
            topk,
            attention,
            slot_valid,
        };
        Ok((
            out,
            Caches {
                global,
                local,
                fuse,
                classifier,
            },
        ))
    }

    pub fn forward(&self, batch: &FeatureBatch<T>, mode: &mut Mode<'_>) -> Result<Output<T>> {
        Ok(self.run(batch, mode)?.0)
    }

    /// Mean loss over the batch and the gradient of every parameter.
    pub fn loss_and_grad(&self, batch: &FeatureBatch<T>, mode: &mut Mode<'_>) -> Result<(T, Model<T>, Output<T>)> {
        let (out, caches) = self.run(batch, mode)?;
        let (loss, d_pred) = mil_loss(&out.topk.o_pred, &batch.labels)?;
        let mut grad = self.zeros_like();
        let (n_img, n, _) = batch.z_l_in.dim();
        let slots = out.o_cam.shape()[1];
        let d_cam = topk_backward(&out.topk, &d_pred, slots);
        let d_cam = d_cam.into_shape_with_order((n_img * slots, self.config.classes)).expect("contiguous");
        let d_fused = classify_backward(&self.classifier, &caches.classifier, &d_cam, &mut grad.classifier);
        let (d_zl, d_zg) = match (&caches.fuse, &self.fusion, grad.fusion.as_mut()) {
            (FuseCache::Attention(cache), Some(p), Some(g)) => fuse_backward(p, cache, &d_fused, g),
            (FuseCache::Ablation, None, None) => {
                ablate_backward(self.config.variant, &d_fused, n_img, n, self.config.d_model)
            }
            _ => unreachable!("fusion caches follow the variant"),
        };
        encode_global_backward(&self.encoders, &caches.global, &d_zg, &mut grad.encoders);
        encode_local_backward(&self.encoders, &caches.local, &d_zl, &mut grad.encoders);
        Ok((loss, grad, out))
    }

    /// Loss only, evaluated without dropout.
    pub fn loss(&self, batch: &FeatureBatch<T>) -> Result<T> {
        let out = self.forward(batch, &mut Mode::Eval)?;
        Ok(mil_loss(&out.topk.o_pred, &batch.labels)?.0)
    }
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorView<'a, T>>) {
        let p = |s: &str| crate::nn::join(prefix, s);
        self.encoders.push(&p("encoder"), out);
        if let Some(f) = &self.fusion {
            f.push(&p("fusion"), out);
        }
        self.classifier.push(&p("classifier"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorViewMut<'a, T>>) {
        let p = |s: &str| crate::nn::join(prefix, s);
        self.encoders.push_mut(&p("encoder"), out);
        if let Some(f) = &mut self.fusion {
            f.push_mut(&p("fusion"), out);
        }
        self.classifier.push_mut(&p("classifier"), out);
    }
}

/// Fraction of rows whose prediction equals the label.
pub fn accuracy(pred: &[usize], labels: &[i32]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(&p, &y)| p as i32 == y).count();
    hits as f64 / pred.len() as f64
}

/// Splits `N × H × n` attention weights into per-sample rows averaged over heads.
pub fn head_mean<T: Scalar>(weights: &Array3<T>) -> Array2<T> {
    weights.mean_axis(Axis(1)).expect("at least one head")
}
