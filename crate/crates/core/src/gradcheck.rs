//! Central finite-difference checks of the analytic gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch::FeatureBatch;
use crate::data::synth::stream;
use crate::encoders::{GlobalInput, LocalInput};
use crate::error::{Error, Result};
use crate::fusion::{AttentionScale, Variant};
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, ParamSet};

/// Which parameter tensors to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Encoders,
    Fusion,
    Classifier,
    All,
}

impl Module {
    pub fn selects(self, tensor: &str) -> bool {
        match self {
            Module::All => true,
            Module::Encoders => tensor.starts_with("encoder."),
            Module::Fusion => tensor.starts_with("fusion."),
            Module::Classifier => tensor.starts_with("classifier."),
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Encoders => "encoders",
            Module::Fusion => "fusion",
            Module::Classifier => "classifier",
            Module::All => "all",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoders" => Ok(Module::Encoders),
            "fusion" => Ok(Module::Fusion),
            "classifier" => Ok(Module::Classifier),
            "all" => Ok(Module::All),
            _ => Err(Error::Config(format!("unknown module {s:?}; expected encoders, fusion, classifier or all"))),
        }
    }
}

/// The small instance the checks run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub images: usize,
    pub slots: usize,
    pub d_model: usize,
    pub heads: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub k: usize,
    pub variant: Variant,
    /// Feed raw pixels through the patch and crop encoders instead of
    /// precomputed features.
    pub raw_inputs: bool,
    pub step: f64,
    pub tolerance: f64,
    /// Larger than the training init so every nonlinearity is exercised.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            images: 2,
            slots: 4,
            d_model: 8,
            heads: 2,
            classes: 3,
            input_dim: 5,
            k: 2,
            variant: Variant::Ours,
            raw_inputs: false,
            step: 1e-5,
            tolerance: 1e-4,
            init_std: 0.5,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn model_config(&self) -> ModelConfig {
        let (global_input, local_input) = if self.raw_inputs {
            (
                GlobalInput::Image {
                    side: 8,
                    patch: 4,
                    embed_dim: 6,
                },
                LocalInput::Crop {
                    side: 8,
                    cell: 4,
                    channels: 3,
                },
            )
        } else {
            (
                GlobalInput::Feature { dim: self.input_dim },
                LocalInput::Feature { dim: self.input_dim },
            )
        };
        ModelConfig {
            global_input,
            local_input,
            d_model: self.d_model,
            heads: self.heads,
            classes: self.classes,
            slots: self.slots,
            k: self.k,
            variant: self.variant,
            fusion_dropout: 0.1,
            classifier_dropout: 0.7,
            scale: AttentionScale::SqrtN,
            exclude_padded: false,
            init_std: self.init_std,
        }
    }

    /// A random batch with the last slot of every image padded.
    pub fn batch(&self) -> FeatureBatch<f64> {
        let cfg = self.model_config();
        let mut rng = stream(&[self.seed, 0x6C]);
        let g = cfg.global_input.input_width();
        let l = cfg.local_input.input_width();
        let n = self.slots;
        let mut z_l_in = Array3::from_shape_simple_fn((self.images, n, l), || rng.random_range(-1.0..1.0));
        for i in 0..self.images {
            for v in z_l_in.slice_mut(ndarray::s![i, n - 1, ..]) {
                *v *= 0.01;
            }
        }
        FeatureBatch {
            z_g_in: Array2::from_shape_simple_fn((self.images, g), || rng.random_range(-1.0..1.0)),
            z_l_in,
            valid: Array2::from_shape_fn((self.images, n), |(_, j)| j + 1 < n || n == 1),
            labels: (0..self.images).map(|i| (i % self.classes) as i32).collect(),
            provenance: (0..self.images).map(|i| (i as u32, i as u32)).collect(),
        }
    }
}

/// Gradients smaller than this are compared on an absolute scale: central
/// differences of an O(1) loss at `h = 1e-5` carry round-off near `1e-11`,
/// and some gradients are exactly zero (a shared shift of every query
/// leaves the softmax unchanged).
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_error <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// `Err(Error::GradCheck)` listing every tensor above tolerance.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let names = self
                .failures()
                .iter()
                .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_error))
                .collect();
            Err(Error::GradCheck(names))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let mark = if t.max_rel_error <= self.tolerance { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<32} n={:<5} max_rel_err={:.3e}", t.name, t.size, t.max_rel_error)?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of the eval-mode loss of
/// `model` on `batch`, for every tensor picked by `module`.
pub fn check_model(
    model: &Model<f64>,
    batch: &FeatureBatch<f64>,
    analytic: &Model<f64>,
    module: Module,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = model.views().into_iter().map(|t| t.name).collect();
    let grads: Vec<Vec<f64>> = analytic.views().into_iter().map(|t| t.data.to_vec()).collect();
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        if !module.selects(name) {
            continue;
        }
        let size = grads[ti].len();
        let mut worst = (0.0f64, 0usize);
        for e in 0..size {
            let orig = probe.views_mut()[ti].data[e];
            probe.views_mut()[ti].data[e] = orig + step;
            let up = probe.loss(batch)?;
            probe.views_mut()[ti].data[e] = orig - step;
            let down = probe.loss(batch)?;
            probe.views_mut()[ti].data[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(grads[ti][e], numeric);
            if !(err <= worst.0) {
                worst = (err, e);
            }
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            size,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    if tensors.is_empty() {
        return Err(Error::Config(format!("module {module} selects no tensors for variant {}", model.config.variant)));
    }
    Ok(GradCheckReport { tolerance, tensors })
}

/// Builds the instance described by `cfg` and checks every tensor in `module`.
pub fn grad_check(module: Module, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = Model::<f64>::init(cfg.model_config(), cfg.seed)?;
    let batch = cfg.batch();
    let (_, grads, _) = model.loss_and_grad(&batch, &mut Mode::Eval)?;
    check_model(&model, &batch, &grads, module, cfg.step, cfg.tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_with_quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Linear::<f64>::init(4, 3, 0.5, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let loss = |l: &Linear<f64>| 0.5 * l.forward(&x).mapv(|v| v * v).sum();
        let y = layer.forward(&x);
        let mut g = Linear::zeros(4, 3);
        layer.backward(&x, &y, &mut g);
        let w: Vec<f64> = layer.w.iter().copied().collect();
        let numeric = numeric_gradient(&w, 1e-5, |p| {
            let mut l = layer.clone();
            l.w.iter_mut().zip(p).for_each(|(d, &s)| *d = s);
            loss(&l)
        });
        for (a, n) in g.w.iter().zip(&numeric) {
            assert!(relative_error(*a, *n) <= 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let cfg = GradCheckConfig::default();
        let model = Model::<f64>::init(cfg.model_config(), 0).unwrap();
        let batch = cfg.batch();
        let (_, mut grads, _) = model.loss_and_grad(&batch, &mut Mode::Eval).unwrap();
        if let Some(f) = grads.fusion.as_mut() {
            f.w_proj *= 1.01;
        }
        let report = check_model(&model, &batch, &grads, Module::Fusion, 1e-5, 1e-4).unwrap();
        let failed: Vec<&str> = report.failures().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec!["fusion.w_proj"]);
        assert!(matches!(report.into_result(), Err(Error::GradCheck(v)) if v.len() == 1));
    }

    #[test]
    fn module_parsing() {
        for m in [Module::Encoders, Module::Fusion, Module::Classifier, Module::All] {
            assert_eq!(m.to_string().parse::<Module>().unwrap(), m);
        }
        assert!("mlp".parse::<Module>().is_err());
    }

    #[test]
    fn ablation_without_fusion_rejects_fusion_selector() {
        let cfg = GradCheckConfig {
            variant: Variant::Concat1,
            ..GradCheckConfig::default()
        };
        assert!(grad_check(Module::Fusion, &cfg).is_err());
    }
}
