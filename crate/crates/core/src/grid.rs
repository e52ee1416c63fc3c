//! Runs every (variant, ratio, k, seed) combination and tabulates results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::batch::PaddedDataset;
use crate::data::split::split_by_patient;
use crate::data::BundleSet;
use crate::encoders::encode_global_rows;
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::metrics::{compute_metrics, Averaging, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::train::{evaluate_outputs, train, EpochLog, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub variants: Vec<Variant>,
    pub ratios: Vec<f64>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub averaging: Averaging,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Ours, Variant::GlobalOnly],
            ratios: vec![0.5],
            k_values: vec![5],
            seeds: vec![0],
            averaging: Averaging::Macro,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.ratios.is_empty() || self.k_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid lists must all be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellKey {
    pub variant: Variant,
    pub ratio: f64,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub metrics: MetricsReport,
    pub logs: Vec<EpochLog>,
    pub model: Model<f32>,
    /// Validation predictions in validation-set order.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    /// `Err` holds the failure message; the grid continues past it.
    pub outcome: std::result::Result<CellOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<CellResult>,
}

/// The split and padded datasets for one (ratio, seed).
pub struct SplitData {
    pub train: PaddedDataset,
    pub val: PaddedDataset,
    /// Indices into the bundle set, in validation-set order.
    pub val_indices: Vec<usize>,
}

pub fn prepare_split(set: &BundleSet, slots: usize, ratio: f64, train_cfg: &TrainConfig, seed: u64) -> Result<SplitData> {
    let split = split_by_patient(&set.patient_ids(), ratio, seed)?;
    Ok(SplitData {
        train: PaddedDataset::build(set, &split.train, slots, train_cfg.pad_sigma, seed)?,
        val: PaddedDataset::build(set, &split.val, slots, train_cfg.pad_sigma, seed)?,
        val_indices: split.val,
    })
}

/// Trains one cell and evaluates its best snapshot on the validation split.
pub fn run_cell(data: &SplitData, model_cfg: &ModelConfig, train_cfg: &TrainConfig, averaging: Averaging) -> Result<CellOutcome> {
    let state = TrainState::new(model_cfg.clone(), train_cfg.seed)?;
    let (state, logs) = train(state, train_cfg, &data.train, &data.val, |_, _| Ok(()))?;
    let predictions: Vec<usize> = evaluate_outputs(&state.best, &data.val, train_cfg.eval_batch_size)?
        .iter()
        .flat_map(|o| o.predictions())
        .collect();
    let truth: Vec<usize> = data.val.labels.iter().map(|&l| l as usize).collect();
    let metrics = compute_metrics(&truth, &predictions, model_cfg.classes, averaging)?;
    Ok(CellOutcome {
        metrics,
        logs,
        model: state.best,
        predictions,
    })
}

/// Trains and evaluates every combination. `progress` is called after each
/// cell. Failures are recorded per cell.
pub fn run_grid(
    set: &BundleSet,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &GridConfig,
    mut progress: impl FnMut(&CellResult),
) -> Result<GridResult> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &ratio in &grid.ratios {
        for &seed in &grid.seeds {
            let train_cfg = TrainConfig {
                seed,
                train_ratio: ratio,
                ..base_train.clone()
            };
            let data = prepare_split(set, base_model.slots, ratio, &train_cfg, seed);
            for &variant in &grid.variants {
                for &k in &grid.k_values {
                    let key = CellKey { variant, ratio, k, seed };
                    let model_cfg = ModelConfig {
                        variant,
                        k,
                        ..base_model.clone()
                    };
                    let outcome = match &data {
                        Ok(d) => run_cell(d, &model_cfg, &train_cfg, grid.averaging).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    let cell = CellResult { key, outcome };
                    progress(&cell);
                    cells.push(cell);
                }
            }
        }
    }
    Ok(GridResult { cells })
}

pub const CSV_HEADER: &str = "variant,ratio,k,seed,precision,recall,f1,accuracy,status";

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let k = &c.key;
            let _ = write!(out, "{},{},{},{},", k.variant, k.ratio, k.k, k.seed);
            match &c.outcome {
                Ok(o) => {
                    let m = &o.metrics;
                    let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.6},ok", m.precision, m.recall, m.f1, m.accuracy);
                }
                Err(e) => {
                    let msg: String = e.chars().map(|ch| if ch == ',' || ch == '\n' { ';' } else { ch }).collect();
                    let _ = writeln!(out, ",,,,failed: {msg}");
                }
            }
        }
        out
    }

    /// Confusion matrix per successful cell.
    pub fn confusion_json(&self) -> serde_json::Value {
        let cells: Vec<serde_json::Value> = self
            .cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().ok().map(|o| {
                    serde_json::json!({
                        "variant": c.key.variant,
                        "ratio": c.key.ratio,
                        "k": c.key.k,
                        "seed": c.key.seed,
                        "confusion": o.metrics.confusion,
                    })
                })
            })
            .collect();
        serde_json::Value::Array(cells)
    }

    /// Per-class accuracy for each (variant, ratio, k), averaged over seeds.
    pub fn class_accuracy_json(&self) -> serde_json::Value {
        let mut groups: BTreeMap<(Variant, String, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for c in &self.cells {
            if let Ok(o) = &c.outcome {
                groups
                    .entry((c.key.variant, format!("{}", c.key.ratio), c.key.k))
                    .or_default()
                    .push(o.metrics.class_accuracy());
            }
        }
        let rows: Vec<serde_json::Value> = groups
            .into_iter()
            .map(|((variant, ratio, k), runs)| {
                let classes = runs[0].len();
                let mean: Vec<f64> = (0..classes)
                    .map(|c| runs.iter().map(|r| r[c]).sum::<f64>() / runs.len() as f64)
                    .collect();
                serde_json::json!({
                    "variant": variant,
                    "ratio": ratio.parse::<f64>().unwrap_or(f64::NAN),
                    "k": k,
                    "seeds": runs.len(),
                    "class_accuracy": mean,
                })
            })
            .collect();
        serde_json::Value::Array(rows)
    }

    /// Mean accuracy over seeds for each variant (all ratios and k pooled).
    pub fn mean_accuracy(&self, variant: Variant) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.key.variant == variant)
            .filter_map(|c| c.outcome.as_ref().ok().map(|o| o.metrics.accuracy))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// One JSON line per validation image: ids, label, prediction, the global
/// latent `Z_g` and the pooled logits, for external embedding tools.
pub fn feature_dump(model: &Model<f32>, data: &SplitData, batch_size: usize) -> Result<String> {
    let mut out = String::new();
    let rows: Vec<usize> = (0..data.val.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.val.batch::<f32>(chunk);
        let (zg, _) = encode_global_rows(&batch.z_g_in, &model.encoders)?;
        let output = model.forward(&batch, &mut crate::nn::Mode::Eval)?;
        let preds = output.predictions();
        for (r, _) in chunk.iter().enumerate() {
            let (patient_id, image_id) = batch.provenance[r];
            let line = serde_json::json!({
                "patient_id": patient_id,
                "image_id": image_id,
                "label": batch.labels[r],
                "pred": preds[r],
                "z_g": zg.row(r).to_vec(),
                "o_pred": output.topk.o_pred.row(r).to_vec(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_lists_rejected() {
        let g = GridConfig {
            seeds: vec![],
            ..GridConfig::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn csv_marks_failures() {
        let r = GridResult {
            cells: vec![CellResult {
                key: CellKey {
                    variant: Variant::Concat1,
                    ratio: 0.5,
                    k: 2,
                    seed: 1,
                },
                outcome: Err("bad, very bad".into()),
            }],
        };
        let csv = r.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "concat1,0.5,2,1,,,,,failed: bad; very bad");
        assert_eq!(r.mean_accuracy(Variant::Concat1), None);
    }
}
