//! Browser front end for `cafusion`. [`Session`] holds all state and is
//! plain Rust; [`Demo`] wraps it for JavaScript.

use cafusion::data::extract::ExtractorConfig;
use cafusion::data::{extract_dataset, BundleSet};
use cafusion::data::image::RgbImage;
use cafusion::data::synth::{generate_synthetic, SynthSpec, SyntheticSample};
use cafusion::fusion::Variant;
use cafusion::grid::{prepare_split, SplitData};
use cafusion::interpret::{draw_overlay, interpret, InterpretationRecord};
use cafusion::model::ModelConfig;
use cafusion::train::{train, EpochLog, TrainConfig, TrainState};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] cafusion::Error),
    #[error("validation row {row} out of range (have {len})")]
    Row { row: usize, len: usize },
    #[error("{0} must be between {1} and {2}")]
    Range(&'static str, usize, usize),
}

pub type Result<T> = std::result::Result<T, DemoError>;

pub const MAX_PATIENTS: usize = 40;
pub const MAX_EPOCHS: usize = 50;

/// Explanation of one validation image, as sent to the page.
#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub image_id: u32,
    pub label: i32,
    pub predicted: usize,
    pub class_probs: Vec<f64>,
    /// Per-concept score for the predicted class; padded slots are omitted.
    pub concepts: Vec<ConceptScore>,
    pub top_bbox: Option<[f32; 4]>,
    pub lesion_bbox: [usize; 4],
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptScore {
    pub slot: usize,
    pub score: f64,
}

pub struct Session {
    samples: Vec<SyntheticSample>,
    set: BundleSet,
    split: SplitData,
    train_cfg: TrainConfig,
    state: TrainState,
    logs: Vec<EpochLog>,
}

impl Session {
    pub fn new(seed: u64, patients_per_class: usize) -> Result<Self> {
        if !(2..=MAX_PATIENTS).contains(&patients_per_class) {
            return Err(DemoError::Range("patients per class", 2, MAX_PATIENTS));
        }
        let spec = SynthSpec {
            num_classes: 3,
            patients_per_class,
            image_size: 96,
            seed,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec)?;
        let set = extract_dataset(&ds, &ExtractorConfig::default());
        let model = ModelConfig {
            d_model: 32,
            heads: 4,
            slots: 8,
            k: 2,
            variant: Variant::Ours,
            exclude_padded: true,
            ..ModelConfig::for_features(set.global_dim(), set.num_classes())
        };
        let train_cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            eval_batch_size: 64,
            epochs: 0,
            seed,
            ..TrainConfig::default()
        };
        let split = prepare_split(&set, model.slots, train_cfg.train_ratio, &train_cfg, seed)?;
        let state = TrainState::new(model, seed)?;
        Ok(Self {
            samples: ds.samples,
            set,
            split,
            train_cfg,
            state,
            logs: Vec::new(),
        })
    }

    pub fn val_len(&self) -> usize {
        self.split.val.len()
    }

    pub fn train_len(&self) -> usize {
        self.split.train.len()
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    /// Runs `epochs` more epochs and returns their logs.
    pub fn train(&mut self, epochs: usize) -> Result<Vec<EpochLog>> {
        if !(1..=MAX_EPOCHS).contains(&epochs) {
            return Err(DemoError::Range("epochs", 1, MAX_EPOCHS));
        }
        let cfg = TrainConfig {
            epochs: self.state.epoch + epochs,
            ..self.train_cfg.clone()
        };
        let state = self.state.clone();
        let (state, logs) = train(state, &cfg, &self.split.train, &self.split.val, |_, _| Ok(()))?;
        self.state = state;
        self.logs.extend(logs.iter().cloned());
        Ok(logs)
    }

    fn record(&self, row: usize) -> Result<InterpretationRecord> {
        let row = self.check(row)?;
        let records = interpret(&self.state.best, &self.set, &self.split.val, self.train_cfg.eval_batch_size)?;
        Ok(records.into_iter().nth(row).expect("one record per row"))
    }

    fn sample(&self, row: usize) -> &SyntheticSample {
        &self.samples[self.split.val_indices[row]]
    }

    /// Explains validation image `row` with the best snapshot so far.
    pub fn explain(&self, row: usize) -> Result<Explanation> {
        let rec = self.record(row)?;
        let concepts = rec
            .column_scores
            .iter()
            .zip(&rec.slot_valid)
            .enumerate()
            .filter(|(_, (_, &v))| v)
            .map(|(slot, (&score, _))| ConceptScore { slot, score })
            .collect();
        Ok(Explanation {
            image_id: rec.image_id,
            label: rec.label,
            predicted: rec.predicted,
            class_probs: rec.row_scores,
            concepts,
            top_bbox: rec.top1.as_ref().map(|t| t.bbox),
            lesion_bbox: self.sample(row).lesion_bbox,
        })
    }

    /// RGBA pixels of validation image `row`, with the top concept drawn on
    /// when `overlay` is set.
    pub fn image_rgba(&self, row: usize, overlay: bool) -> Result<Vec<u8>> {
        let mut img: RgbImage = self.sample(self.check(row)?).image.clone();
        if overlay {
            if let Some(top) = self.record(row)?.top1 {
                draw_overlay(&mut img, &top);
            }
        }
        Ok(img
            .data
            .chunks_exact(3)
            .flat_map(|p| [q(p[0]), q(p[1]), q(p[2]), 255])
            .collect())
    }

    pub fn image_side(&self) -> usize {
        self.samples.first().map_or(0, |s| s.image.width)
    }

    fn check(&self, row: usize) -> Result<usize> {
        let len = self.val_len();
        if row < len {
            Ok(row)
        } else {
            Err(DemoError::Row { row, len })
        }
    }
}

fn q(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, patients_per_class: u32) -> std::result::Result<Demo, JsError> {
        Session::new(seed as u64, patients_per_class as usize).map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = valCount)]
    pub fn val_count(&self) -> usize {
        self.0.val_len()
    }

    #[wasm_bindgen(js_name = imageSide)]
    pub fn image_side(&self) -> usize {
        self.0.image_side()
    }

    /// JSON array of epoch logs.
    pub fn train(&mut self, epochs: u32) -> std::result::Result<String, JsError> {
        let logs = self.0.train(epochs as usize).map_err(js)?;
        Ok(serde_json::to_string(&logs).expect("logs serialise"))
    }

    /// JSON explanation of one validation image.
    pub fn explain(&self, row: usize) -> std::result::Result<String, JsError> {
        let e = self.0.explain(row).map_err(js)?;
        Ok(serde_json::to_string(&e).expect("explanation serialises"))
    }

    pub fn pixels(&self, row: usize, overlay: bool) -> std::result::Result<Vec<u8>, JsError> {
        self.0.image_rgba(row, overlay).map_err(js)
    }
}
