//! Top-1 concept explanations and their overlay files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::batch::PaddedDataset;
use crate::data::image::RgbImage;
use crate::data::rle::Rle;
use crate::data::{image_file_name, BundleSet};
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::mil::predict;
use crate::model::Model;
use crate::nn::Mode;

/// The concept that contributes most to the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopConcept {
    pub slot: usize,
    /// Index into the image's concept list.
    pub concept: usize,
    pub bbox: [f32; 4],
    pub mask: Rle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// The image has no real concepts.
    NoConcept,
    /// The variant pools over slots that are not concepts.
    NoConceptSlots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub patient_id: u32,
    pub image_id: u32,
    /// -1 when unlabelled.
    pub label: i32,
    pub predicted: usize,
    /// Softmax of the pooled logits.
    pub row_scores: Vec<f64>,
    /// `o_cam[slot, predicted]` for every classifier slot, padded included.
    pub column_scores: Vec<f64>,
    pub slot_valid: Vec<bool>,
    pub top1: Option<TopConcept>,
    pub fallback: Option<Fallback>,
    /// Padded slots were excluded from the top-1 search.
    pub valid_only: bool,
}

impl InterpretationRecord {
    pub fn correct(&self) -> bool {
        self.label >= 0 && self.label as usize == self.predicted
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Explains every row of `data` (built from `set`). Ties in the top-1 search
/// go to the lower slot.
pub fn interpret(model: &Model<f32>, set: &BundleSet, data: &PaddedDataset, batch_size: usize) -> Result<Vec<InterpretationRecord>> {
    let n = model.config.slots;
    let variant = model.config.variant;
    let concept_slots = match variant {
        Variant::Ours | Variant::Concat2 | Variant::LocalOnly | Variant::Concat1 => n,
        Variant::AvgSum | Variant::GlobalOnly => 0,
    };
    let lookup: std::collections::HashMap<(u32, u32), usize> = set
        .bundles
        .iter()
        .enumerate()
        .map(|(i, b)| ((b.patient_id, b.image_id), i))
        .collect();
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(data.len());
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.batch::<f32>(chunk);
        let out = model.forward(&batch, &mut Mode::Eval)?;
        let preds = predict(&out.topk.o_pred);
        for (r, &row) in chunk.iter().enumerate() {
            let c = preds[r];
            let column: Vec<f64> = (0..out.o_cam.shape()[1]).map(|j| out.o_cam[[r, j, c]] as f64).collect();
            let slot_valid: Vec<bool> = out.slot_valid.row(r).to_vec();
            let mut best: Option<usize> = None;
            for j in 0..concept_slots {
                if batch.valid[[r, j]] && best.is_none_or(|b| column[j] > column[b]) {
                    best = Some(j);
                }
            }
            let key = batch.provenance[r];
            let bundle_idx = *lookup
                .get(&key)
                .ok_or_else(|| Error::Config(format!("image {} of patient {} is not in the bundle set", key.1, key.0)))?;
            let bundle = &set.bundles[bundle_idx];
            let top1 = match best {
                Some(slot) => {
                    let ci = data.source[row][slot].expect("valid slot has a source concept");
                    let concept = &bundle.concepts[ci];
                    Some(TopConcept {
                        slot,
                        concept: ci,
                        bbox: concept.bbox,
                        mask: concept.mask.clone(),
                    })
                }
                None => None,
            };
            let fallback = match (&top1, concept_slots) {
                (Some(_), _) => None,
                (None, 0) => Some(Fallback::NoConceptSlots),
                (None, _) => Some(Fallback::NoConcept),
            };
            records.push(InterpretationRecord {
                patient_id: key.0,
                image_id: key.1,
                label: batch.labels[r],
                predicted: c,
                row_scores: softmax(&out.topk.o_pred.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>()),
                column_scores: column,
                slot_valid,
                top1,
                fallback,
                valid_only: true,
            });
        }
    }
    Ok(records)
}

/// Side-car written next to each overlay PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayInfo {
    pub image_id: u32,
    pub predicted: usize,
    pub bbox: Option<[f32; 4]>,
    pub row_scores: Vec<f64>,
    pub column_scores: Vec<f64>,
}

const BOX: [f32; 3] = [1.0, 0.9, 0.0];
const MASK: [f32; 3] = [0.0, 0.8, 1.0];

/// Draws the mask (tinted) and the bbox outline onto `image`.
pub fn draw_overlay(image: &mut RgbImage, top: &TopConcept) {
    if let Some(mask) = top.mask.decode(image.width, image.height) {
        for y in 0..image.height {
            for x in 0..image.width {
                if mask.get(x, y) {
                    let p = image.get(x, y);
                    image.set(x, y, std::array::from_fn(|c| 0.5 * p[c] + 0.5 * MASK[c]));
                }
            }
        }
    }
    let [x0, y0, x1, y1] = top.bbox.map(|v| v.max(0.0) as usize);
    let x1 = x1.min(image.width).max(x0 + 1).min(image.width);
    let y1 = y1.min(image.height).max(y0 + 1).min(image.height);
    if x0 >= image.width || y0 >= image.height {
        return;
    }
    for x in x0..x1 {
        image.set(x, y0, BOX);
        image.set(x, y1 - 1, BOX);
    }
    for y in y0..y1 {
        image.set(x0, y, BOX);
        image.set(x1 - 1, y, BOX);
    }
}

/// Writes `overlay_{id}.png` and `overlay_{id}.json` per record. Source images
/// are read from `image_dir` under their standard file names.
pub fn export_overlays(records: &[InterpretationRecord], image_dir: &Path, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in records {
        let src = image_dir.join(image_file_name(r.image_id));
        if !src.is_file() {
            return Err(Error::io(&src, std::io::Error::new(std::io::ErrorKind::NotFound, "missing image file")));
        }
        let mut image = RgbImage::load_png(&src)?;
        if let Some(top) = &r.top1 {
            draw_overlay(&mut image, top);
        }
        let stem = format!("overlay_{:05}", r.image_id);
        image.save_png(&out_dir.join(format!("{stem}.png")))?;
        let info = OverlayInfo {
            image_id: r.image_id,
            predicted: r.predicted,
            bbox: r.top1.as_ref().map(|t| t.bbox),
            row_scores: r.row_scores.clone(),
            column_scores: r.column_scores.clone(),
        };
        let path = out_dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&info).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Fraction of correctly classified records whose top-1 bbox overlaps the
/// ground-truth lesion box with IoU above `threshold`, and how many correct
/// records there were. Records without a lesion box are skipped.
pub fn localisation_rate(
    records: &[InterpretationRecord],
    lesion_bbox: impl Fn(u32) -> Option<[usize; 4]>,
    threshold: f32,
) -> (f64, usize) {
    let mut hits = 0;
    let mut total = 0;
    for r in records.iter().filter(|r| r.correct()) {
        let Some(gt) = lesion_bbox(r.image_id) else { continue };
        total += 1;
        if let Some(t) = &r.top1 {
            if crate::data::extract::bbox_iou(t.bbox, gt.map(|v| v as f32)) > threshold {
                hits += 1;
            }
        }
    }
    (if total == 0 { 0.0 } else { hits as f64 / total as f64 }, total)
}
