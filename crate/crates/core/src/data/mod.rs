//! Synthetic data, concept extraction, padding, splitting and the bundle file.

pub mod batch;
pub mod bundle_io;
pub mod extract;
pub mod image;
pub mod rle;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use extract::{extract_bundle, ConceptBundle, ExtractorConfig, FeatureKind};
use synth::SyntheticDataset;

/// Bundles that share one feature layout and image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSet {
    pub kind: FeatureKind,
    pub grid_height: usize,
    pub grid_width: usize,
    pub bundles: Vec<ConceptBundle>,
}

impl BundleSet {
    pub fn global_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Descriptor { .. } => self.kind.dim(),
            FeatureKind::RawCrop { .. } => self.grid_height * self.grid_width * 3,
        }
    }

    pub fn local_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Descriptor { .. } => self.kind.dim(),
            FeatureKind::RawCrop { crop } => crop * crop * 3,
        }
    }

    pub fn patient_ids(&self) -> Vec<u32> {
        self.bundles.iter().map(|b| b.patient_id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.bundles.iter().map(|b| b.label.max(0) as usize + 1).max().unwrap_or(0)
    }

    pub fn max_concepts(&self) -> usize {
        self.bundles.iter().map(|b| b.n_real()).max().unwrap_or(0)
    }

    /// Every bundle must match the declared widths and grid.
    pub fn check_consistent(&self) -> Result<()> {
        let (g, l) = (self.global_dim(), self.local_dim());
        let cells = self.grid_height * self.grid_width;
        for b in &self.bundles {
            if b.global_source.len() != g {
                return Err(Error::shape(
                    "bundle set",
                    format!("image {}: global source has {} values, expected {g}", b.image_id, b.global_source.len()),
                ));
            }
            for (j, c) in b.concepts.iter().enumerate() {
                if c.feature.len() != l {
                    return Err(Error::shape(
                        "bundle set",
                        format!("image {} concept {j}: {} features, expected {l}", b.image_id, c.feature.len()),
                    ));
                }
                if c.mask.len() != cells {
                    return Err(Error::shape(
                        "bundle set",
                        format!("image {} concept {j}: mask covers {} cells, grid has {cells}", b.image_id, c.mask.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Groundtruth kept next to a synthetic bundle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub patient_id: u32,
    pub image_id: u32,
    pub label: i32,
    pub file: String,
    pub lesion_bbox: Option<[usize; 4]>,
}

pub fn image_file_name(image_id: u32) -> String {
    format!("img_{image_id:05}.png")
}

/// Runs the extractor over every synthetic image.
pub fn extract_dataset(ds: &SyntheticDataset, cfg: &ExtractorConfig) -> BundleSet {
    let size = ds.spec.image_size;
    let bundles = ds
        .samples
        .iter()
        .map(|s| extract_bundle(&s.image, cfg, s.patient_id, s.image_id, s.label as i32))
        .collect();
    BundleSet {
        kind: cfg.features,
        grid_height: size,
        grid_width: size,
        bundles,
    }
}

pub fn synthetic_meta(ds: &SyntheticDataset) -> Vec<ImageMeta> {
    ds.samples
        .iter()
        .map(|s| ImageMeta {
            patient_id: s.patient_id,
            image_id: s.image_id,
            label: s.label as i32,
            file: image_file_name(s.image_id),
            lesion_bbox: Some(s.lesion_bbox),
        })
        .collect()
}
