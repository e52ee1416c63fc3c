//! Blob-based visual concept extraction.
//!
//! Saliency is the absolute luminance deviation from the image median after
//! a small box blur; salient pixels are grouped into 8-connected components,
//! and every component above a minimum area becomes one concept.

use serde::{Deserialize, Serialize};

use crate::data::image::RgbImage;
use crate::data::rle::{BinaryMask, Rle};

/// Tag attached to extracted concepts. The bundle file does not store tags,
/// so everything read back carries this value.
pub const CONCEPT_TAG: &str = "concept";

/// Number of summary statistics appended to the pixel grid of a descriptor.
pub const DESCRIPTOR_STATS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Fixed-length descriptor: a `grid × grid` RGB thumbnail plus summary
    /// statistics.
    Descriptor { grid: usize },
    /// Raw `crop × crop × 3` crops; the global source is the full image.
    RawCrop { crop: usize },
}

impl FeatureKind {
    /// Width of every stored feature vector (`D_in`); zero for raw crops.
    pub fn dim(&self) -> usize {
        match *self {
            FeatureKind::Descriptor { grid } => descriptor_dim(grid),
            FeatureKind::RawCrop { .. } => 0,
        }
    }
}

pub fn descriptor_dim(grid: usize) -> usize {
    3 * grid * grid + DESCRIPTOR_STATS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub threshold: f32,
    pub min_area: usize,
    pub max_concepts: usize,
    pub blur_radius: usize,
    pub features: FeatureKind,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            min_area: 12,
            max_concepts: 30,
            blur_radius: 1,
            features: FeatureKind::Descriptor { grid: 8 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    /// Descriptor, or the raw crop in raw-crop mode.
    pub feature: Vec<f32>,
    /// `[x0, y0, x1, y1]` in pixels, exclusive upper corner.
    pub bbox: [f32; 4],
    pub mask: Rle,
    pub prompt_tag: String,
}

impl ConceptRecord {
    pub fn area(&self) -> usize {
        self.mask.area()
    }

    pub fn bbox_usize(&self) -> [usize; 4] {
        self.bbox.map(|v| v.max(0.0) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBundle {
    pub patient_id: u32,
    pub image_id: u32,
    /// Class index, or -1 when unlabelled.
    pub label: i32,
    pub global_source: Vec<f32>,
    pub concepts: Vec<ConceptRecord>,
}

impl ConceptBundle {
    pub fn n_real(&self) -> usize {
        self.concepts.len()
    }
}

/// A labelled connected component.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<usize>,
    pub bbox: [usize; 4],
}

/// 8-connected components of `mask`, in raster order of their first pixel.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let mut bbox = [usize::MAX, usize::MAX, 0, 0];
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = (p % width, p / width);
            bbox[0] = bbox[0].min(x);
            bbox[1] = bbox[1].min(y);
            bbox[2] = bbox[2].max(x + 1);
            bbox[3] = bbox[3].max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels, bbox });
    }
    out
}

fn box_blur(values: &[f32], width: usize, height: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    let r = radius as i64;
    let mut out = vec![0.0; values.len()];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let mut sum = 0.0;
            let mut n = 0;
            for yy in (y - r).max(0)..=(y + r).min(height as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(width as i64 - 1) {
                    sum += values[(yy * width as i64 + xx) as usize];
                    n += 1;
                }
            }
            out[(y * width as i64 + x) as usize] = sum / n as f32;
        }
    }
    out
}

fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Boolean saliency map used for segmentation.
pub fn saliency_mask(image: &RgbImage, cfg: &ExtractorConfig) -> Vec<bool> {
    let lum = box_blur(&image.luminance_map(), image.width, image.height, cfg.blur_radius);
    let med = median(&lum);
    lum.iter().map(|&l| (l - med).abs() > cfg.threshold).collect()
}

/// Area-averaged resampling of `bbox` to `grid × grid` RGB, row-major.
pub fn resample(image: &RgbImage, bbox: [usize; 4], grid: usize) -> Vec<f32> {
    let [x0, y0, x1, y1] = bbox;
    let w = (x1 - x0) as f32;
    let h = (y1 - y0) as f32;
    let mut out = Vec::with_capacity(grid * grid * 3);
    for gy in 0..grid {
        let cy0 = y0 as f32 + h * gy as f32 / grid as f32;
        let cy1 = y0 as f32 + h * (gy + 1) as f32 / grid as f32;
        for gx in 0..grid {
            let cx0 = x0 as f32 + w * gx as f32 / grid as f32;
            let cx1 = x0 as f32 + w * (gx + 1) as f32 / grid as f32;
            let mut acc = [0.0f32; 3];
            let mut n = 0usize;
            for y in (cy0.floor() as usize)..(cy1.ceil() as usize).min(y1) {
                let yc = y as f32 + 0.5;
                if yc < cy0 || yc >= cy1 {
                    continue;
                }
                for x in (cx0.floor() as usize)..(cx1.ceil() as usize).min(x1) {
                    let xc = x as f32 + 0.5;
                    if xc < cx0 || xc >= cx1 {
                        continue;
                    }
                    let p = image.get(x, y);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                    n += 1;
                }
            }
            if n == 0 {
                // Cell narrower than a pixel: sample at its centre.
                let x = (((cx0 + cx1) * 0.5) as usize).clamp(x0, x1 - 1);
                let y = (((cy0 + cy1) * 0.5) as usize).clamp(y0, y1 - 1);
                acc = image.get(x, y);
                n = 1;
            }
            out.extend(acc.iter().map(|v| v / n as f32));
        }
    }
    out
}

/// Thumbnail (centred at zero) followed by [`DESCRIPTOR_STATS`] summary
/// statistics of the masked region.
pub fn descriptor(image: &RgbImage, bbox: [usize; 4], pixels: &[usize], grid: usize) -> Vec<f32> {
    let mut out: Vec<f32> = resample(image, bbox, grid).into_iter().map(|v| v - 0.5).collect();
    let total = (image.width * image.height) as f32;
    let area = pixels.len().max(1) as f32;
    let mut mean = [0.0f32; 3];
    let mut lum = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let c = [image.data[p * 3], image.data[p * 3 + 1], image.data[p * 3 + 2]];
        mean[0] += c[0];
        mean[1] += c[1];
        mean[2] += c[2];
        lum.push(crate::data::image::luma(c[0], c[1], c[2]));
    }
    for m in &mut mean {
        *m /= area;
    }
    let lmean = lum.iter().sum::<f32>() / area;
    let lstd = (lum.iter().map(|l| (l - lmean).powi(2)).sum::<f32>() / area).sqrt();
    let w = (bbox[2] - bbox[0]) as f32;
    let h = (bbox[3] - bbox[1]) as f32;
    let mut member = std::collections::HashSet::with_capacity(pixels.len());
    member.extend(pixels.iter().copied());
    let boundary = pixels
        .iter()
        .filter(|&&p| {
            let (x, y) = (p % image.width, p / image.width);
            x == 0
                || y == 0
                || x + 1 == image.width
                || y + 1 == image.height
                || !member.contains(&(p - 1))
                || !member.contains(&(p + 1))
                || !member.contains(&(p - image.width))
                || !member.contains(&(p + image.width))
        })
        .count() as f32;
    out.extend_from_slice(&[
        mean[0] - 0.5,
        mean[1] - 0.5,
        mean[2] - 0.5,
        lstd,
        (area / total).ln() / 10.0,
        (w / h).ln(),
        area / (w * h),
        boundary / area,
    ]);
    out
}

/// Global source for an image under the configured feature kind.
pub fn global_source(image: &RgbImage, kind: FeatureKind) -> Vec<f32> {
    match kind {
        FeatureKind::Descriptor { grid } => {
            let all: Vec<usize> = (0..image.width * image.height).collect();
            descriptor(image, [0, 0, image.width, image.height], &all, grid)
        }
        FeatureKind::RawCrop { .. } => image.data.iter().map(|v| v - 0.5).collect(),
    }
}

/// Extracts up to `max_concepts` concepts, ordered by descending area (ties
/// keep raster order).
pub fn extract_concepts(image: &RgbImage, cfg: &ExtractorConfig) -> Vec<ConceptRecord> {
    let salient = saliency_mask(image, cfg);
    let mut comps: Vec<Component> = connected_components(&salient, image.width, image.height)
        .into_iter()
        .filter(|c| c.pixels.len() >= cfg.min_area.max(1))
        .collect();
    comps.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()));
    comps.truncate(cfg.max_concepts);
    comps
        .into_iter()
        .map(|c| {
            let mut mask = BinaryMask::new(image.width, image.height);
            for &p in &c.pixels {
                mask.bits[p] = true;
            }
            let feature = match cfg.features {
                FeatureKind::Descriptor { grid } => descriptor(image, c.bbox, &c.pixels, grid),
                FeatureKind::RawCrop { crop } => resample(image, c.bbox, crop).into_iter().map(|v| v - 0.5).collect(),
            };
            ConceptRecord {
                feature,
                bbox: c.bbox.map(|v| v as f32),
                mask: mask.encode(),
                prompt_tag: CONCEPT_TAG.to_string(),
            }
        })
        .collect()
}

/// Full bundle for one image.
pub fn extract_bundle(image: &RgbImage, cfg: &ExtractorConfig, patient_id: u32, image_id: u32, label: i32) -> ConceptBundle {
    ConceptBundle {
        patient_id,
        image_id,
        label,
        global_source: global_source(image, cfg.features),
        concepts: extract_concepts(image, cfg),
    }
}

/// Intersection over union of two exclusive-corner boxes.
pub fn bbox_iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: [f32; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
