//! Fixed-size concept padding and batch assembly.

use ndarray::{Array2, Array3, Axis};
use rand_distr::{Distribution, Normal};

use crate::data::extract::ConceptBundle;
use crate::data::synth::stream;
use crate::data::BundleSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default standard deviation of the Gaussian padding vectors.
pub const DEFAULT_PAD_SIGMA: f32 = 0.01;

/// One image's concepts padded to exactly `n` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedConcepts {
    /// `n × D_in`
    pub features: Array2<f32>,
    pub valid: Vec<bool>,
    /// Index into `bundle.concepts` for every real slot.
    pub source: Vec<Option<usize>>,
}

/// Pads (or truncates) a bundle's concepts to `n` slots.
///
/// Real concepts keep extractor order. When there are more than `n`, the `n`
/// largest by mask area are kept. Remaining slots hold i.i.d. zero-mean
/// Gaussian vectors with standard deviation `pad_sigma`.
pub fn pad_concepts(bundle: &ConceptBundle, n: usize, dim: usize, pad_sigma: f32, rng_seed: u64) -> Result<PaddedConcepts> {
    if n == 0 {
        return Err(Error::Config("concept slot count n must be >= 1".into()));
    }
    let mut keep: Vec<usize> = (0..bundle.concepts.len()).collect();
    if keep.len() > n {
        keep.sort_by(|&a, &b| bundle.concepts[b].area().cmp(&bundle.concepts[a].area()).then(a.cmp(&b)));
        keep.truncate(n);
        keep.sort_unstable();
    }
    let mut features = Array2::zeros((n, dim));
    let mut valid = vec![false; n];
    let mut source = vec![None; n];
    for (slot, &ci) in keep.iter().enumerate() {
        let f = &bundle.concepts[ci].feature;
        if f.len() != dim {
            return Err(Error::shape(
                "pad_concepts",
                format!("concept {ci} of image {} has {} features, expected {dim}", bundle.image_id, f.len()),
            ));
        }
        features.row_mut(slot).iter_mut().zip(f).for_each(|(d, &s)| *d = s);
        valid[slot] = true;
        source[slot] = Some(ci);
    }
    if pad_sigma > 0.0 && keep.len() < n {
        let normal = Normal::new(0.0f32, pad_sigma).map_err(|e| Error::Config(format!("pad_sigma: {e}")))?;
        let mut rng = stream(&[rng_seed]);
        for slot in keep.len()..n {
            for v in features.row_mut(slot) {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(PaddedConcepts {
        features,
        valid,
        source,
    })
}

/// Padding seed for one image; stable across epochs and runs.
pub fn padding_seed(seed: u64, patient_id: u32, image_id: u32) -> u64 {
    crate::data::synth::mix_seed(&[seed, 0x9AD, patient_id as u64, image_id as u64])
}

/// Padded model inputs for a batch of `N` images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T> {
    /// `N × G`: one global source row per image (the singleton token axis
    /// is implicit).
    pub z_g_in: Array2<T>,
    /// `N × n × L`
    pub z_l_in: Array3<T>,
    /// `N × n`, false exactly on padded slots.
    pub valid: Array2<bool>,
    /// Class indices, -1 when unlabelled.
    pub labels: Vec<i32>,
    pub provenance: Vec<(u32, u32)>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.z_l_in.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureBatch<U> {
        FeatureBatch {
            z_g_in: self.z_g_in.mapv(|v| U::lit(v.as_f64())),
            z_l_in: self.z_l_in.mapv(|v| U::lit(v.as_f64())),
            valid: self.valid.clone(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Reorders the concept axis of every sample: new slot `j` takes old slot
    /// `perm[j]`.
    pub fn permute_slots(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (j, &p) in perm.iter().enumerate() {
            out.z_l_in.index_axis_mut(Axis(1), j).assign(&self.z_l_in.index_axis(Axis(1), p));
            out.valid.column_mut(j).assign(&self.valid.column(p));
        }
        out
    }
}

/// A whole bundle set padded once, so batches can be gathered cheaply.
#[derive(Debug, Clone)]
pub struct PaddedDataset {
    pub global: Array2<f32>,
    pub local: Array3<f32>,
    pub valid: Array2<bool>,
    pub labels: Vec<i32>,
    pub provenance: Vec<(u32, u32)>,
    pub source: Vec<Vec<Option<usize>>>,
}

impl PaddedDataset {
    pub fn build(set: &BundleSet, indices: &[usize], n: usize, pad_sigma: f32, seed: u64) -> Result<Self> {
        let gdim = set.global_dim();
        let ldim = set.local_dim();
        let m = indices.len();
        let mut global = Array2::zeros((m, gdim));
        let mut local = Array3::zeros((m, n, ldim));
        let mut valid = Array2::from_elem((m, n), false);
        let mut labels = Vec::with_capacity(m);
        let mut provenance = Vec::with_capacity(m);
        let mut source = Vec::with_capacity(m);
        for (row, &i) in indices.iter().enumerate() {
            let b = &set.bundles[i];
            if b.global_source.len() != gdim {
                return Err(Error::shape(
                    "PaddedDataset::build",
                    format!("image {} global source has {} values, expected {gdim}", b.image_id, b.global_source.len()),
                ));
            }
            global.row_mut(row).iter_mut().zip(&b.global_source).for_each(|(d, &s)| *d = s);
            let padded = pad_concepts(b, n, ldim, pad_sigma, padding_seed(seed, b.patient_id, b.image_id))?;
            local.index_axis_mut(Axis(0), row).assign(&padded.features);
            for (j, &v) in padded.valid.iter().enumerate() {
                valid[[row, j]] = v;
            }
            labels.push(b.label);
            provenance.push((b.patient_id, b.image_id));
            source.push(padded.source);
        }
        Ok(Self {
            global,
            local,
            valid,
            labels,
            provenance,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch<T: Scalar>(&self, rows: &[usize]) -> FeatureBatch<T> {
        FeatureBatch {
            z_g_in: self.global.select(Axis(0), rows).mapv(|v| T::lit(v as f64)),
            z_l_in: self.local.select(Axis(0), rows).mapv(|v| T::lit(v as f64)),
            valid: self.valid.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            provenance: rows.iter().map(|&r| self.provenance[r]).collect(),
        }
    }

    pub fn all<T: Scalar>(&self) -> FeatureBatch<T> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }
}
