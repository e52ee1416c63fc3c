//! Deterministic synthetic clinical-photo generator.
//!
//! Each image is a textured background, one large "body" ellipse and exactly
//! one lesion whose appearance is a function of the class: the radial
//! intensity profile and elongation are carried by the lesion pixels, while
//! a faint peri-lesional halo (too weak to be segmented) surrounds the lesion
//! outside its bounding box. Distractor blobs are drawn from one
//! class-independent distribution.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image::{luma, RgbImage};
use crate::data::rle::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub patients_per_class: usize,
    pub images_per_patient_range: [usize; 2],
    pub image_size: usize,
    pub lesion_area_fraction: [f64; 2],
    pub background_noise_sigma: f32,
    pub distractor_count_range: [usize; 2],
    /// Darkening of the lesion relative to the surrounding skin.
    pub lesion_contrast_range: [f32; 2],
    /// Peak colour shift of the class halo; 0 disables it.
    pub halo_strength: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            patients_per_class: 50,
            images_per_patient_range: [1, 3],
            image_size: 128,
            lesion_area_fraction: [0.01, 0.05],
            background_noise_sigma: 0.1,
            distractor_count_range: [1, 4],
            lesion_contrast_range: [0.5, 0.7],
            halo_strength: 0.12,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return cfg(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.patients_per_class == 0 {
            return cfg("patients_per_class must be >= 1".into());
        }
        if self.image_size < 32 {
            return cfg(format!("image_size must be >= 32, got {}", self.image_size));
        }
        let [lo, hi] = self.lesion_area_fraction;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return cfg(format!("lesion_area_fraction must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"));
        }
        for (name, [a, b]) in [
            ("images_per_patient_range", self.images_per_patient_range),
            ("distractor_count_range", self.distractor_count_range),
        ] {
            if a > b {
                return cfg(format!("{name}: min {a} > max {b}"));
            }
        }
        if self.images_per_patient_range[0] == 0 {
            return cfg("images_per_patient_range min must be >= 1".into());
        }
        if !(self.background_noise_sigma >= 0.0 && self.background_noise_sigma <= 1.0) {
            return cfg("background_noise_sigma must lie in [0, 1]".into());
        }
        let [c0, c1] = self.lesion_contrast_range;
        if !(0.0 < c0 && c0 <= c1 && c1 <= 1.0) {
            return cfg(format!("lesion_contrast_range must satisfy 0 < lo <= hi <= 1, got [{c0}, {c1}]"));
        }
        let px = (self.image_size * self.image_size) as f64;
        let (min_px, max_px) = area_bounds(self.lesion_area_fraction, self.image_size);
        if (lo * px) < 9.0 {
            return Err(Error::Geometry(format!(
                "lesion of {:.1} px at fraction {lo} is too small to rasterise on a {}x{} grid",
                lo * px,
                self.image_size,
                self.image_size
            )));
        }
        if min_px > max_px {
            return Err(Error::Geometry(format!(
                "no integer pixel count lies in [{:.2}, {:.2}]",
                lo * px,
                hi * px
            )));
        }
        // The lesion plus its halo has to fit inside the body ellipse.
        if hi > 0.12 {
            return Err(Error::Geometry(format!(
                "lesion fraction {hi} cannot fit inside the body region of a {}x{} image (max 0.12)",
                self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    pub fn num_patients(&self) -> usize {
        self.num_classes * self.patients_per_class
    }
}

/// Inclusive pixel-count range for a lesion mask.
pub fn area_bounds(fraction: [f64; 2], image_size: usize) -> (usize, usize) {
    let px = (image_size * image_size) as f64;
    let min = (fraction[0] * px - 1e-9).ceil() as usize;
    let max = (fraction[1] * px + 1e-9).floor() as usize;
    (min, max)
}

/// Radial intensity profile of a lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionProfile {
    Solid,
    /// Dark rim around a pale centre.
    Ring,
    /// Dark core and dark rim separated by a pale band.
    Target,
    Mottled,
    /// Dark centre fading towards the edge.
    Gradient,
}

const PROFILES: [LesionProfile; 5] = [
    LesionProfile::Ring,
    LesionProfile::Target,
    LesionProfile::Mottled,
    LesionProfile::Solid,
    LesionProfile::Gradient,
];

/// Appearance parameters shared by every lesion of a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub profile: LesionProfile,
    pub elongation: f32,
    pub tint: [f32; 3],
    pub halo: bool,
}

/// Classes come in pairs that share a lesion profile and differ in halo, so
/// the lesion crop alone and the whole image alone are each ambiguous.
pub fn class_signature(class: usize) -> ClassSignature {
    let group = class / 2;
    let profile = PROFILES[group % PROFILES.len()];
    let elongation = [1.0f32, 1.5, 1.2, 1.8, 1.35][group % 5] * (1.0 + 0.25 * (group / 5) as f32);
    let tints = [
        [0.05f32, -0.02, -0.02],
        [-0.02, 0.03, -0.01],
        [0.02, 0.0, 0.04],
        [0.0, -0.02, 0.03],
        [0.04, 0.02, -0.03],
    ];
    ClassSignature {
        profile,
        elongation,
        tint: tints[group % 5],
        halo: class % 2 == 1,
    }
}

/// Darkening weight in `[0, 1]` at normalised radius `r` (<= 1) and
/// lesion-frame coordinates `(u, v)` in pixels.
fn profile_weight(profile: LesionProfile, r: f32, u: f32, v: f32) -> f32 {
    match profile {
        LesionProfile::Solid => 1.0,
        LesionProfile::Ring => smooth_step(0.38, 0.58, r) * 0.85 + 0.15,
        LesionProfile::Target => {
            if r < 0.3 {
                1.0
            } else if r < 0.62 {
                0.2
            } else {
                1.0
            }
        }
        LesionProfile::Mottled => {
            let s = (u * 0.9).sin() * (v * 0.9).sin();
            if s > -0.15 {
                1.0
            } else {
                0.3
            }
        }
        LesionProfile::Gradient => 1.0 - 0.45 * r,
    }
}

fn smooth_step(a: f32, b: f32, x: f32) -> f32 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub patient_id: u32,
    pub image_id: u32,
    pub label: usize,
    pub image: RgbImage,
    /// `[x0, y0, x1, y1]`, exclusive upper corner.
    pub lesion_bbox: [usize; 4],
    pub lesion_mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    pub samples: Vec<SyntheticSample>,
}

/// SplitMix64 finaliser, used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

const TAG_PATIENT: u64 = 1;
const TAG_IMAGE: u64 = 2;

struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    fn new(cx: f32, cy: f32, a: f32, b: f32, angle: f32) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Lesion-frame coordinates of a pixel centre.
    fn frame(&self, x: usize, y: usize) -> (f32, f32) {
        let dx = x as f32 + 0.5 - self.cx;
        let dy = y as f32 + 0.5 - self.cy;
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn radius(&self, x: usize, y: usize) -> f32 {
        let (u, v) = self.frame(x, y);
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn pixel_box(&self, scale: f32, size: usize) -> (usize, usize, usize, usize) {
        let r = self.a.max(self.b) * scale + 1.0;
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(size);
        let y1 = ((self.cy + r).ceil() as usize).min(size);
        (x0, y0, x1, y1)
    }

    fn rasterise(&self, size: usize) -> BinaryMask {
        let mut m = BinaryMask::new(size, size);
        let (x0, y0, x1, y1) = self.pixel_box(1.0, size);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.radius(x, y) <= 1.0 {
                    m.set(x, y, true);
                }
            }
        }
        m
    }
}

/// Smooth value noise in roughly `[-1, 1]` from a coarse random lattice.
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0; size * size];
    let step = size as f32 / cells as f32;
    for y in 0..size {
        let fy = y as f32 / step;
        let iy = (fy as usize).min(cells - 1);
        let ty = fy - iy as f32;
        for x in 0..size {
            let fx = x as f32 / step;
            let ix = (fx as usize).min(cells - 1);
            let tx = fx - ix as f32;
            let v00 = lattice[iy * n + ix];
            let v01 = lattice[iy * n + ix + 1];
            let v10 = lattice[(iy + 1) * n + ix];
            let v11 = lattice[(iy + 1) * n + ix + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

fn darken(base: [f32; 3], weight: f32, contrast: f32, tint: [f32; 3]) -> [f32; 3] {
    let f = 1.0 - contrast * weight;
    [
        base[0] * f + tint[0] * weight,
        base[1] * f + tint[1] * weight,
        base[2] * f + tint[2] * weight,
    ]
}

struct PatientLook {
    skin: [f32; 3],
    background: [f32; 3],
}

fn patient_look(spec: &SynthSpec, patient_id: u32) -> PatientLook {
    let mut rng = stream(&[spec.seed, TAG_PATIENT, patient_id as u64]);
    let l: f32 = rng.random_range(0.58..0.76);
    let warm: f32 = rng.random_range(0.04..0.10);
    let skin = [l + warm, l, l - warm * 0.9];
    let bl = l + rng.random_range(-0.10f32..0.10);
    let hue: f32 = rng.random_range(0.0..(2.0 * PI));
    let background = [
        bl + 0.05 * hue.cos(),
        bl + 0.05 * (hue + 2.1).cos(),
        bl + 0.05 * (hue + 4.2).cos(),
    ];
    PatientLook { skin, background }
}

/// Generates one image; fully determined by `(spec.seed, patient_id, image_id)`.
pub fn generate_image(spec: &SynthSpec, patient_id: u32, image_id: u32, label: usize) -> Result<SyntheticSample> {
    let size = spec.image_size;
    let sz = size as f32;
    let look = patient_look(spec, patient_id);
    let sig = class_signature(label);
    let mut rng = stream(&[spec.seed, TAG_IMAGE, patient_id as u64, image_id as u64]);

    let body = Ellipse::new(
        sz * rng.random_range(0.44f32..0.56),
        sz * rng.random_range(0.44f32..0.56),
        sz * rng.random_range(0.50f32..0.60),
        sz * rng.random_range(0.40f32..0.48),
        rng.random_range(0.0..PI),
    );
    let texture = value_noise(size, 6, &mut rng);

    let mut img = RgbImage::new(size, size);
    let mut on_body = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = body.radius(x, y) <= 1.0;
            on_body[y * size + x] = inside;
            let base = if inside { look.skin } else { look.background };
            let t = 0.06 * texture[y * size + x];
            img.set(x, y, [base[0] + t, base[1] + t, base[2] + t]);
        }
    }

    // Lesion placement: retry until the mask lands inside the body with the
    // required pixel count.
    let (min_px, max_px) = area_bounds(spec.lesion_area_fraction, size);
    let [lo, hi] = spec.lesion_area_fraction;
    let mut lesion = None;
    'attempt: for _ in 0..200 {
        let target = rng.random_range(lo..hi) * (size * size) as f64;
        let e = sig.elongation * rng.random_range(0.9f32..1.1);
        let angle = rng.random_range(0.0..PI);
        let mut a = ((target as f32) * e / PI).sqrt();
        let mut b = a / e;
        let cx = rng.random_range(0.2 * sz..0.8 * sz);
        let cy = rng.random_range(0.2 * sz..0.8 * sz);
        let mut ell = Ellipse::new(cx, cy, a, b, angle);
        let mut mask = ell.rasterise(size);
        for _ in 0..6 {
            let area = mask.area();
            if area >= min_px && area <= max_px {
                break;
            }
            let s = ((target / area.max(1) as f64) as f32).sqrt();
            a *= s;
            b *= s;
            ell = Ellipse::new(cx, cy, a, b, angle);
            mask = ell.rasterise(size);
        }
        let area = mask.area();
        if area < min_px || area > max_px {
            continue;
        }
        // Lesion and halo must stay on the body and away from the border.
        let (x0, y0, x1, y1) = ell.pixel_box(3.0, size);
        for y in y0..y1 {
            for x in x0..x1 {
                if ell.radius(x, y) <= 2.2 && !on_body[y * size + x] {
                    continue 'attempt;
                }
            }
        }
        let bbox = mask.bbox().expect("non-empty lesion");
        if bbox[0] < 2 || bbox[1] < 2 || bbox[2] + 2 > size || bbox[3] + 2 > size {
            continue;
        }
        lesion = Some((ell, mask, bbox));
        break;
    }
    let (ell, mask, bbox) = lesion.ok_or_else(|| {
        Error::Geometry(format!(
            "could not place a lesion of {min_px}..={max_px} px inside the body of a {size}x{size} image"
        ))
    })?;

    let contrast = rng.random_range(spec.lesion_contrast_range[0]..=spec.lesion_contrast_range[1]);
    let (x0, y0, x1, y1) = ell.pixel_box(3.2, size);
    for y in y0..y1 {
        for x in x0..x1 {
            let r = ell.radius(x, y);
            if mask.get(x, y) {
                let (u, v) = ell.frame(x, y);
                let w = profile_weight(sig.profile, r.min(1.0), u, v);
                let px = img.get(x, y);
                img.set(x, y, darken(px, w, contrast, sig.tint));
            } else if sig.halo && spec.halo_strength > 0.0 && (1.45..3.0).contains(&r) {
                // Reddening ring that leaves luminance almost unchanged.
                let h = spec.halo_strength * (1.0 - smooth_step(1.8, 3.0, r)) * smooth_step(1.45, 1.7, r);
                let [pr, pg, pb] = img.get(x, y);
                img.set(x, y, [pr + h, pg - 0.45 * h, pb - 0.45 * h]);
            }
        }
    }

    // Distractors: same distribution for every class, never touching the
    // lesion or its halo.
    let mut occupied = vec![false; size * size];
    let (hx0, hy0, hx1, hy1) = ell.pixel_box(3.2, size);
    for y in hy0..hy1 {
        for x in hx0..hx1 {
            if ell.radius(x, y) <= 3.1 {
                occupied[y * size + x] = true;
            }
        }
    }
    let [dmin, dmax] = spec.distractor_count_range;
    let count = rng.random_range(dmin..=dmax);
    for _ in 0..count {
        for _try in 0..40 {
            let area = rng.random_range(0.003f32..0.014) * sz * sz;
            let e = rng.random_range(1.0f32..1.5);
            let a = (area * e / PI).sqrt();
            let d = Ellipse::new(
                rng.random_range(0.08 * sz..0.92 * sz),
                rng.random_range(0.08 * sz..0.92 * sz),
                a,
                a / e,
                rng.random_range(0.0..PI),
            );
            let m = d.rasterise(size);
            let (bx0, by0, bx1, by1) = d.pixel_box(1.6, size);
            let clash = (by0..by1).any(|y| (bx0..bx1).any(|x| d.radius(x, y) <= 1.6 && occupied[y * size + x]));
            if clash || m.area() < 4 {
                continue;
            }
            let c = rng.random_range(spec.lesion_contrast_range[0]..=spec.lesion_contrast_range[1]);
            for idx in m.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i) {
                let (x, y) = (idx % size, idx / size);
                let px = img.get(x, y);
                img.set(x, y, darken(px, 1.0, c, [0.0; 3]));
            }
            for y in by0..by1 {
                for x in bx0..bx1 {
                    if d.radius(x, y) <= 1.6 {
                        occupied[y * size + x] = true;
                    }
                }
            }
            break;
        }
    }

    if spec.background_noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.background_noise_sigma).expect("valid sigma");
        for v in &mut img.data {
            *v += normal.sample(&mut rng);
        }
    }
    img.clamp();

    Ok(SyntheticSample {
        patient_id,
        image_id,
        label,
        image: img,
        lesion_bbox: bbox,
        lesion_mask: mask,
    })
}

/// Generates the whole corpus. Patient ids are `class * patients_per_class + p`
/// and image ids are assigned sequentially in patient order.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    let mut image_id = 0u32;
    for label in 0..spec.num_classes {
        for p in 0..spec.patients_per_class {
            let patient_id = (label * spec.patients_per_class + p) as u32;
            let mut rng = stream(&[spec.seed, TAG_PATIENT, patient_id as u64, 0xC0]);
            let [lo, hi] = spec.images_per_patient_range;
            let count = rng.random_range(lo..=hi);
            for _ in 0..count {
                samples.push(generate_image(spec, patient_id, image_id, label)?);
                image_id += 1;
            }
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        samples,
    })
}

/// Mean luminance contrast between lesion pixels and the rest of the image;
/// used only by diagnostics.
pub fn lesion_contrast(sample: &SyntheticSample) -> f32 {
    let mut inside = (0.0f32, 0usize);
    let mut outside = (0.0f32, 0usize);
    for (i, px) in sample.image.data.chunks_exact(3).enumerate() {
        let l = luma(px[0], px[1], px[2]);
        if sample.lesion_mask.bits[i] {
            inside.0 += l;
            inside.1 += 1;
        } else {
            outside.0 += l;
            outside.1 += 1;
        }
    }
    outside.0 / outside.1.max(1) as f32 - inside.0 / inside.1.max(1) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            patients_per_class: 10,
            images_per_patient_range: [2, 2],
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn counts_follow_spec() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(ds.samples.len(), 60);
        let mut patients: Vec<u32> = ds.samples.iter().map(|s| s.patient_id).collect();
        patients.dedup();
        assert_eq!(patients.len(), 30);
    }

    #[test]
    fn same_seed_gives_identical_images() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let xb: Vec<u32> = x.image.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.image.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let other = generate_synthetic(&SynthSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.samples[0].image, other.samples[0].image);
    }

    #[test]
    fn lesion_area_within_fraction_bounds() {
        // 0.01 * 128^2 = 163.84 and 0.05 * 128^2 = 819.2
        assert_eq!(area_bounds([0.01, 0.05], 128), (164, 819));
        let ds = generate_synthetic(&small_spec()).unwrap();
        for s in &ds.samples {
            let a = s.lesion_mask.area();
            assert!((164..=819).contains(&a), "area {a}");
            assert_eq!(s.lesion_mask.bbox().unwrap(), s.lesion_bbox);
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let spec = SynthSpec {
            image_size: 32,
            lesion_area_fraction: [0.001, 0.002],
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Geometry(_))));
        let spec = SynthSpec {
            lesion_area_fraction: [0.2, 0.4],
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Geometry(_))));
        let spec = SynthSpec {
            num_classes: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lesions_are_darker_than_surroundings() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        for s in &ds.samples {
            assert!(lesion_contrast(s) > 0.15, "contrast {}", lesion_contrast(s));
        }
    }

    #[test]
    fn paired_classes_share_profile() {
        assert_eq!(class_signature(0).profile, class_signature(1).profile);
        assert_ne!(class_signature(0).halo, class_signature(1).halo);
        assert_ne!(class_signature(1).profile, class_signature(2).profile);
    }
}
