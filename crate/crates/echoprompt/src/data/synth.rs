//! Desk-scale synthetic ultrasound generator: speckled backgrounds with
//! per-position intensity statistics, elliptical "tumor" lesions whose class
//! follows eccentricity, and ring-shaped "organ" structures with masks only.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_image_png, save_mask_png, DataError, ManifestRecord};

/// Eccentricity at or above this threshold labels a lesion malignant (1).
pub const MALIGNANT_ECCENTRICITY: f64 = 0.6;

/// Request for one synthetic corpus: `(position, record count)` pairs.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub positions: Vec<(String, usize)>,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.positions.is_empty() {
            return Err(DataError::InvalidSpec("no positions requested".into()));
        }
        for (pos, count) in &self.positions {
            if *count == 0 {
                return Err(DataError::InvalidSpec(format!("position {pos:?} has count 0")));
            }
        }
        if self.image_size < 16 {
            return Err(DataError::InvalidSpec(format!(
                "image_size {} too small",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Benign below the threshold, malignant at or above it.
pub fn class_from_eccentricity(eccentricity: f64) -> usize {
    usize::from(eccentricity >= MALIGNANT_ECCENTRICITY)
}

/// Exact binary rasterization of a rotated ellipse: pixel centers satisfying
/// the implicit equation are foreground.
pub fn rasterize_ellipse(
    size: usize,
    center: (f64, f64),
    axes: (f64, f64),
    angle: f64,
) -> Array2<f64> {
    let (cy, cx) = center;
    let (a, b) = axes;
    let (sin, cos) = angle.sin_cos();
    Array2::from_shape_fn((size, size), |(r, c)| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let u = (dx * cos + dy * sin) / a;
        let v = (-dx * sin + dy * cos) / b;
        if u * u + v * v <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

fn position_hash(position: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in position.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Positions with visible lesions get tumor records (mask + class label);
/// the rest get organ records (mask only).
fn is_tumor_position(position: &str) -> bool {
    !matches!(position, "cardiac" | "kidney" | "fetal" | "lung" | "appendix")
}

fn speckle_background(size: usize, mean: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |_| {
        (mean + 0.12 * rng.gen_range(-1.0..1.0)).clamp(0.02, 0.98)
    })
}

fn paint_foreground(image: &mut Array2<f64>, mask: &Array2<f64>, level: f64, rng: &mut ChaCha8Rng) {
    for (v, &m) in image.iter_mut().zip(mask.iter()) {
        if m > 0.5 {
            *v = (level + 0.05 * rng.gen_range(-1.0..1.0)).clamp(0.02, 0.98);
        }
    }
}

/// Generate records and write their PNGs under `root` (`images/`, `masks/`).
/// Deterministic given the spec: same spec twice produces byte-identical
/// files. Patients carry 1-3 consecutive images each.
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
    root: &Path,
) -> Result<Vec<ManifestRecord>, DataError> {
    spec.validate()?;
    let n = spec.image_size;
    let mut records = Vec::new();
    for (position, count) in &spec.positions {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ position_hash(position));
        // each position gets its own background brightness band so the
        // position prompt carries learnable signal
        let mean = 0.25 + 0.4 * ((position_hash(position) >> 8) % 1000) as f64 / 1000.0;
        let tumor = is_tumor_position(position);
        let mut patient = 0usize;
        let mut left_in_patient = 0usize;
        for i in 0..*count {
            if left_in_patient == 0 {
                patient += 1;
                left_in_patient = rng.gen_range(1..=3usize);
            }
            left_in_patient -= 1;

            let record_id = format!("{position}_{i:04}");
            let mut image = speckle_background(n, mean, &mut rng);
            let cy = rng.gen_range(0.3 * n as f64..0.7 * n as f64);
            let cx = rng.gen_range(0.3 * n as f64..0.7 * n as f64);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);

            let (mask, class_label) = if tumor {
                // alternate eccentricity bands so both classes always occur
                let ecc: f64 = if i % 2 == 0 {
                    rng.gen_range(0.1..0.5)
                } else {
                    rng.gen_range(0.65..0.95)
                };
                let a = rng.gen_range(0.10 * n as f64..0.22 * n as f64);
                let b = a * (1.0 - ecc * ecc).sqrt();
                let mask = rasterize_ellipse(n, (cy, cx), (a, b), angle);
                paint_foreground(&mut image, &mask, mean * 0.4, &mut rng);
                (mask, Some(class_from_eccentricity(ecc)))
            } else {
                let outer = rng.gen_range(0.18 * n as f64..0.3 * n as f64);
                let inner = outer * rng.gen_range(0.4..0.7);
                let ring = rasterize_ellipse(n, (cy, cx), (outer, outer), 0.0)
                    - rasterize_ellipse(n, (cy, cx), (inner, inner), 0.0);
                paint_foreground(&mut image, &ring, (mean + 0.35).min(0.95), &mut rng);
                (ring, None)
            };

            let image_path = format!("images/{record_id}.png");
            let mask_path = format!("masks/{record_id}.png");
            save_image_png(&root.join(&image_path), &image)?;
            save_mask_png(&root.join(&mask_path), &mask)?;
            records.push(ManifestRecord {
                dataset_id: format!("synth_{position}"),
                record_id,
                patient_id: format!("{position}_pat{patient:03}"),
                image_path,
                mask_path: Some(mask_path),
                class_label,
                position: position.clone(),
                nature: if tumor { "tumor" } else { "organ" }.to_string(),
                input_type: "whole".to_string(),
            });
        }
    }
    Ok(records)
}
