//! PNG I/O, whole/local/location variant derivation, and geometric
//! augmentation (flip, rotation, crop) with paired image/mask sampling.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageReader, Luma};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, DataError, LoadedSample, ManifestRecord};
use crate::prompts::TypePrompt;

/// Bounding-box expansion for the `local` input-type crop (20% per side).
pub const DEFAULT_LOCAL_MARGIN: f64 = 0.2;
/// ROI intensity multiplier for the `location` input type.
pub const DEFAULT_BRIGHTNESS_FACTOR: f64 = 1.3;

fn image_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn decode_gray(path: &Path) -> Result<GrayImage, DataError> {
    let reader = ImageReader::open(path).map_err(|e| io_err(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    Ok(img.into_luma8())
}

fn gray_to_array(img: &GrayImage) -> Array2<f64> {
    Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    })
}

/// Load an 8-bit grayscale image, resized (bilinear) to `size`², in [0, 1].
pub fn load_image_png(path: &Path, size: usize) -> Result<Array2<f64>, DataError> {
    let mut img = decode_gray(path)?;
    if img.width() as usize != size || img.height() as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    }
    Ok(gray_to_array(&img))
}

/// Load a binary mask, resized (nearest) to `size`²; {0, 255} maps to {0, 1}.
pub fn load_mask_png(path: &Path, size: usize) -> Result<Array2<f64>, DataError> {
    let mut img = decode_gray(path)?;
    if img.width() as usize != size || img.height() as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    }
    Ok(gray_to_array(&img).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

fn load_native(path: &Path, mask: bool) -> Result<Array2<f64>, DataError> {
    let arr = gray_to_array(&decode_gray(path)?);
    Ok(if mask {
        arr.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    } else {
        arr
    })
}

fn write_gray(path: &Path, arr: &Array2<f64>, scale: f64) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let (h, w) = arr.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        let v = (arr[[r as usize, c as usize]] * scale).clamp(0.0, 255.0);
        Luma([v.round() as u8])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Write an image in [0, 1] as 8-bit grayscale PNG.
pub fn save_image_png(path: &Path, arr: &Array2<f64>) -> Result<(), DataError> {
    write_gray(path, arr, 255.0)
}

/// Write a {0, 1} mask as a {0, 255} PNG.
pub fn save_mask_png(path: &Path, arr: &Array2<f64>) -> Result<(), DataError> {
    write_gray(path, arr, 255.0)
}

/// Foreground bounding box expanded by `margin` of its extent on each side,
/// clamped to the mask bounds. `(r0, r1, c0, c1)` with exclusive ends;
/// `None` when the mask has no foreground.
pub fn local_crop_bounds(
    mask: &Array2<f64>,
    margin: f64,
) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (h, 0usize, w, 0usize);
    for ((r, c), &v) in mask.indexed_iter() {
        if v > 0.5 {
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
    }
    if rmin == h {
        return None;
    }
    let pad_r = ((rmax + 1 - rmin) as f64 * margin).round() as usize;
    let pad_c = ((cmax + 1 - cmin) as f64 * margin).round() as usize;
    Some((
        rmin.saturating_sub(pad_r),
        (rmax + 1 + pad_r).min(h),
        cmin.saturating_sub(pad_c),
        (cmax + 1 + pad_c).min(w),
    ))
}

/// Copy of the sub-rectangle `(r0, r1, c0, c1)` (exclusive ends).
pub fn crop_with_margin(arr: &Array2<f64>, bounds: (usize, usize, usize, usize)) -> Array2<f64> {
    let (r0, r1, c0, c1) = bounds;
    arr.slice(ndarray::s![r0..r1, c0..c1]).to_owned()
}

/// Multiply intensities inside the mask by `factor`, clipped to [0, 1].
pub fn enhance_roi(image: &Array2<f64>, mask: &Array2<f64>, factor: f64) -> Array2<f64> {
    let mut out = image.clone();
    for ((r, c), v) in out.indexed_iter_mut() {
        if mask[[r, c]] > 0.5 {
            *v = (*v * factor).min(1.0);
        }
    }
    out
}

fn with_suffix(path: &str, suffix: &str) -> String {
    let p = PathBuf::from(path);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
    let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("png");
    p.with_file_name(format!("{stem}{suffix}.{ext}"))
        .to_string_lossy()
        .into_owned()
}

/// Expand one record into its input-type variants, writing derived files
/// under `root`. The whole-image record passes through untouched; records
/// without masks (or with empty masks, which warn) yield only that record.
pub(super) fn derive_input_variants(
    r: &ManifestRecord,
    root: &Path,
    margin: f64,
    brightness: f64,
) -> Result<(Vec<ManifestRecord>, Vec<String>), DataError> {
    let mut out = vec![r.clone()];
    let mut warnings = Vec::new();
    let mask_path = match &r.mask_path {
        Some(p) => p.clone(),
        None => return Ok((out, warnings)),
    };
    let image = load_native(&root.join(&r.image_path), false)?;
    let mask = load_native(&root.join(&mask_path), true)?;
    if image.dim() != mask.dim() {
        return Err(DataError::BadRecord {
            record: r.record_id.clone(),
            message: format!("image {:?} and mask {:?} differ in size", image.dim(), mask.dim()),
        });
    }
    let bounds = match local_crop_bounds(&mask, margin) {
        Some(b) => b,
        None => {
            warnings.push(format!("record {}: empty mask, emitting Whole only", r.record_id));
            return Ok((out, warnings));
        }
    };

    let local_image_path = with_suffix(&r.image_path, "_local");
    let local_mask_path = with_suffix(&mask_path, "_local");
    save_image_png(&root.join(&local_image_path), &crop_with_margin(&image, bounds))?;
    save_mask_png(&root.join(&local_mask_path), &crop_with_margin(&mask, bounds))?;
    out.push(ManifestRecord {
        record_id: format!("{}_local", r.record_id),
        image_path: local_image_path,
        mask_path: Some(local_mask_path),
        input_type: TypePrompt::Local.name().to_string(),
        ..r.clone()
    });

    let location_image_path = with_suffix(&r.image_path, "_location");
    save_image_png(
        &root.join(&location_image_path),
        &enhance_roi(&image, &mask, brightness),
    )?;
    out.push(ManifestRecord {
        record_id: format!("{}_location", r.record_id),
        image_path: location_image_path,
        input_type: TypePrompt::Location.name().to_string(),
        ..r.clone()
    });
    Ok((out, warnings))
}

/// One draw of the augmentation pipeline's random parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Rotation in degrees, positive counter-clockwise.
    pub angle_deg: f64,
    /// Crop area as a fraction of the full image (0.9..=1.0 when sampled).
    pub crop_frac: f64,
    /// Crop window offsets as fractions of the slack, in [0, 1].
    pub offset_r: f64,
    pub offset_c: f64,
}

impl AugmentParams {
    /// No flip, zero rotation, full-area crop: the identity transform.
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle_deg: 0.0,
            crop_frac: 1.0,
            offset_r: 0.0,
            offset_c: 0.0,
        }
    }

    /// Deterministic draw: flip p = 0.5, angle in [-20°, 20°], area 90-100%.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-20.0..=20.0),
            crop_frac: rng.gen_range(0.9..=1.0),
            offset_r: rng.gen_range(0.0..=1.0),
            offset_c: rng.gen_range(0.0..=1.0),
        }
    }
}

/// Map an output pixel center back through crop -> rotation -> flip to a
/// source coordinate. With identity parameters this is exact, so the
/// identity transform reproduces the input bit-for-bit.
fn source_coord(r: usize, c: usize, side: usize, p: &AugmentParams) -> (f64, f64) {
    let n = side as f64;
    let crop_side = n * p.crop_frac.sqrt();
    let slack = n - crop_side;
    let r0 = p.offset_r * slack;
    let c0 = p.offset_c * slack;
    // position inside the crop window, pixel-center convention
    let mut rr = r0 + (r as f64 + 0.5) * crop_side / n - 0.5;
    let mut cc = c0 + (c as f64 + 0.5) * crop_side / n - 0.5;
    if p.angle_deg != 0.0 {
        let theta = -p.angle_deg.to_radians();
        let (cy, cx) = ((n - 1.0) / 2.0, (n - 1.0) / 2.0);
        let (dr, dc) = (rr - cy, cc - cx);
        rr = cy + theta.cos() * dr - theta.sin() * dc;
        cc = cx + theta.sin() * dr + theta.cos() * dc;
    }
    if p.flip {
        cc = (n - 1.0) - cc;
    }
    (rr, cc)
}

fn sample_bilinear(arr: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = arr.dim();
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    let (r, c) = (clamp(r, h), clamp(c, w));
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f64, c - c0 as f64);
    let top = arr[[r0, c0]] * (1.0 - fc) + arr[[r0, c1]] * fc;
    let bot = arr[[r1, c0]] * (1.0 - fc) + arr[[r1, c1]] * fc;
    top * (1.0 - fr) + bot * fr
}

fn sample_nearest(arr: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = arr.dim();
    let ri = r.round().clamp(0.0, (h - 1) as f64) as usize;
    let ci = c.round().clamp(0.0, (w - 1) as f64) as usize;
    arr[[ri, ci]]
}

/// Apply one fixed geometric transform to an image (bilinear) and its mask
/// (nearest), producing same-size outputs.
pub fn augment_with(
    image: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    params: &AugmentParams,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let (h, _) = image.dim();
    let out_img = Array2::from_shape_fn(image.dim(), |(r, c)| {
        let (sr, sc) = source_coord(r, c, h, params);
        sample_bilinear(image, sr, sc)
    });
    let out_mask = mask.map(|m| {
        Array2::from_shape_fn(m.dim(), |(r, c)| {
            let (sr, sc) = source_coord(r, c, h, params);
            sample_nearest(m, sr, sc)
        })
    });
    (out_img, out_mask)
}

/// Random flip/rotate/crop, deterministic given `seed`.
pub fn augment(
    image: &Array2<f64>,
    mask: Option<&Array2<f64>>,
    seed: u64,
) -> (Array2<f64>, Option<Array2<f64>>) {
    augment_with(image, mask, &AugmentParams::sample(seed))
}

/// [`augment`] applied to a loaded sample, keeping its metadata.
pub fn augment_sample(sample: &LoadedSample, seed: u64) -> LoadedSample {
    let (image, mask) = augment(&sample.image, sample.mask.as_ref(), seed);
    LoadedSample {
        record: sample.record.clone(),
        image,
        mask,
        class_label: sample.class_label,
    }
}
