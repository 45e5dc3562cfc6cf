//! Latent feature extraction from patch renders.
//!
//! Stands in for a pre-trained 2D image encoder with two deterministic
//! built-ins (a bilinear gray downsample and a joint RGB histogram) and an
//! external-process protocol for plugging in arbitrary extractors. Each patch
//! may be rendered from several views; per-view feature rows are mean-pooled
//! into one row per patch.
//!
//! External protocol: patch renders are written as PNG files plus a manifest
//! (one absolute path per line, patch-id order, views consecutive); the
//! configured command runs once per batch with the manifest path appended as
//! its final argument and prints the reply-file path on stdout. Reply layout,
//! little-endian: magic `H3DGFEAT`, u32 row count (= image count), u32
//! feature length, then rows of f32.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gs::GaussianCloud;
use crate::patchify::PatchAssignment;
use crate::render::{export_png, render_patch, RenderedImage};

/// Magic bytes opening an external extractor reply.
const REPLY_MAGIC: &[u8; 8] = b"H3DGFEAT";
/// Upper bound on the L2 norm of a feature row; larger values indicate a
/// broken extractor rather than a plausible feature.
const MAX_ROW_NORM: f64 = 1e6;
/// Patch renders are taken over black so off-patch pixels contribute a
/// stable, patch-independent mass to the features.
pub const FEATURE_BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// One feature row per patch plus the identity of the extractor that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: DMatrix<f64>,
    pub extractor_id: String,
}

/// Which extractor to run and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorSpec {
    /// Bilinear resize to `grid`×`grid` Rec.709 luma, flattened row-major.
    DownsampleGray { grid: usize },
    /// Joint RGB histogram with `bins` per channel, normalized to sum 1.
    RgbHist { bins: usize },
    /// External command (whitespace-split argv; manifest path appended).
    External { command: String },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::DownsampleGray { grid: 8 }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExtractorSpec::DownsampleGray { grid } => {
                if !(1..=64).contains(grid) {
                    return Err(Error::Config(format!(
                        "downsample grid must be in 1..=64, got {grid}"
                    )));
                }
            }
            ExtractorSpec::RgbHist { bins } => {
                if !(1..=16).contains(bins) {
                    return Err(Error::Config(format!(
                        "histogram bins must be in 1..=16, got {bins}"
                    )));
                }
            }
            ExtractorSpec::External { command } => {
                if command.split_whitespace().next().is_none() {
                    return Err(Error::Config("external extractor command is empty".into()));
                }
            }
        }
        Ok(())
    }

    /// Stable identifier recorded in the feature matrix.
    pub fn id(&self) -> String {
        match self {
            ExtractorSpec::DownsampleGray { grid } => format!("downsample-gray:{grid}"),
            ExtractorSpec::RgbHist { bins } => format!("rgb-hist:{bins}"),
            ExtractorSpec::External { command } => format!("external:{command}"),
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.2126 * r + 0.7152 * g + 0.0722 * b
}

/// Bilinear `grid`×`grid` luma downsample, flattened row-major.
fn downsample_gray_row(img: &RenderedImage, grid: usize) -> Vec<f64> {
    let (w, h) = (img.rgb.width, img.rgb.height);
    let clamp = |i: i64, hi: usize| i.clamp(0, hi as i64 - 1) as usize;
    let mut row = Vec::with_capacity(grid * grid);
    for oy in 0..grid {
        let sy = (oy as f64 + 0.5) * h as f64 / grid as f64 - 0.5;
        let y0f = sy.floor();
        let fy = sy - y0f;
        let y0 = clamp(y0f as i64, h);
        let y1 = clamp(y0f as i64 + 1, h);
        for ox in 0..grid {
            let sx = (ox as f64 + 0.5) * w as f64 / grid as f64 - 0.5;
            let x0f = sx.floor();
            let fx = sx - x0f;
            let x0 = clamp(x0f as i64, w);
            let x1 = clamp(x0f as i64 + 1, w);
            let l = |x: usize, y: usize| {
                let p = img.rgb.pixel(x, y);
                luma(p.x, p.y, p.z)
            };
            let v = l(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + l(x1, y0) * fx * (1.0 - fy)
                + l(x0, y1) * (1.0 - fx) * fy
                + l(x1, y1) * fx * fy;
            row.push(v);
        }
    }
    row
}

/// Joint RGB histogram: cell index (r·bins + g)·bins + b, normalized to sum 1.
fn rgb_hist_row(img: &RenderedImage, bins: usize) -> Vec<f64> {
    let (w, h) = (img.rgb.width, img.rgb.height);
    let mut counts = vec![0u64; bins * bins * bins];
    let bin = |v: f64| -> usize {
        let idx = (v.clamp(0.0, 1.0) * bins as f64).floor() as usize;
        idx.min(bins - 1)
    };
    for iy in 0..h {
        for ix in 0..w {
            let p = img.rgb.pixel(ix, iy);
            counts[(bin(p.x) * bins + bin(p.y)) * bins + bin(p.z)] += 1;
        }
    }
    let total = (w * h) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

/// Mean-pool consecutive per-view rows into one row per patch.
fn pool_rows(rows: &[Vec<f64>], views_per_patch: &[usize], c_l: usize) -> DMatrix<f64> {
    let mut pooled = DMatrix::zeros(views_per_patch.len(), c_l);
    let mut at = 0;
    for (patch, &views) in views_per_patch.iter().enumerate() {
        for row in &rows[at..at + views] {
            for (c, &v) in row.iter().enumerate() {
                pooled[(patch, c)] += v;
            }
        }
        for c in 0..c_l {
            pooled[(patch, c)] /= views as f64;
        }
        at += views;
    }
    pooled
}

fn check_feature_matrix(m: &FeatureMatrix) -> Result<()> {
    if m.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "extractor {} produced non-finite features",
            m.extractor_id
        )));
    }
    for row in 0..m.features.nrows() {
        let norm = m.features.row(row).norm();
        if norm > MAX_ROW_NORM {
            return Err(Error::Numerical(format!(
                "extractor {} produced a feature row with norm {norm:e} (> {MAX_ROW_NORM:e})",
                m.extractor_id
            )));
        }
    }
    Ok(())
}

/// Extract one feature row per patch from its rendered views.
///
/// `images[p]` holds the views of patch `p` (at least one each); per-view
/// features are mean-pooled. Built-in extractors are fully deterministic.
pub fn extract(images: &[Vec<RenderedImage>], spec: &ExtractorSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    if images.is_empty() {
        return Err(Error::Config("extract needs at least one patch".into()));
    }
    for (p, group) in images.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Config(format!("patch {p} has no rendered views")));
        }
    }
    let views_per_patch: Vec<usize> = images.iter().map(Vec::len).collect();

    let (rows, c_l) = match spec {
        ExtractorSpec::DownsampleGray { grid } => {
            let rows: Vec<Vec<f64>> = images
                .iter()
                .flat_map(|group| group.iter().map(|img| downsample_gray_row(img, *grid)))
                .collect();
            (rows, grid * grid)
        }
        ExtractorSpec::RgbHist { bins } => {
            let rows: Vec<Vec<f64>> = images
                .iter()
                .flat_map(|group| group.iter().map(|img| rgb_hist_row(img, *bins)))
                .collect();
            (rows, bins * bins * bins)
        }
        ExtractorSpec::External { command } => external_extract(images, command)?,
    };

    let matrix = FeatureMatrix {
        features: pool_rows(&rows, &views_per_patch, c_l),
        extractor_id: spec.id(),
    };
    check_feature_matrix(&matrix)?;
    Ok(matrix)
}

/// Run the external extractor once over the whole batch.
fn external_extract(
    images: &[Vec<RenderedImage>],
    command: &str,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let dir = tempfile::Builder::new()
        .prefix("hyper3dg-features-")
        .tempdir()
        .map_err(|e| Error::Io {
            path: std::env::temp_dir(),
            source: e,
        })?;

    let mut manifest_body = String::new();
    let mut image_count = 0usize;
    for (p, group) in images.iter().enumerate() {
        for (v, img) in group.iter().enumerate() {
            let path = dir.path().join(format!("patch{p:05}_view{v:02}.png"));
            export_png(img, &path)?;
            manifest_body.push_str(&path.display().to_string());
            manifest_body.push('\n');
            image_count += 1;
        }
    }
    let manifest = dir.path().join("manifest.txt");
    std::fs::write(&manifest, manifest_body).map_err(|e| Error::Io {
        path: manifest.clone(),
        source: e,
    })?;

    let mut argv = command.split_whitespace();
    let program = argv.next().expect("validated non-empty");
    let output = std::process::Command::new(program)
        .args(argv)
        .arg(&manifest)
        .output()
        .map_err(|e| Error::External(format!("failed to spawn extractor `{program}`: {e}")))?;
    let stderr = String::from_utf8_lossy(&output.stderr);
    if !output.status.success() {
        return Err(Error::External(format!(
            "extractor `{command}` exited with {}; stderr: {}",
            output.status,
            stderr.trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let reply_path = stdout.lines().next().map(str::trim).unwrap_or("");
    if reply_path.is_empty() {
        return Err(Error::External(format!(
            "extractor `{command}` printed no reply path; stderr: {}",
            stderr.trim()
        )));
    }
    let bytes = std::fs::read(reply_path).map_err(|e| Error::Io {
        path: reply_path.into(),
        source: e,
    })?;

    if bytes.len() < 16 || &bytes[..8] != REPLY_MAGIC {
        return Err(Error::External(format!(
            "extractor reply {reply_path} lacks the H3DGFEAT magic"
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let c_l = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n != image_count {
        return Err(Error::External(format!(
            "extractor reply has {n} rows but {image_count} images were sent"
        )));
    }
    if c_l == 0 {
        return Err(Error::External(
            "extractor reply declares zero-length features".into(),
        ));
    }
    let expected = 16 + n * c_l * 4;
    if bytes.len() != expected {
        return Err(Error::External(format!(
            "extractor reply is {} bytes, expected {expected} for {n}x{c_l} f32 rows",
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(n);
    let mut at = 16;
    for _ in 0..n {
        let mut row = Vec::with_capacity(c_l);
        for _ in 0..c_l {
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            row.push(v as f64);
            at += 4;
        }
        rows.push(row);
    }
    Ok((rows, c_l))
}

/// Render every patch from every pose, extract, and pool: one row per patch,
/// in patch-id order. Patch renders use auto-framing over a black background.
pub fn patch_feature_pipeline(
    cloud: &GaussianCloud,
    assignment: &PatchAssignment,
    poses: &[CameraPose],
    spec: &ExtractorSpec,
) -> Result<FeatureMatrix> {
    assignment.check_cloud(cloud)?;
    if poses.is_empty() {
        return Err(Error::Config(
            "patch_feature_pipeline needs at least one pose".into(),
        ));
    }
    let mut images = Vec::with_capacity(assignment.k());
    for patch in 0..assignment.k() {
        let mut views = Vec::with_capacity(poses.len());
        for pose in poses {
            views.push(render_patch(
                cloud,
                assignment,
                patch,
                pose,
                FEATURE_BACKGROUND,
            )?);
        }
        images.push(views);
    }
    extract(&images, spec)
}

/// Per-column z-score: (v − mean) / (std + epsilon), population std.
/// Constant columns map to exactly zero.
pub fn standardize_columns(m: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config(format!(
            "standardization epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::Config("cannot standardize an empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix contains non-finite values".into()));
    }
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let mean = m.column(c).sum() / n;
        let var = m
            .column(c)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let denom = var.sqrt() + epsilon;
        for r in 0..m.nrows() {
            out[(r, c)] = (m[(r, c)] - mean) / denom;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs::{synth_init, SynthShape};
    use crate::patchify::kmeans;
    use crate::render::ImageTensor;
    use crate::render::{render, srgb_encode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_image(w: usize, h: usize, rgb: [f64; 3]) -> RenderedImage {
        RenderedImage {
            rgb: ImageTensor::filled(w, h, rgb),
            alpha: vec![1.0; w * h],
        }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> RenderedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = constant_image(w, h, [0.0; 3]);
        for v in img.rgb.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn mid_gray_downsample_is_all_half() {
        let img = constant_image(16, 16, [0.5, 0.5, 0.5]);
        let m = extract(&[vec![img]], &ExtractorSpec::DownsampleGray { grid: 8 }).unwrap();
        assert_eq!(m.features.nrows(), 1);
        assert_eq!(m.features.ncols(), 64);
        assert_eq!(m.extractor_id, "downsample-gray:8");
        for &v in m.features.iter() {
            assert!((v - 0.5).abs() < 1e-6, "entry {v}");
        }
    }

    #[test]
    fn pure_red_histogram_is_one_hot() {
        let img = constant_image(8, 8, [1.0, 0.0, 0.0]);
        let m = extract(&[vec![img]], &ExtractorSpec::RgbHist { bins: 4 }).unwrap();
        assert_eq!(m.features.ncols(), 64);
        // r in top bin (3), g and b in bin 0: cell (3*4 + 0)*4 + 0 = 48.
        for (c, &v) in m.features.iter().enumerate() {
            if c == 48 {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, 0.0, "cell {c}");
            }
        }
    }

    #[test]
    fn half_red_half_blue_histogram_splits_evenly() {
        let mut img = constant_image(8, 8, [0.0, 0.0, 0.0]);
        for iy in 0..8 {
            for ix in 0..8 {
                let rgb = if ix < 4 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 1.0]
                };
                img.rgb
                    .set_pixel(ix, iy, nalgebra::Vector3::new(rgb[0], rgb[1], rgb[2]));
            }
        }
        // Direct pixel-count oracle.
        let red_pixels = 32.0;
        let blue_pixels = 32.0;
        let total = 64.0;
        let m = extract(&[vec![img]], &ExtractorSpec::RgbHist { bins: 4 }).unwrap();
        let cell = |r: usize, g: usize, b: usize| (r * 4 + g) * 4 + b;
        let red_cell = cell(3, 0, 0);
        let blue_cell = cell(0, 0, 3);
        assert!((m.features[(0, red_cell)] - red_pixels / total).abs() < 1.0 / 64.0);
        assert!((m.features[(0, blue_cell)] - blue_pixels / total).abs() < 1.0 / 64.0);
        assert!((m.features.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_rows_sum_to_one() {
        for seed in 0..5 {
            let img = random_image(13, 9, seed);
            let m = extract(&[vec![img]], &ExtractorSpec::RgbHist { bins: 3 }).unwrap();
            assert!((m.features.row(0).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_view_pooling_is_identity() {
        let img = random_image(12, 12, 3);
        let one = extract(
            &[vec![img.clone()]],
            &ExtractorSpec::DownsampleGray { grid: 4 },
        )
        .unwrap();
        let two = extract(
            &[vec![img.clone(), img]],
            &ExtractorSpec::DownsampleGray { grid: 4 },
        )
        .unwrap();
        // Mean of two identical views equals the single view bitwise.
        assert_eq!(one.features, two.features);
    }

    #[test]
    fn extraction_is_deterministic() {
        let images = vec![vec![random_image(10, 14, 5)], vec![random_image(10, 14, 6)]];
        let a = extract(&images, &ExtractorSpec::RgbHist { bins: 4 }).unwrap();
        let b = extract(&images, &ExtractorSpec::RgbHist { bins: 4 }).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features.nrows(), 2);
    }

    #[test]
    fn spec_validation_rejects_bad_params() {
        assert!(ExtractorSpec::DownsampleGray { grid: 0 }
            .validate()
            .is_err());
        assert!(ExtractorSpec::DownsampleGray { grid: 65 }
            .validate()
            .is_err());
        assert!(ExtractorSpec::RgbHist { bins: 0 }.validate().is_err());
        assert!(ExtractorSpec::RgbHist { bins: 17 }.validate().is_err());
        assert!(ExtractorSpec::External {
            command: "  ".into()
        }
        .validate()
        .is_err());
        assert!(ExtractorSpec::default().validate().is_ok());
    }

    #[test]
    fn extract_rejects_empty_batches() {
        assert!(extract(&[], &ExtractorSpec::default()).is_err());
        let empty_group: Vec<Vec<RenderedImage>> = vec![vec![]];
        assert!(extract(&empty_group, &ExtractorSpec::default()).is_err());
    }

    fn two_blob_scene() -> (GaussianCloud, PatchAssignment, Vec<CameraPose>) {
        let cloud = synth_init(
            SynthShape::TwoBlobs {
                separation: 3.0,
                radius: 0.6,
            },
            160,
            9,
        )
        .unwrap();
        let assignment = kmeans(&cloud.positions(), 2, 4, 50).unwrap();
        let poses = crate::camera::sample_poses(
            2,
            8.0,
            11,
            &crate::camera::CameraIntrinsics {
                fov_y: 0.9,
                width: 24,
                height: 24,
            },
        )
        .unwrap();
        (cloud, assignment, poses)
    }

    #[test]
    fn blob_patches_have_distinct_color_features() {
        let (cloud, assignment, poses) = two_blob_scene();
        let m = patch_feature_pipeline(
            &cloud,
            &assignment,
            &poses,
            &ExtractorSpec::RgbHist { bins: 4 },
        )
        .unwrap();
        assert_eq!(m.features.nrows(), 2);
        let diff = (m.features.row(0) - m.features.row(1)).norm();
        assert!(diff > 0.1, "rows differ by {diff}");
    }

    #[test]
    fn single_patch_pipeline_has_one_row() {
        let cloud = synth_init(SynthShape::Sphere { radius: 0.8 }, 40, 2).unwrap();
        let assignment = kmeans(&cloud.positions(), 1, 0, 50).unwrap();
        let poses = crate::camera::sample_poses(
            1,
            4.0,
            3,
            &crate::camera::CameraIntrinsics {
                fov_y: 0.9,
                width: 16,
                height: 16,
            },
        )
        .unwrap();
        let m =
            patch_feature_pipeline(&cloud, &assignment, &poses, &ExtractorSpec::default()).unwrap();
        assert_eq!(m.features.nrows(), 1);
        assert_eq!(m.features.ncols(), 64);
    }

    #[test]
    fn translated_copy_has_matching_features() {
        // The same blob shifted far along +x: auto-framing cancels the
        // translation, so the features must agree to high precision (exact
        // equality is broken only by last-ulp shifts in the framing floats).
        let base = synth_init(SynthShape::Sphere { radius: 0.7 }, 60, 21).unwrap();
        let mut moved = base.clone();
        for g in moved.gaussians.iter_mut() {
            g.position.x += 10.0;
        }
        moved.recompute_bounding_radius();
        let assign1 = kmeans(&base.positions(), 1, 0, 50).unwrap();
        let assign2 = kmeans(&moved.positions(), 1, 0, 50).unwrap();
        let poses = crate::camera::sample_poses(
            2,
            5.0,
            17,
            &crate::camera::CameraIntrinsics {
                fov_y: 0.9,
                width: 20,
                height: 20,
            },
        )
        .unwrap();
        let f1 =
            patch_feature_pipeline(&base, &assign1, &poses, &ExtractorSpec::default()).unwrap();
        let f2 =
            patch_feature_pipeline(&moved, &assign2, &poses, &ExtractorSpec::default()).unwrap();
        for (a, b) in f1.features.iter().zip(f2.features.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn standardize_columns_zeroes_means_and_units_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = DMatrix::from_fn(50, 4, |_, c| {
            rng.gen_range(-1.0..1.0) * (c as f64 + 1.0) + c as f64
        });
        let z = standardize_columns(&m, 1e-8).unwrap();
        for c in 0..4 {
            let mean = z.column(c).sum() / 50.0;
            let var = z
                .column(c)
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / 50.0;
            assert!(mean.abs() < 1e-12, "column {c} mean {mean}");
            assert!(
                (var.sqrt() - 1.0).abs() < 1e-6,
                "column {c} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn standardize_maps_constant_columns_to_zero() {
        let m = DMatrix::from_element(10, 3, 4.25);
        let z = standardize_columns(&m, 1e-8).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(standardize_columns(&m, 0.0).is_err());
        assert!(standardize_columns(&m, f64::NAN).is_err());
    }

    /// Quantize a linear image exactly the way PNG export + raw byte read
    /// does: v -> round(srgb_encode(clamp(v)) * 255) / 255.
    fn quantized_encoded(img: &RenderedImage) -> RenderedImage {
        RenderedImage {
            rgb: img
                .rgb
                .map(|v| (srgb_encode(v.clamp(0.0, 1.0)) * 255.0).round() / 255.0),
            alpha: img
                .alpha
                .iter()
                .map(|a| (a.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }

    /// Reference external extractor: flattened 4x4 downsample of the PNG's
    /// encoded bytes / 255, mirroring the built-in's arithmetic expression
    /// for expression-for-expression so results agree bitwise (before the
    /// protocol's f32 narrowing).
    const ECHO_SCRIPT: &str = r#"
import math
import struct
import sys
from PIL import Image

manifest = sys.argv[1]
paths = [line.strip() for line in open(manifest) if line.strip()]
g = 4
rows = []
for path in paths:
    im = Image.open(path).convert("RGBA")
    w, h = im.size
    px = im.load()

    def luma(x, y):
        p = px[x, y]
        r = p[0] / 255.0
        gg = p[1] / 255.0
        b = p[2] / 255.0
        return 0.2126 * r + 0.7152 * gg + 0.0722 * b

    feats = []
    for oy in range(g):
        sy = (oy + 0.5) * h / g - 0.5
        y0f = math.floor(sy)
        fy = sy - y0f
        y0 = min(max(y0f, 0), h - 1)
        y1 = min(max(y0f + 1, 0), h - 1)
        for ox in range(g):
            sx = (ox + 0.5) * w / g - 0.5
            x0f = math.floor(sx)
            fx = sx - x0f
            x0 = min(max(x0f, 0), w - 1)
            x1 = min(max(x0f + 1, 0), w - 1)
            v = luma(x0, y0) * (1.0 - fx) * (1.0 - fy) \
                + luma(x1, y0) * fx * (1.0 - fy) \
                + luma(x0, y1) * (1.0 - fx) * fy \
                + luma(x1, y1) * fx * fy
            feats.append(v)
    rows.append(feats)

reply = manifest + ".reply"
with open(reply, "wb") as f:
    f.write(b"H3DGFEAT")
    f.write(struct.pack("<II", len(rows), g * g))
    for row in rows:
        f.write(struct.pack("<%df" % len(row), *row))
print(reply)
"#;

    fn write_script(dir: &std::path::Path, name: &str, body: &str) -> String {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        format!("python3 {}", path.display())
    }

    #[test]
    fn external_echo_round_trips_bit_exactly() {
        let scene = |seed| {
            let cloud = synth_init(SynthShape::Sphere { radius: 0.8 }, 20, seed).unwrap();
            let poses = crate::camera::sample_poses(
                1,
                4.0,
                seed,
                &crate::camera::CameraIntrinsics {
                    fov_y: 0.9,
                    width: 19,
                    height: 13,
                },
            )
            .unwrap();
            render(&cloud, &poses[0], [0.3, 0.2, 0.6]).unwrap()
        };
        let (img0, img1, img2) = (scene(1), scene(2), scene(3));
        // Patch 0 has one view; patch 1 pools two views.
        let images = vec![vec![img0.clone()], vec![img1.clone(), img2.clone()]];

        let dir = tempfile::tempdir().unwrap();
        let command = write_script(dir.path(), "echo_extractor.py", ECHO_SCRIPT);
        let external = extract(
            &images,
            &ExtractorSpec::External {
                command: command.clone(),
            },
        )
        .unwrap();
        assert_eq!(external.extractor_id, format!("external:{command}"));
        assert_eq!(external.features.nrows(), 2);
        assert_eq!(external.features.ncols(), 16);

        // Built-in oracle on the byte-identical quantized images, narrowed
        // through the protocol's f32 exactly as the wire does.
        let builtin = |img: &RenderedImage| {
            let m = extract(
                &[vec![quantized_encoded(img)]],
                &ExtractorSpec::DownsampleGray { grid: 4 },
            )
            .unwrap();
            let row: Vec<f64> = m
                .features
                .row(0)
                .iter()
                .map(|&v| (v as f32) as f64)
                .collect();
            row
        };
        let r0 = builtin(&img0);
        let r1 = builtin(&img1);
        let r2 = builtin(&img2);
        for c in 0..16 {
            assert_eq!(external.features[(0, c)], r0[c], "patch 0 col {c}");
            let pooled = (r1[c] + r2[c]) / 2.0;
            assert_eq!(external.features[(1, c)], pooled, "patch 1 col {c}");
        }
    }

    #[test]
    fn external_failure_modes_are_reported() {
        let images = vec![vec![random_image(8, 8, 50)]];
        let dir = tempfile::tempdir().unwrap();

        // Nonzero exit with stderr capture.
        let failing = write_script(
            dir.path(),
            "fail.py",
            "import sys\nsys.stderr.write('deliberate failure')\nsys.exit(3)\n",
        );
        match extract(&images, &ExtractorSpec::External { command: failing }) {
            Err(Error::External(msg)) => {
                assert!(msg.contains("deliberate failure"), "message: {msg}")
            }
            other => panic!("expected External error, got {other:?}"),
        }

        // No reply path on stdout.
        let silent = write_script(dir.path(), "silent.py", "pass\n");
        assert!(matches!(
            extract(&images, &ExtractorSpec::External { command: silent }),
            Err(Error::External(_))
        ));

        // Bad magic.
        let bad_magic = write_script(
            dir.path(),
            "bad_magic.py",
            r#"
import sys
reply = sys.argv[1] + ".reply"
open(reply, "wb").write(b"NOTMAGIC" + bytes(8))
print(reply)
"#,
        );
        assert!(matches!(
            extract(&images, &ExtractorSpec::External { command: bad_magic }),
            Err(Error::External(_))
        ));

        // Row-count mismatch.
        let wrong_rows = write_script(
            dir.path(),
            "wrong_rows.py",
            r#"
import struct
import sys
reply = sys.argv[1] + ".reply"
with open(reply, "wb") as f:
    f.write(b"H3DGFEAT")
    f.write(struct.pack("<II", 5, 2))
    f.write(struct.pack("<10f", *([0.5] * 10)))
print(reply)
"#,
        );
        match extract(
            &images,
            &ExtractorSpec::External {
                command: wrong_rows,
            },
        ) {
            Err(Error::External(msg)) => assert!(msg.contains("5 rows"), "message: {msg}"),
            other => panic!("expected External error, got {other:?}"),
        }

        // Absurd feature magnitudes trip the row-norm bound.
        let huge = write_script(
            dir.path(),
            "huge.py",
            r#"
import struct
import sys
reply = sys.argv[1] + ".reply"
with open(reply, "wb") as f:
    f.write(b"H3DGFEAT")
    f.write(struct.pack("<II", 1, 2))
    f.write(struct.pack("<2f", 1e9, 1e9))
print(reply)
"#,
        );
        assert!(matches!(
            extract(&images, &ExtractorSpec::External { command: huge }),
            Err(Error::Numerical(_))
        ));
    }
}
