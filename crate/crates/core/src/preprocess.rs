//! Cine preprocessing: spatial zero-padding, frame-count normalization,
//! bicubic resampling, and the box-driven crop pipeline feeding the tracker.
//!
//! One sampling convention is used everywhere: output pixel (i, j) of a
//! resampled image reads the source at (j * w_in / w_out, i * h_in / h_out),
//! and a crop to N x N reads (x_min + j * box_w / N, y_min + i * box_h / N).
//! The crop convention matches `geometry::map_coords`, so landmarks and
//! pixels transform consistently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_coords, BoundingBox, MapDirection, Point2};
use crate::image::{Cine, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    ZScore,
    MinMax,
    None,
}

/// Settings for the pad / frame-normalize / crop pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocConfig {
    /// Square spatial padding target, px.
    pub pad_to: usize,
    /// Frame count every cine is normalized to.
    pub frame_target: usize,
    /// Square crop output size, px.
    pub crop_to: usize,
    /// Box growth applied before cropping.
    pub expand_fraction: f64,
    pub normalization: Normalization,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            pad_to: 256,
            frame_target: 20,
            crop_to: 128,
            expand_fraction: 0.6,
            normalization: Normalization::ZScore,
        }
    }
}

impl PreprocConfig {
    /// Profile matching the 64 px toy phantoms.
    pub fn toy() -> Self {
        PreprocConfig { pad_to: 64, crop_to: 64, ..PreprocConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pad_to == 0 || self.crop_to == 0 || self.frame_target < 2 {
            return Err(Error::Config(
                "pad_to and crop_to must be positive, frame_target at least 2".into(),
            ));
        }
        if !(self.expand_fraction.is_finite() && self.expand_fraction >= 0.0) {
            return Err(Error::Config("expand_fraction must be >= 0".into()));
        }
        Ok(())
    }
}

/// How preprocessing placed a cine into crop space. Enough to map any crop
/// coordinate back to the original (pre-pad) image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    /// Crop box in padded-image coordinates.
    #[serde(rename = "box")]
    pub crop_box: BoundingBox,
    pub crop_to: usize,
    /// (row, col) offset added by padding.
    pub pad_offsets: [usize; 2],
}

impl TransformRecord {
    /// Original-image points -> crop points.
    pub fn to_crop(&self, points: &[Point2]) -> Result<Vec<Point2>> {
        let off = Point2::new(self.pad_offsets[1] as f64, self.pad_offsets[0] as f64);
        let padded: Vec<Point2> = points.iter().map(|&p| p + off).collect();
        map_coords(&padded, &self.crop_box, self.crop_to, self.crop_to, MapDirection::Forward)
    }

    /// Crop points -> original-image points.
    pub fn to_original(&self, points: &[Point2]) -> Result<Vec<Point2>> {
        let off = Point2::new(self.pad_offsets[1] as f64, self.pad_offsets[0] as f64);
        let padded =
            map_coords(points, &self.crop_box, self.crop_to, self.crop_to, MapDirection::Inverse)?;
        Ok(padded.into_iter().map(|p| p - off).collect())
    }
}

/// Zero-pads every frame to `pad_h` x `pad_w`, centered, with the extra
/// row/column going to the bottom/right on odd remainders. Returns the
/// padded cine and the (row, col) offset of the original content.
pub fn pad_spatial(cine: &Cine, pad_h: usize, pad_w: usize) -> Result<(Cine, [usize; 2])> {
    let (h, w) = (cine.height(), cine.width());
    if h > pad_h || w > pad_w {
        return Err(Error::Domain(format!(
            "cannot pad {h}x{w} down to {pad_h}x{pad_w}"
        )));
    }
    let off_r = (pad_h - h) / 2;
    let off_c = (pad_w - w) / 2;
    let frames = cine
        .frames()
        .iter()
        .map(|f| {
            let mut out = Image::zeros(pad_h, pad_w);
            for r in 0..h {
                let dst_start = (r + off_r) * pad_w + off_c;
                out.data_mut()[dst_start..dst_start + w].copy_from_slice(f.row(r));
            }
            out
        })
        .collect();
    Ok((Cine::new(cine.id.clone(), cine.pixel_spacing_mm, frames)?, [off_r, off_c]))
}

/// Normalizes the frame count to `target`: keeps the first `target` frames
/// of longer cines, appends zero frames to shorter ones. The mask flags
/// which output frames carry real data. Idempotent at the target length.
pub fn normalize_frames(cine: &Cine, target: usize) -> Result<(Cine, Vec<bool>)> {
    if target < 2 {
        return Err(Error::Domain("frame target must be at least 2".into()));
    }
    let n = cine.frame_count();
    let mut frames: Vec<Image> = cine.frames().iter().take(target).cloned().collect();
    let mut mask = vec![true; frames.len()];
    while frames.len() < target {
        frames.push(Image::zeros(cine.height(), cine.width()));
        mask.push(false);
    }
    debug_assert_eq!(mask.len(), target);
    let _ = n;
    Ok((Cine::new(cine.id.clone(), cine.pixel_spacing_mm, frames)?, mask))
}

/// Keys cubic-convolution kernel with a = -0.5 (linear precision).
fn cubic_kernel(s: f64) -> f64 {
    let s = s.abs();
    if s <= 1.0 {
        (1.5 * s - 2.5) * s * s + 1.0
    } else if s < 2.0 {
        ((-0.5 * s + 2.5) * s - 4.0) * s + 2.0
    } else {
        0.0
    }
}

/// Per-output-sample taps into one source axis: 4 clamped indices + weights.
fn axis_taps(src_positions: &[f64], src_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    src_positions
        .iter()
        .map(|&x| {
            let i0 = x.floor() as isize;
            let f = x - i0 as f64;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let i = i0 - 1 + k as isize;
                idx[k] = i.clamp(0, src_len as isize - 1) as usize;
                w[k] = cubic_kernel(f - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Samples `image` at the grid given by `xs` x `ys` (continuous source
/// coordinates) with edge-clamped bicubic interpolation. Separable: rows
/// first, then columns, accumulating in f64.
fn sample_grid_bicubic(image: &Image, xs: &[f64], ys: &[f64]) -> Image {
    let (h_in, w_in) = (image.height(), image.width());
    let (out_w, out_h) = (xs.len(), ys.len());
    let tx = axis_taps(xs, w_in);
    let ty = axis_taps(ys, h_in);

    // Horizontal pass: h_in rows x out_w columns.
    let mut mid = vec![0f64; h_in * out_w];
    for r in 0..h_in {
        let row = image.row(r);
        let out_row = &mut mid[r * out_w..(r + 1) * out_w];
        for (j, (idx, w)) in tx.iter().enumerate() {
            out_row[j] = w[0] * row[idx[0]] as f64
                + w[1] * row[idx[1]] as f64
                + w[2] * row[idx[2]] as f64
                + w[3] * row[idx[3]] as f64;
        }
    }
    // Vertical pass.
    let mut out = Image::zeros(out_h, out_w);
    for (i, (idx, w)) in ty.iter().enumerate() {
        let (r0, r1, r2, r3) = (idx[0], idx[1], idx[2], idx[3]);
        for j in 0..out_w {
            let v = w[0] * mid[r0 * out_w + j]
                + w[1] * mid[r1 * out_w + j]
                + w[2] * mid[r2 * out_w + j]
                + w[3] * mid[r3 * out_w + j];
            out.set(i, j, v as f32);
        }
    }
    out
}

/// Bicubic resize to `out_h` x `out_w`. Same-size input is returned
/// unchanged (the sampling grid is the identity there); constants are
/// preserved everywhere and linear ramps in the interior.
pub fn resample_bicubic(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Domain("resample target must be positive".into()));
    }
    let sx = image.width() as f64 / out_w as f64;
    let sy = image.height() as f64 / out_h as f64;
    let xs: Vec<f64> = (0..out_w).map(|j| j as f64 * sx).collect();
    let ys: Vec<f64> = (0..out_h).map(|i| i as f64 * sy).collect();
    Ok(sample_grid_bicubic(image, &xs, &ys))
}

/// Applies the chosen normalization jointly over all frames, in place.
fn normalize_intensities(frames: &mut [Image], normalization: Normalization) {
    match normalization {
        Normalization::None => {}
        Normalization::ZScore => {
            let n: usize = frames.iter().map(|f| f.data().len()).sum();
            let mean = frames.iter().flat_map(|f| f.data()).map(|&v| v as f64).sum::<f64>()
                / n as f64;
            let var = frames
                .iter()
                .flat_map(|f| f.data())
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sd = var.sqrt();
            let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
            for f in frames.iter_mut() {
                for v in f.data_mut() {
                    *v = ((*v as f64 - mean) * scale) as f32;
                }
            }
        }
        Normalization::MinMax => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for f in frames.iter() {
                for &v in f.data() {
                    lo = lo.min(v as f64);
                    hi = hi.max(v as f64);
                }
            }
            let range = hi - lo;
            let scale = if range > 1e-12 { 1.0 / range } else { 1.0 };
            for f in frames.iter_mut() {
                for v in f.data_mut() {
                    *v = ((*v as f64 - lo) * scale) as f32;
                }
            }
        }
    }
}

/// Crops every frame to `crop_box` resampled at `crop_to` x `crop_to`
/// (bicubic), then applies intensity normalization jointly over the cine.
/// The same box is used for all frames. `pad_offsets` is recorded verbatim
/// so the transform can undo the padding step as well.
pub fn crop_pipeline(
    cine: &Cine,
    crop_box: &BoundingBox,
    cfg: &PreprocConfig,
    pad_offsets: [usize; 2],
) -> Result<(Cine, TransformRecord)> {
    cfg.validate()?;
    let n = cfg.crop_to;
    let sx = crop_box.width() / n as f64;
    let sy = crop_box.height() / n as f64;
    let xs: Vec<f64> = (0..n).map(|j| crop_box.x_min + j as f64 * sx).collect();
    let ys: Vec<f64> = (0..n).map(|i| crop_box.y_min + i as f64 * sy).collect();
    let mut frames: Vec<Image> =
        cine.frames().iter().map(|f| sample_grid_bicubic(f, &xs, &ys)).collect();
    normalize_intensities(&mut frames, cfg.normalization);
    let out = Cine::new(cine.id.clone(), cine.pixel_spacing_mm, frames)?;
    let record =
        TransformRecord { crop_box: *crop_box, crop_to: n, pad_offsets };
    Ok((out, record))
}

/// Z-scores a single image over its own pixels (used for localizer inputs).
pub fn zscore_image(image: &Image) -> Image {
    let mut frames = [image.clone()];
    normalize_intensities(&mut frames, Normalization::ZScore);
    let [out] = frames;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp_image(h: usize, w: usize, fx: f32, fy: f32) -> Image {
        let mut im = Image::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                im.set(r, c, fx * c as f32 + fy * r as f32);
            }
        }
        im
    }

    fn one_frame_cine(im: Image) -> Cine {
        Cine::new("t", 1.4, vec![im]).unwrap()
    }

    #[test]
    fn pad_centers_even_remainder() {
        let mut im = Image::zeros(250, 240);
        im.set(0, 0, 5.0);
        let (padded, off) = pad_spatial(&one_frame_cine(im), 256, 256).unwrap();
        assert_eq!(off, [3, 8]);
        assert_eq!(padded.frame(0).get(3, 8), 5.0);
        assert_eq!(padded.frame(0).get(0, 0), 0.0);
    }

    #[test]
    fn pad_odd_remainder_extra_bottom_right() {
        let im = Image::zeros(251, 253);
        let (_, off) = pad_spatial(&one_frame_cine(im), 256, 256).unwrap();
        // 5 rows to split: 2 top, 3 bottom; 3 cols: 1 left, 2 right.
        assert_eq!(off, [2, 1]);
    }

    #[test]
    fn pad_rejects_oversize() {
        let im = Image::zeros(300, 10);
        assert!(pad_spatial(&one_frame_cine(im), 256, 256).is_err());
    }

    #[test]
    fn frame_normalization_truncates_and_pads() {
        let frames: Vec<Image> = (0..25)
            .map(|t| {
                let mut im = Image::zeros(4, 4);
                im.set(0, 0, t as f32);
                im
            })
            .collect();
        let cine = Cine::new("t", 1.4, frames).unwrap();
        let (out, mask) = normalize_frames(&cine, 20).unwrap();
        assert_eq!(out.frame_count(), 20);
        assert_eq!(out.frame(19).get(0, 0), 19.0);
        assert!(mask.iter().all(|&m| m));

        let short = Cine::new("s", 1.4, cine.frames()[..16].to_vec()).unwrap();
        let (out, mask) = normalize_frames(&short, 20).unwrap();
        assert_eq!(out.frame_count(), 20);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 16);
        assert!(out.frame(19).data().iter().all(|&v| v == 0.0));

        // Idempotent at the target length.
        let (again, mask2) = normalize_frames(&out, 20).unwrap();
        assert_eq!(again.frames(), out.frames());
        assert_eq!(mask2.len(), 20);
    }

    #[test]
    fn bicubic_identity_at_same_size() {
        let im = ramp_image(12, 9, 1.3, -0.7);
        let out = resample_bicubic(&im, 12, 9).unwrap();
        assert_eq!(out.data(), im.data());
    }

    #[test]
    fn bicubic_preserves_constants() {
        let mut im = Image::zeros(10, 10);
        im.data_mut().iter_mut().for_each(|v| *v = 4.25);
        let out = resample_bicubic(&im, 23, 17).unwrap();
        for &v in out.data() {
            assert_relative_eq!(v as f64, 4.25, epsilon = 1e-6);
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramp_in_interior() {
        let im = ramp_image(16, 16, 2.0, 3.0);
        let out = resample_bicubic(&im, 32, 32).unwrap();
        for i in 4..28 {
            for j in 4..28 {
                let (x, y) = (j as f64 * 0.5, i as f64 * 0.5);
                assert_relative_eq!(out.get(i, j) as f64, 2.0 * x + 3.0 * y, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn crop_samples_the_documented_grid() {
        let im = ramp_image(256, 256, 2.0, 3.0);
        let cine = one_frame_cine(im);
        let crop_box = BoundingBox::new(20.0, 20.0, 180.0, 180.0).unwrap();
        let cfg = PreprocConfig {
            crop_to: 128,
            normalization: Normalization::None,
            ..PreprocConfig::default()
        };
        let (out, rec) = crop_pipeline(&cine, &crop_box, &cfg, [0, 0]).unwrap();
        for (i, j) in [(0usize, 0usize), (10, 50), (64, 64), (100, 20)] {
            let x = 20.0 + j as f64 * 1.25;
            let y = 20.0 + i as f64 * 1.25;
            assert_relative_eq!(out.frame(0).get(i, j) as f64, 2.0 * x + 3.0 * y, epsilon = 1e-3);
        }
        // Landmarks map with the same affine: crop (64, 64) -> original (100, 100).
        let back = rec.to_original(&[Point2::new(64.0, 64.0)]).unwrap();
        assert_relative_eq!(back[0].x, 100.0, epsilon = 1e-12);
        assert_relative_eq!(back[0].y, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_record_roundtrip_with_padding() {
        let rec = TransformRecord {
            crop_box: BoundingBox::new(12.0, 8.0, 52.0, 58.0).unwrap(),
            crop_to: 64,
            pad_offsets: [3, 8],
        };
        let pts = [Point2::new(17.25, 33.5), Point2::new(0.0, 1.0)];
        let crop = rec.to_crop(&pts).unwrap();
        let back = rec.to_original(&crop).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert_relative_eq!(a.x, b.x, epsilon = 1e-9);
            assert_relative_eq!(a.y, b.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn zscore_normalizes_jointly_over_frames() {
        let mut a = Image::zeros(4, 4);
        let mut b = Image::zeros(4, 4);
        a.data_mut().iter_mut().for_each(|v| *v = 10.0);
        b.data_mut().iter_mut().for_each(|v| *v = 12.0);
        let cine = Cine::new("t", 1.0, vec![a, b]).unwrap();
        let cfg = PreprocConfig {
            crop_to: 4,
            normalization: Normalization::ZScore,
            ..PreprocConfig::default()
        };
        let full = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let (out, _) = crop_pipeline(&cine, &full, &cfg, [0, 0]).unwrap();
        assert_relative_eq!(out.frame(0).get(0, 0) as f64, -1.0, epsilon = 1e-6);
        assert_relative_eq!(out.frame(1).get(0, 0) as f64, 1.0, epsilon = 1e-6);
    }
}
