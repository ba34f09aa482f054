//! Green strain over landmark grids.
//!
//! All strains compare a current frame against the frame-0 reference of the
//! same sequence: eps = (L_cur^2 - L_ref^2) / (2 * L_ref^2) for a segment of
//! reference length L_ref and current length L_cur. Radial strain averages
//! the 24 endo-to-epi spoke chords; circumferential strain averages the 24
//! wrap-around segments of a ring. Contraction is negative, thickening
//! positive; the minimum possible value is -0.5 (segment collapsed to zero).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkGrid, LandmarkSequence, RING_COUNT, SPOKE_COUNT};

/// Ring index used for the subendocardial layer (second ring from center).
pub const SUBENDO_RING: usize = 1;
/// Ring index used for the midwall layer (fourth ring from center).
pub const MIDWALL_RING: usize = 3;
/// Ring index used for the subepicardial layer (sixth ring from center).
pub const SUBEPI_RING: usize = 5;

/// Green strain of one segment from squared lengths.
/// `ref_len` must be positive; `cur_len` only non-negative.
pub fn green_strain(ref_len: f64, cur_len: f64) -> Result<f64> {
    if !(ref_len.is_finite() && cur_len.is_finite()) {
        return Err(Error::Domain("segment lengths must be finite".into()));
    }
    if ref_len <= 0.0 {
        return Err(Error::Degenerate(format!(
            "reference segment length must be positive, got {ref_len}"
        )));
    }
    if cur_len < 0.0 {
        return Err(Error::Domain(format!("current length must be >= 0, got {cur_len}")));
    }
    Ok((cur_len * cur_len - ref_len * ref_len) / (2.0 * ref_len * ref_len))
}

fn green_strain_sq(ref_sq: f64, cur_sq: f64, what: &str) -> Result<f64> {
    if ref_sq <= 0.0 {
        return Err(Error::Degenerate(format!("zero-length reference {what}")));
    }
    Ok((cur_sq - ref_sq) / (2.0 * ref_sq))
}

/// Radial Green strain: mean over the 24 spokes of the strain of the chord
/// joining ring 0 (endo) to ring 6 (epi) on the same spoke.
pub fn radial_strain(reference: &LandmarkGrid, current: &LandmarkGrid) -> Result<f64> {
    let mut acc = 0.0;
    for s in 0..SPOKE_COUNT {
        let ref_sq = reference.point(0, s).distance_sq(&reference.point(6, s));
        let cur_sq = current.point(0, s).distance_sq(&current.point(6, s));
        acc += green_strain_sq(ref_sq, cur_sq, "radial chord")?;
    }
    Ok(acc / SPOKE_COUNT as f64)
}

/// Circumferential Green strain of one ring: mean over the 24 segments
/// joining consecutive spokes, wrapping spoke 23 back to spoke 0.
pub fn circ_strain(reference: &LandmarkGrid, current: &LandmarkGrid, ring: usize) -> Result<f64> {
    if ring >= RING_COUNT {
        return Err(Error::Domain(format!("ring index {ring} out of range")));
    }
    let mut acc = 0.0;
    for s in 0..SPOKE_COUNT {
        let n = (s + 1) % SPOKE_COUNT;
        let ref_sq = reference.point(ring, s).distance_sq(&reference.point(ring, n));
        let cur_sq = current.point(ring, s).distance_sq(&current.point(ring, n));
        acc += green_strain_sq(ref_sq, cur_sq, "circumferential segment")?;
    }
    Ok(acc / SPOKE_COUNT as f64)
}

/// Strain summary of one frame against the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceStrain {
    /// Radial strain over endo-to-epi chords.
    pub eps_r: f64,
    /// Whole-wall circumferential strain: mean of all 7 rings.
    pub eps_c: f64,
    pub eps_c_subendo: f64,
    pub eps_c_midwall: f64,
    pub eps_c_subepi: f64,
}

/// All strain measures of `current` against `reference`.
pub fn slice_strain(reference: &LandmarkGrid, current: &LandmarkGrid) -> Result<SliceStrain> {
    let mut ring_strain = [0.0; RING_COUNT];
    for (ring, slot) in ring_strain.iter_mut().enumerate() {
        *slot = circ_strain(reference, current, ring)?;
    }
    Ok(SliceStrain {
        eps_r: radial_strain(reference, current)?,
        eps_c: ring_strain.iter().sum::<f64>() / RING_COUNT as f64,
        eps_c_subendo: ring_strain[SUBENDO_RING],
        eps_c_midwall: ring_strain[MIDWALL_RING],
        eps_c_subepi: ring_strain[SUBEPI_RING],
    })
}

/// Per-frame strain with the detected end-systolic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainCurve {
    /// One entry per input frame; frame 0 is all zeros by construction.
    pub per_frame: Vec<SliceStrain>,
    /// Frame with the most negative midwall circumferential strain, earliest
    /// on ties. Empty padded frames (all-zero grids) are not candidates.
    pub es_frame: usize,
}

/// Strain of every frame against frame 0, plus end-systole detection.
pub fn strain_curve(seq: &LandmarkSequence) -> Result<StrainCurve> {
    let reference = seq.frame(0);
    if reference.is_all_zero() {
        return Err(Error::Degenerate("reference frame is all zeros".into()));
    }
    let per_frame: Vec<SliceStrain> =
        seq.frames().iter().map(|f| slice_strain(reference, f)).collect::<Result<_>>()?;

    let mut es_frame = 0;
    let mut best = f64::INFINITY;
    for (t, (frame, s)) in seq.frames().iter().zip(&per_frame).enumerate() {
        if frame.is_all_zero() {
            continue;
        }
        if s.eps_c_midwall < best {
            best = s.eps_c_midwall;
            es_frame = t;
        }
    }
    Ok(StrainCurve { per_frame, es_frame })
}

/// Signed error of a predicted strain against truth (pred - truth).
pub fn strain_error(pred: f64, truth: f64) -> f64 {
    pred - truth
}

/// CSV rendering of a strain curve: a header row, one row per frame with
/// the five strain measures, and a trailing comment recording the detected
/// end-systolic frame.
pub fn strain_csv(curve: &StrainCurve) -> String {
    let mut out = String::from("frame_index,eps_R,eps_C,eps_C_subendo,eps_C_midwall,eps_C_subepi\n");
    for (t, s) in curve.per_frame.iter().enumerate() {
        out.push_str(&format!(
            "{t},{},{},{},{},{}\n",
            s.eps_r, s.eps_c, s.eps_c_subendo, s.eps_c_midwall, s.eps_c_subepi
        ));
    }
    out.push_str(&format!("# es_frame={}\n", curve.es_frame));
    out
}
