//! On-disk formats. All multi-byte values are little-endian; all JSON is
//! emitted with a fixed field order so identical inputs produce identical
//! bytes.
//!
//! Cine binary: 16-byte magic `TAGSTRAINCINE\0\0\0`, a u32 length-prefixed
//! UTF-8 JSON header `{width, height, frames, pixel_spacing_mm, dtype}`,
//! then `frames * height * width` f32 values, frame-major, row-major.
//!
//! Landmark document: JSON object with a `header` (format tag, version,
//! counts, pixel spacing, optional crop transform and provenance), an
//! optional per-landmark `status_mask`, and `frames`: T arrays of 168
//! `[x, y]` pixel pairs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkGrid, LandmarkSequence, Point2, LANDMARK_COUNT, RING_COUNT, SPOKE_COUNT};
use crate::image::{Cine, Image};
use crate::phantom::ManifestEntry;
use crate::preprocess::TransformRecord;
use crate::strain::StrainCurve;

/// Version stamped into provenance blocks.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CINE_MAGIC: &[u8; 16] = b"TAGSTRAINCINE\0\0\0";
pub const LANDMARK_FORMAT: &str = "tagstrain-landmarks";
pub const LANDMARK_VERSION: u32 = 1;

/// Tool version plus the effective configuration that produced a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(config: serde_json::Value) -> Self {
        Provenance { tool_version: TOOL_VERSION.to_string(), config }
    }
}

fn fmt_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut bytes = if pretty {
        serde_json::to_vec_pretty(value)
    } else {
        serde_json::to_vec(value)
    }
    .map_err(|e| fmt_err(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| fmt_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct CineHeader {
    width: usize,
    height: usize,
    frames: usize,
    pixel_spacing_mm: f64,
    dtype: String,
}

pub fn write_cine(path: &Path, cine: &Cine) -> Result<()> {
    let header = CineHeader {
        width: cine.width(),
        height: cine.height(),
        frames: cine.frame_count(),
        pixel_spacing_mm: cine.pixel_spacing_mm,
        dtype: "f32le".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| fmt_err(path, e))?;
    let mut out = Vec::with_capacity(
        16 + 4 + header_bytes.len() + 4 * cine.frame_count() * cine.height() * cine.width(),
    );
    out.extend_from_slice(CINE_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for frame in cine.frames() {
        for &v in frame.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cine(path: &Path) -> Result<Cine> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 16];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CINE_MAGIC {
        return Err(fmt_err(path, "bad magic; not a cine file"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(fmt_err(path, format!("header length {header_len} is implausible")));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: CineHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| fmt_err(path, e))?;
    if header.dtype != "f32le" {
        return Err(fmt_err(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let expected = header
        .frames
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(header.width))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| fmt_err(path, "dimension overflow"))?;
    let mut payload = Vec::with_capacity(expected);
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(fmt_err(
            path,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let frame_px = header.height * header.width;
    let frames = (0..header.frames)
        .map(|t| {
            let data: Vec<f32> = payload[t * frame_px * 4..(t + 1) * frame_px * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Image::from_vec(header.height, header.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Cine::new(id, header.pixel_spacing_mm, frames)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkHeader {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub rings: usize,
    pub spokes: usize,
    pub pixel_spacing_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LandmarkFileRepr {
    header: LandmarkHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status_mask: Option<Vec<bool>>,
    frames: Vec<Vec<[f64; 2]>>,
}

/// A landmark sequence plus the metadata carried in its file header.
#[derive(Debug, Clone)]
pub struct LandmarkDoc {
    pub sequence: LandmarkSequence,
    pub pixel_spacing_mm: f64,
    pub transform: Option<TransformRecord>,
    /// Per-landmark quality flags (true = tracked cleanly), when a producer
    /// reports them.
    pub status_mask: Option<Vec<bool>>,
    pub provenance: Option<Provenance>,
}

impl LandmarkDoc {
    pub fn new(sequence: LandmarkSequence, pixel_spacing_mm: f64) -> Self {
        LandmarkDoc {
            sequence,
            pixel_spacing_mm,
            transform: None,
            status_mask: None,
            provenance: None,
        }
    }
}

pub fn write_landmarks(path: &Path, doc: &LandmarkDoc) -> Result<()> {
    let frames: Vec<Vec<[f64; 2]>> = doc
        .sequence
        .frames()
        .iter()
        .map(|g| g.points().iter().map(|p| [p.x, p.y]).collect())
        .collect();
    let repr = LandmarkFileRepr {
        header: LandmarkHeader {
            format: LANDMARK_FORMAT.to_string(),
            version: LANDMARK_VERSION,
            frames: frames.len(),
            rings: RING_COUNT,
            spokes: SPOKE_COUNT,
            pixel_spacing_mm: doc.pixel_spacing_mm,
            transform: doc.transform.clone(),
            provenance: doc.provenance.clone(),
        },
        status_mask: doc.status_mask.clone(),
        frames,
    };
    save_json(path, &repr, false)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkDoc> {
    let repr: LandmarkFileRepr = load_json(path)?;
    let h = &repr.header;
    if h.format != LANDMARK_FORMAT {
        return Err(fmt_err(path, format!("format is {:?}, not {LANDMARK_FORMAT:?}", h.format)));
    }
    if h.version != LANDMARK_VERSION {
        return Err(fmt_err(path, format!("unsupported version {}", h.version)));
    }
    if h.rings != RING_COUNT || h.spokes != SPOKE_COUNT {
        return Err(fmt_err(path, format!("grid is {}x{}, expected {RING_COUNT}x{SPOKE_COUNT}", h.rings, h.spokes)));
    }
    if h.frames != repr.frames.len() {
        return Err(fmt_err(
            path,
            format!("header says {} frames, body has {}", h.frames, repr.frames.len()),
        ));
    }
    if let Some(mask) = &repr.status_mask {
        if mask.len() != LANDMARK_COUNT {
            return Err(fmt_err(path, format!("status mask has {} entries", mask.len())));
        }
    }
    let grids = repr
        .frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            if frame.len() != LANDMARK_COUNT {
                return Err(fmt_err(
                    path,
                    format!("frame {t} has {} landmarks, expected {LANDMARK_COUNT}", frame.len()),
                ));
            }
            LandmarkGrid::from_points(frame.iter().map(|&[x, y]| Point2::new(x, y)).collect())
                .map_err(|e| fmt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkDoc {
        sequence: LandmarkSequence::new(grids).map_err(|e| fmt_err(path, e))?,
        pixel_spacing_mm: h.pixel_spacing_mm,
        transform: h.transform.clone(),
        status_mask: repr.status_mask,
        provenance: h.provenance.clone(),
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    save_json(path, &entries, true)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    load_json(path)
}

/// Strain curve CSV: header row, one row per frame, then comment trailers
/// recording the detected end-systolic frame and the tool version.
pub fn write_strain_csv(path: &Path, curve: &StrainCurve) -> Result<()> {
    let mut out = String::new();
    out.push_str("frame_index,eps_R,eps_C,eps_C_subendo,eps_C_midwall,eps_C_subepi\n");
    for (t, s) in curve.per_frame.iter().enumerate() {
        out.push_str(&format!(
            "{t},{},{},{},{},{}\n",
            s.eps_r, s.eps_c, s.eps_c_subendo, s.eps_c_midwall, s.eps_c_subepi
        ));
    }
    out.push_str(&format!("# es_frame={}\n", curve.es_frame));
    out.push_str(&format!("# tool_version={TOOL_VERSION}\n"));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a strain CSV written by `write_strain_csv`.
pub fn read_strain_csv(path: &Path) -> Result<StrainCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut per_frame = Vec::new();
    let mut es_frame = None;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# es_frame=") {
            es_frame = Some(rest.trim().parse::<usize>().map_err(|e| fmt_err(path, e))?);
            continue;
        }
        if line.starts_with('#') || line.starts_with("frame_index") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(fmt_err(path, format!("bad row {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| fmt_err(path, format!("{e} in {line:?}")))
        };
        per_frame.push(crate::strain::SliceStrain {
            eps_r: num(1)?,
            eps_c: num(2)?,
            eps_c_subendo: num(3)?,
            eps_c_midwall: num(4)?,
            eps_c_subepi: num(5)?,
        });
    }
    let es_frame = es_frame.ok_or_else(|| fmt_err(path, "missing es_frame trailer"))?;
    if es_frame >= per_frame.len() {
        return Err(fmt_err(path, format!("es_frame {es_frame} out of range")));
    }
    Ok(StrainCurve { per_frame, es_frame })
}

/// Writes `entries` under `dir`, creating it first. Helper for dataset output.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writer with a path-carrying error, for streaming formats.
pub fn create_file(path: &Path) -> Result<impl Write> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}
