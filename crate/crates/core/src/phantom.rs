//! Analytic tagged-cine phantom: an incompressible 2-D annulus contracting
//! and rotating under a raised-cosine activation, imaged with a fading
//! two-direction grid tag pattern and optional Gaussian noise.
//!
//! Every quantity has a closed form, so ground-truth landmark motion and
//! strain are exact: the deformation maps material radius r0 to
//! r = sqrt(r_endo(t)^2 + r0^2 - r_endo^2) (area preserving on the annulus)
//! plus a solid rotation, and the renderer evaluates the tag pattern at the
//! closed-form inverse of that map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_grid, AnnulusSpec, BoundingBox, LandmarkGrid, LandmarkSequence, Orientation, Point2,
    RING_COUNT,
};
use crate::image::{Cine, Image};
use crate::rng::stream_rng;
use crate::strain::SliceStrain;

/// Activation level the wall relaxes back to by the final frame.
pub const RESIDUAL_ACTIVATION: f64 = 0.15;
/// Width of the smooth blend from the annulus deformation to identity,
/// measured outward from the deformed epicardial radius.
pub const BLEND_BAND_PX: f64 = 8.0;

/// Full description of one phantom case. Serialized into dataset manifests,
/// so a case can be regenerated bit-identically from its manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub pixel_spacing_mm: f64,
    /// Frames in the cine (T).
    pub frame_count: usize,
    /// Frame of peak contraction, 1 <= es_frame < T.
    pub es_frame: usize,
    pub annulus: AnnulusSpec,
    /// Peak endocardial radius reduction fraction, in [0, 0.5).
    pub contraction: f64,
    /// Peak solid rotation, radians.
    pub rotation_max: f64,
    pub tag_spacing_mm: f64,
    /// Tag line direction, radians.
    pub tag_angle: f64,
    /// Initial tag modulation depth in [0, 1].
    pub tag_depth: f64,
    /// Per-frame exponential tag fading rate.
    pub fade_rate: f64,
    /// Myocardium intensity.
    pub background_level: f64,
    /// Untagged blood-pool intensity.
    pub blood_level: f64,
    /// Intensity of the static tagged surround.
    pub outside_level: f64,
    /// Standard deviation of additive Gaussian noise; 0 disables noise.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_w: 256,
            image_h: 256,
            pixel_spacing_mm: 1.4,
            frame_count: 20,
            es_frame: 9,
            annulus: AnnulusSpec {
                center: Point2::new(128.0, 128.0),
                r_endo: 20.0,
                r_epi: 32.0,
                theta_start: std::f64::consts::PI,
                orientation: Orientation::Ccw,
            },
            contraction: 0.25,
            rotation_max: 0.08,
            tag_spacing_mm: 6.0,
            tag_angle: 0.0,
            tag_depth: 0.65,
            // Exponential recovery of the tag saturation: frame interval over
            // a T1 of 850 ms at 41 ms per frame.
            fade_rate: 41.0 / 850.0,
            background_level: 1.0,
            blood_level: 0.35,
            outside_level: 0.7,
            noise_sigma: 0.02,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Small 64x64 profile that trains in minutes on a laptop core.
    pub fn toy() -> Self {
        PhantomSpec {
            image_w: 64,
            image_h: 64,
            annulus: AnnulusSpec {
                center: Point2::new(32.0, 32.0),
                r_endo: 10.0,
                r_epi: 16.0,
                theta_start: std::f64::consts::PI,
                orientation: Orientation::Ccw,
            },
            ..PhantomSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.annulus.validate()?;
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        if self.frame_count < 2 {
            return Err(Error::Domain("phantom needs at least 2 frames".into()));
        }
        if !(1..self.frame_count).contains(&self.es_frame) {
            return Err(Error::Domain(format!(
                "es_frame must lie in [1, {}), got {}",
                self.frame_count, self.es_frame
            )));
        }
        if !(0.0..0.5).contains(&self.contraction) {
            return Err(Error::Domain(format!(
                "contraction must lie in [0, 0.5), got {}",
                self.contraction
            )));
        }
        if !(0.0..=1.0).contains(&self.tag_depth) {
            return Err(Error::Domain(format!("tag depth must lie in [0,1], got {}", self.tag_depth)));
        }
        for (name, v) in [
            ("pixel_spacing_mm", self.pixel_spacing_mm),
            ("tag_spacing_mm", self.tag_spacing_mm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fade_rate < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Domain("fade rate and noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Tag spacing in pixels.
    pub fn tag_spacing_px(&self) -> f64 {
        self.tag_spacing_mm / self.pixel_spacing_mm
    }

    /// Endocardial radius at frame `t`.
    pub fn r_endo_at(&self, t: usize) -> f64 {
        self.annulus.r_endo * (1.0 - self.contraction * activation(self, t))
    }

    /// Deformed radius of material radius `r0` inside the annulus at frame `t`.
    pub fn deformed_radius(&self, r0: f64, t: usize) -> f64 {
        let re = self.annulus.r_endo;
        let re_t = self.r_endo_at(t);
        (re_t * re_t + r0 * r0 - re * re).sqrt()
    }

    /// Epicardial radius at frame `t`.
    pub fn r_epi_at(&self, t: usize) -> f64 {
        self.deformed_radius(self.annulus.r_epi, t)
    }

    /// Solid rotation angle at frame `t`.
    pub fn rotation_at(&self, t: usize) -> f64 {
        self.rotation_max * activation(self, t)
    }
}

/// Contraction drive: raised-cosine rise from 0 at frame 0 to 1 at es_frame,
/// then raised-cosine relaxation to `RESIDUAL_ACTIVATION` at the last frame.
pub fn activation(spec: &PhantomSpec, t: usize) -> f64 {
    let es = spec.es_frame as f64;
    let last = (spec.frame_count - 1) as f64;
    let t = t as f64;
    if t <= es {
        0.5 * (1.0 - (std::f64::consts::PI * t / es).cos())
    } else {
        let phase = (t - es) / (last - es);
        RESIDUAL_ACTIVATION
            + (1.0 - RESIDUAL_ACTIVATION) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Forward deformation: where the material point `p0` sits at frame `t`.
///
/// Inside the annulus this is the exact incompressible map plus rotation;
/// the blood pool scales affinely with the endo radius; outside, the map
/// blends smoothly to identity over `BLEND_BAND_PX` beyond the deformed
/// epicardial radius (the blend weight is measured on the deformed radius,
/// so annulus material is never blended).
pub fn deform(spec: &PhantomSpec, p0: Point2, t: usize) -> Point2 {
    let c = spec.annulus.center;
    let d = p0 - c;
    let r0 = (d.x * d.x + d.y * d.y).sqrt();
    let phi = spec.rotation_at(t);
    let re = spec.annulus.r_endo;
    let re_t = spec.r_endo_at(t);

    if r0 == 0.0 {
        return p0;
    }
    let theta = d.y.atan2(d.x) + phi;
    if r0 < re {
        let r = r0 * re_t / re;
        return Point2::new(c.x + r * theta.cos(), c.y + r * theta.sin());
    }
    let r_full = spec.deformed_radius(r0, t);
    let full = Point2::new(c.x + r_full * theta.cos(), c.y + r_full * theta.sin());
    let r_epi_t = spec.r_epi_at(t);
    if r_full <= r_epi_t {
        return full;
    }
    let w = smoothstep((r_full - r_epi_t) / BLEND_BAND_PX);
    full * (1.0 - w) + p0 * w
}

enum Region {
    Blood,
    Myocardium,
    Outside,
}

/// Inverse map for rendering: the material coordinate imaged at pixel `x`.
fn material_coord(spec: &PhantomSpec, x: Point2, t: usize) -> (Point2, Region) {
    let c = spec.annulus.center;
    let d = x - c;
    let rho = (d.x * d.x + d.y * d.y).sqrt();
    let re_t = spec.r_endo_at(t);
    if rho < re_t {
        return (x, Region::Blood);
    }
    let r_epi_t = spec.r_epi_at(t);
    if rho >= r_epi_t + BLEND_BAND_PX {
        return (x, Region::Outside);
    }
    let re = spec.annulus.r_endo;
    let r0 = (rho * rho - re_t * re_t + re * re).sqrt();
    let theta0 = d.y.atan2(d.x) - spec.rotation_at(t);
    let inv = Point2::new(c.x + r0 * theta0.cos(), c.y + r0 * theta0.sin());
    if rho <= r_epi_t {
        (inv, Region::Myocardium)
    } else {
        let w = smoothstep((rho - r_epi_t) / BLEND_BAND_PX);
        (inv * (1.0 - w) + x * w, Region::Outside)
    }
}

/// Two-direction grid tag modulation at material coordinate `x0`, with the
/// tag depth already faded for the frame.
fn tag_modulation(spec: &PhantomSpec, x0: Point2, depth: f64) -> f64 {
    let s = spec.tag_spacing_px();
    let (ca, sa) = (spec.tag_angle.cos(), spec.tag_angle.sin());
    let u = (ca * x0.x + sa * x0.y) / s;
    let v = (-sa * x0.x + ca * x0.y) / s;
    let cu = (std::f64::consts::PI * u).cos();
    let cv = (std::f64::consts::PI * v).cos();
    (1.0 - depth * cu * cu) * (1.0 - depth * cv * cv)
}

/// Renders frame `t`. Noise, when enabled, is drawn from `rng` in row-major
/// pixel order; pass a per-frame stream for order-independent determinism.
pub fn render_frame(spec: &PhantomSpec, t: usize, rng: &mut impl Rng) -> Result<Image> {
    spec.validate()?;
    if t >= spec.frame_count {
        return Err(Error::Domain(format!("frame {t} out of range 0..{}", spec.frame_count)));
    }
    let depth = spec.tag_depth * (-spec.fade_rate * t as f64).exp();
    let mut im = Image::zeros(spec.image_h, spec.image_w);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };
    for row in 0..spec.image_h {
        for col in 0..spec.image_w {
            let x = Point2::new(col as f64, row as f64);
            let (x0, region) = material_coord(spec, x, t);
            let mut v = match region {
                Region::Blood => spec.blood_level,
                Region::Myocardium => spec.background_level * tag_modulation(spec, x0, depth),
                Region::Outside => spec.outside_level * tag_modulation(spec, x0, depth),
            };
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            im.set(row, col, v as f32);
        }
    }
    Ok(im)
}

/// A generated case: the cine, exact landmark truth, and the tight frame-0
/// landmark box.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub cine: Cine,
    pub truth: LandmarkSequence,
    pub truth_bbox: BoundingBox,
}

/// Generates one case: truth landmarks from the forward map, frames from the
/// renderer, per-frame noise streams derived from `spec.rng_seed`.
pub fn generate_case(spec: &PhantomSpec, case_id: &str) -> Result<PhantomCase> {
    spec.validate()?;
    let grid = build_grid(&spec.annulus)?;
    let truth_frames: Vec<LandmarkGrid> = (0..spec.frame_count)
        .map(|t| grid.map(|p| deform(spec, p, t)))
        .collect::<Result<_>>()?;
    let truth = LandmarkSequence::new(truth_frames)?;
    let truth_bbox = truth.frame(0).bbox()?;

    let frames: Vec<Image> = (0..spec.frame_count)
        .map(|t| render_frame(spec, t, &mut stream_rng(spec.rng_seed, t as u64)))
        .collect::<Result<_>>()?;
    let cine = Cine::new(case_id, spec.pixel_spacing_mm, frames)?;
    Ok(PhantomCase { spec: spec.clone(), cine, truth, truth_bbox })
}

/// Strain of the phantom at frame `t`, computed directly from the radial map
/// without touching any landmarks. Chords between equal angles scale with
/// the radius and spokes stay collinear with the center, so:
/// ring strain = (rho_k(t)^2 / r_k^2 - 1) / 2 and
/// radial strain = ((rho_6 - rho_0)^2 / (r_6 - r_0)^2 - 1) / 2.
pub fn closed_form_strain(spec: &PhantomSpec, t: usize) -> SliceStrain {
    let ring_r = |k: usize| spec.annulus.ring_radius(k);
    let ring_strain = |k: usize| {
        let r0 = ring_r(k);
        let rt = spec.deformed_radius(r0, t);
        ((rt / r0).powi(2) - 1.0) / 2.0
    };
    let mut sum = 0.0;
    for k in 0..RING_COUNT {
        sum += ring_strain(k);
    }
    let dr_ref = ring_r(6) - ring_r(0);
    let dr_t = spec.deformed_radius(ring_r(6), t) - spec.deformed_radius(ring_r(0), t);
    SliceStrain {
        eps_r: ((dr_t / dr_ref).powi(2) - 1.0) / 2.0,
        eps_c: sum / RING_COUNT as f64,
        eps_c_subendo: ring_strain(crate::strain::SUBENDO_RING),
        eps_c_midwall: ring_strain(crate::strain::MIDWALL_RING),
        eps_c_subepi: ring_strain(crate::strain::SUBEPI_RING),
    }
}

/// Uniform sampling ranges for dataset generation. Each `[lo, hi]` pair is
/// inclusive; a zero-width range pins the parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRanges {
    /// Max absolute center offset, px, drawn per axis.
    pub center_jitter: f64,
    pub r_endo: [f64; 2],
    pub wall_thickness: [f64; 2],
    pub contraction: [f64; 2],
    pub rotation_max: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub fade_rate: [f64; 2],
    pub theta_start: [f64; 2],
    pub tag_angle: [f64; 2],
    pub tag_depth: [f64; 2],
}

impl Default for GenRanges {
    fn default() -> Self {
        // Matched to the default 256 px spec. The spoke phase (theta_start)
        // is pinned: a bare annulus carries no anatomical cue for it, so a
        // randomized phase would be unlearnable from pixels.
        GenRanges {
            center_jitter: 10.0,
            r_endo: [16.0, 24.0],
            wall_thickness: [9.0, 14.0],
            contraction: [0.15, 0.35],
            rotation_max: [0.0, 0.15],
            noise_sigma: [0.0, 0.04],
            fade_rate: [0.035, 0.065],
            theta_start: [std::f64::consts::PI, std::f64::consts::PI],
            tag_angle: [0.0, 0.0],
            tag_depth: [0.55, 0.75],
        }
    }
}

impl GenRanges {
    /// Ranges scaled to the 64 px toy profile.
    pub fn toy() -> Self {
        GenRanges {
            center_jitter: 3.0,
            r_endo: [8.0, 11.5],
            wall_thickness: [4.0, 6.5],
            ..GenRanges::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.center_jitter < 0.0 {
            return Err(Error::Config("center_jitter must be >= 0".into()));
        }
        for (name, [lo, hi]) in [
            ("r_endo", self.r_endo),
            ("wall_thickness", self.wall_thickness),
            ("contraction", self.contraction),
            ("rotation_max", self.rotation_max),
            ("noise_sigma", self.noise_sigma),
            ("fade_rate", self.fade_rate),
            ("theta_start", self.theta_start),
            ("tag_angle", self.tag_angle),
            ("tag_depth", self.tag_depth),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("range {name} must satisfy lo <= hi")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train/val/test fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.72, val: 0.18, test: 0.10 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let s = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!("split fractions must sum to 1, got {s}")));
        }
        Ok(())
    }

    /// Split sizes for `n` cases: floor of each fraction, remainder handed
    /// out train-first (train, then val, then test).
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let mut c = [
            (self.train * n as f64).floor() as usize,
            (self.val * n as f64).floor() as usize,
            (self.test * n as f64).floor() as usize,
        ];
        let mut rest = n - (c[0] + c[1] + c[2]);
        let mut i = 0;
        while rest > 0 {
            c[i % 3] += 1;
            rest -= 1;
            i += 1;
        }
        c
    }

    pub fn split_of(&self, index: usize, n: usize) -> Split {
        let c = self.counts(n);
        if index < c[0] {
            Split::Train
        } else if index < c[0] + c[1] {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Dataset generation settings: the base case plus sampling ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomGenConfig {
    pub base: PhantomSpec,
    pub ranges: GenRanges,
    pub splits: SplitFractions,
}

impl PhantomGenConfig {
    pub fn toy() -> Self {
        PhantomGenConfig {
            base: PhantomSpec::toy(),
            ranges: GenRanges::toy(),
            splits: SplitFractions::default(),
        }
    }
}

/// One manifest row; `spec` regenerates the case exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub cine_path: String,
    pub landmarks_path: String,
    /// Tight frame-0 landmark box in image coordinates.
    pub bbox: BoundingBox,
    pub split: Split,
    pub spec: PhantomSpec,
    /// Optional region label carried through to evaluation reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

/// Draws the spec of case `index` for dataset seed `seed`.
pub fn draw_case_spec(cfg: &PhantomGenConfig, seed: u64, index: usize) -> Result<PhantomSpec> {
    cfg.base.validate()?;
    cfg.ranges.validate()?;
    let mut rng = stream_rng(seed, index as u64);
    let rr = &cfg.ranges;
    let base = &cfg.base;
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, j: f64| {
        if j == 0.0 {
            0.0
        } else {
            rng.random_range(-j..=j)
        }
    };
    let cx = base.annulus.center.x + jitter(&mut rng, rr.center_jitter);
    let cy = base.annulus.center.y + jitter(&mut rng, rr.center_jitter);
    let r_endo = rr.draw(&mut rng, rr.r_endo);
    let wall = rr.draw(&mut rng, rr.wall_thickness);
    let theta = rr.draw(&mut rng, rr.theta_start).rem_euclid(std::f64::consts::TAU);
    let spec = PhantomSpec {
        annulus: AnnulusSpec {
            center: Point2::new(cx, cy),
            r_endo,
            r_epi: r_endo + wall,
            theta_start: theta,
            orientation: base.annulus.orientation,
        },
        contraction: rr.draw(&mut rng, rr.contraction),
        rotation_max: rr.draw(&mut rng, rr.rotation_max),
        noise_sigma: rr.draw(&mut rng, rr.noise_sigma),
        fade_rate: rr.draw(&mut rng, rr.fade_rate),
        tag_angle: rr.draw(&mut rng, rr.tag_angle),
        tag_depth: rr.draw(&mut rng, rr.tag_depth),
        rng_seed: crate::rng::derive_seed(seed, (index as u64) | (1 << 63)),
        ..base.clone()
    };
    spec.validate()?;
    Ok(spec)
}

/// Generates `n` cases in memory. Case `i` is drawn from stream `(seed, i)`
/// and assigned its split by index, so results are independent of render
/// order and thread count.
pub fn generate_dataset(
    cfg: &PhantomGenConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<(PhantomCase, Split)>> {
    if n == 0 {
        return Err(Error::Domain("dataset size must be positive".into()));
    }
    cfg.splits.validate()?;
    let specs: Vec<PhantomSpec> =
        (0..n).map(|i| draw_case_spec(cfg, seed, i)).collect::<Result<_>>()?;
    specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let case = generate_case(&spec, &format!("case_{i:04}"))?;
            Ok((case, cfg.splits.split_of(i, n)))
        })
        .collect()
}
