//! Landmark-grid geometry: points, boxes, the 7x24 annulus grid, and the
//! affine map between original-image and crop coordinates.
//!
//! Coordinates are continuous pixels with x along columns and y along rows;
//! integer positions coincide with pixel sample points. Boxes are half-open:
//! a point lies inside when min <= p < max on both axes.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Transmural rings per grid, ring 0 at the endocardium.
pub const RING_COUNT: usize = 7;
/// Spokes per ring, spoke 0 at `theta_start`.
pub const SPOKE_COUNT: usize = 24;
/// Landmarks per grid (`RING_COUNT * SPOKE_COUNT`).
pub const LANDMARK_COUNT: usize = RING_COUNT * SPOKE_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

/// Axis-aligned box in continuous pixel coordinates, `min < max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("bounding box coordinates must be finite".into()));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::Degenerate(format!(
                "bounding box has non-positive extent: [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Half-open containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x_min && p.x < self.x_max && p.y >= self.y_min && p.y < self.y_max
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }

    /// Intersection-over-union; 0 for disjoint boxes, always within [0, 1].
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Grows width and height by `fraction` about the center, then clamps to
    /// the image extent. Clamping may cut the requested growth at the border.
    pub fn expand(&self, fraction: f64, image_w: f64, image_h: f64) -> Result<BoundingBox> {
        if !(fraction.is_finite() && fraction >= 0.0) {
            return Err(Error::Domain(format!("expand fraction must be >= 0, got {fraction}")));
        }
        let c = self.center();
        let hw = self.width() * (1.0 + fraction) / 2.0;
        let hh = self.height() * (1.0 + fraction) / 2.0;
        BoundingBox::new(
            (c.x - hw).max(0.0),
            (c.y - hh).max(0.0),
            (c.x + hw).min(image_w),
            (c.y + hh).min(image_h),
        )
    }
}

// Files carry boxes as [x_min, y_min, x_max, y_max].
impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(deserializer)?;
        BoundingBox::from_array(a).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Spoke winding direction in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Increasing angle (spoke index advances counter-clockwise in math axes).
    Ccw,
    Cw,
}

impl Orientation {
    pub fn sign(&self) -> f64 {
        match self {
            Orientation::Ccw => 1.0,
            Orientation::Cw => -1.0,
        }
    }
}

/// Annulus placement used to seed a landmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSpec {
    pub center: Point2,
    /// Endocardial (inner) radius, px.
    pub r_endo: f64,
    /// Epicardial (outer) radius, px.
    pub r_epi: f64,
    /// Angle of spoke 0, radians in [0, 2*pi).
    pub theta_start: f64,
    pub orientation: Orientation,
}

impl AnnulusSpec {
    pub fn new(
        center: Point2,
        r_endo: f64,
        r_epi: f64,
        theta_start: f64,
        orientation: Orientation,
    ) -> Result<Self> {
        let spec = AnnulusSpec { center, r_endo, r_epi, theta_start, orientation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.is_finite() || !self.r_endo.is_finite() || !self.r_epi.is_finite() {
            return Err(Error::Domain("annulus parameters must be finite".into()));
        }
        if !(0.0 < self.r_endo && self.r_endo < self.r_epi) {
            return Err(Error::Domain(format!(
                "annulus radii must satisfy 0 < r_endo < r_epi, got {} and {}",
                self.r_endo, self.r_epi
            )));
        }
        if !(0.0..std::f64::consts::TAU).contains(&self.theta_start) {
            return Err(Error::Domain(format!(
                "theta_start must lie in [0, 2*pi), got {}",
                self.theta_start
            )));
        }
        Ok(())
    }

    /// Radius of ring `ring`, spaced evenly from endo to epi.
    pub fn ring_radius(&self, ring: usize) -> f64 {
        self.r_endo + (self.r_epi - self.r_endo) * ring as f64 / (RING_COUNT - 1) as f64
    }

    /// Angle of spoke `spoke`.
    pub fn spoke_angle(&self, spoke: usize) -> f64 {
        self.theta_start
            + self.orientation.sign() * std::f64::consts::TAU * spoke as f64 / SPOKE_COUNT as f64
    }
}

/// One frame's 7x24 landmark grid, stored ring-major: index = ring * 24 + spoke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGrid {
    points: Vec<Point2>,
}

impl LandmarkGrid {
    pub fn from_points(points: Vec<Point2>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Shape(format!(
                "landmark grid needs {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("non-finite landmark ({}, {})", p.x, p.y)));
        }
        Ok(LandmarkGrid { points })
    }

    pub fn point(&self, ring: usize, spoke: usize) -> Point2 {
        debug_assert!(ring < RING_COUNT && spoke < SPOKE_COUNT);
        self.points[ring * SPOKE_COUNT + spoke]
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// True when every coordinate is exactly zero (an empty padded frame).
    pub fn is_all_zero(&self) -> bool {
        self.points.iter().all(|p| p.x == 0.0 && p.y == 0.0)
    }

    /// Tight axis-aligned box around the points. Errors when the points span
    /// zero area (the box invariant requires positive extent).
    pub fn bbox(&self) -> Result<BoundingBox> {
        let mut x_min = f64::INFINITY;
        let mut y_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for p in &self.points {
            x_min = x_min.min(p.x);
            y_min = y_min.min(p.y);
            x_max = x_max.max(p.x);
            y_max = y_max.max(p.y);
        }
        BoundingBox::new(x_min, y_min, x_max, y_max)
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Result<LandmarkGrid> {
        LandmarkGrid::from_points(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// Landmark grids for each frame of a cine, frame 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    frames: Vec<LandmarkGrid>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkGrid>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Shape(format!(
                "landmark sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        Ok(LandmarkSequence { frames })
    }

    pub fn frames(&self) -> &[LandmarkGrid] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &LandmarkGrid {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds the reference grid for an annulus: 7 evenly spaced rings from endo
/// to epi, 24 spokes from `theta_start` winding per `orientation`.
pub fn build_grid(spec: &AnnulusSpec) -> Result<LandmarkGrid> {
    spec.validate()?;
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for ring in 0..RING_COUNT {
        let r = spec.ring_radius(ring);
        for spoke in 0..SPOKE_COUNT {
            let th = spec.spoke_angle(spoke);
            points.push(Point2::new(spec.center.x + r * th.cos(), spec.center.y + r * th.sin()));
        }
    }
    LandmarkGrid::from_points(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDirection {
    /// Original image coordinates -> crop coordinates.
    Forward,
    /// Crop coordinates -> original image coordinates.
    Inverse,
}

/// Affine map between original coordinates inside `from_box` and a resampled
/// `to_w` x `to_h` crop. The box min corner maps to crop (0, 0); scale is
/// `crop_size / box_size` per axis. Forward then inverse is the identity.
pub fn map_coords(
    points: &[Point2],
    from_box: &BoundingBox,
    to_w: usize,
    to_h: usize,
    direction: MapDirection,
) -> Result<Vec<Point2>> {
    if to_w == 0 || to_h == 0 {
        return Err(Error::Domain("crop size must be positive".into()));
    }
    let sx = to_w as f64 / from_box.width();
    let sy = to_h as f64 / from_box.height();
    let mapped = points
        .iter()
        .map(|p| match direction {
            MapDirection::Forward => {
                Point2::new((p.x - from_box.x_min) * sx, (p.y - from_box.y_min) * sy)
            }
            MapDirection::Inverse => {
                Point2::new(from_box.x_min + p.x / sx, from_box.y_min + p.y / sy)
            }
        })
        .collect();
    Ok(mapped)
}

/// `map_coords` applied to a whole grid.
pub fn map_grid(
    grid: &LandmarkGrid,
    from_box: &BoundingBox,
    to_w: usize,
    to_h: usize,
    direction: MapDirection,
) -> Result<LandmarkGrid> {
    LandmarkGrid::from_points(map_coords(grid.points(), from_box, to_w, to_h, direction)?)
}
