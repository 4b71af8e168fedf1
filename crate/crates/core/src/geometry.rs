//! Circular cone-beam / fan-beam acquisition geometry.
//!
//! Conventions: the source sits at `SID·(cos φ, sin φ, 0)`; the flat detector
//! is orthogonal to the source-isocenter line at distance `SDD` from the
//! source. Detector columns run along `(-sin φ, cos φ, 0)`, rows along `+z`,
//! and pixel centres sit at `(i + 0.5)·pitch` from the detector corner, so the
//! principal point is the detector centre.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    Cone3d,
    Fan2d,
}

impl GeometryMode {
    /// Spatial dimension of the reconstructed field.
    pub fn dim(self) -> usize {
        match self {
            GeometryMode::Cone3d => 3,
            GeometryMode::Fan2d => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// (column pitch, row pitch)
    pub pixel_pitch_mm: (f64, f64),
    pub n_views: usize,
    #[serde(default)]
    pub angle_start: f64,
    #[serde(default = "full_turn")]
    pub angle_range: f64,
    pub mode: GeometryMode,
}

fn full_turn() -> f64 {
    2.0 * PI
}

impl ScanGeometry {
    pub fn fan2d(sdd: f64, sid: f64, cols: usize, pitch: f64, n_views: usize) -> Result<Self> {
        let g = ScanGeometry {
            source_to_detector_mm: sdd,
            source_to_isocenter_mm: sid,
            detector_rows: 1,
            detector_cols: cols,
            pixel_pitch_mm: (pitch, pitch),
            n_views,
            angle_start: 0.0,
            angle_range: full_turn(),
            mode: GeometryMode::Fan2d,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn cone3d(
        sdd: f64,
        sid: f64,
        rows: usize,
        cols: usize,
        pitch: (f64, f64),
        n_views: usize,
    ) -> Result<Self> {
        let g = ScanGeometry {
            source_to_detector_mm: sdd,
            source_to_isocenter_mm: sid,
            detector_rows: rows,
            detector_cols: cols,
            pixel_pitch_mm: pitch,
            n_views,
            angle_start: 0.0,
            angle_range: full_turn(),
            mode: GeometryMode::Cone3d,
        };
        g.validate()?;
        Ok(g)
    }

    /// Collects every violated invariant instead of stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let (sid, sdd) = (self.source_to_isocenter_mm, self.source_to_detector_mm);
        if !(sid > 0.0 && sid < sdd) {
            v.push(format!("geometry: need 0 < SID < SDD, got SID={sid}, SDD={sdd}"));
        }
        if self.detector_rows == 0 || self.detector_cols == 0 {
            v.push("geometry: detector must have at least one row and column".into());
        }
        if !(self.pixel_pitch_mm.0 > 0.0 && self.pixel_pitch_mm.1 > 0.0) {
            v.push(format!("geometry: pixel pitch must be positive, got {:?}", self.pixel_pitch_mm));
        }
        if self.n_views == 0 {
            v.push("geometry: n_views must be >= 1".into());
        }
        if !(self.angle_range > 0.0) {
            v.push(format!("geometry: angle_range must be positive, got {}", self.angle_range));
        }
        if self.mode == GeometryMode::Fan2d && self.detector_rows != 1 {
            v.push(format!("geometry: fan2d requires detector_rows = 1, got {}", self.detector_rows));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn angular_step(&self) -> f64 {
        self.angle_range / self.n_views as f64
    }

    pub fn view_angle(&self, view: usize) -> f64 {
        self.angle_start + view as f64 * self.angular_step()
    }

    /// Uniformly spaced view angles over the half-open angular range.
    pub fn view_angles(&self) -> Vec<f64> {
        (0..self.n_views).map(|i| self.view_angle(i)).collect()
    }

    pub fn is_full_scan(&self) -> bool {
        (self.angle_range - 2.0 * PI).abs() < 1e-9
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.detector_rows * self.detector_cols
    }

    /// Flat index of a detector sample, view-major then row then column.
    pub fn ray_index(&self, view: usize, row: usize, col: usize) -> usize {
        (view * self.detector_rows + row) * self.detector_cols + col
    }

    pub fn unravel(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.detector_cols;
        let rest = index / self.detector_cols;
        (rest / self.detector_rows, rest % self.detector_rows, col)
    }

    pub fn source_position(&self, angle: f64) -> Point3 {
        let sid = self.source_to_isocenter_mm;
        Point3::new(sid * angle.cos(), sid * angle.sin(), 0.0)
    }

    /// Detector-plane offsets `(u, v)` of a pixel centre from the principal point.
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let (ps, pt) = self.pixel_pitch_mm;
        let u = (col as f64 + 0.5 - self.detector_cols as f64 / 2.0) * ps;
        let v = match self.mode {
            GeometryMode::Fan2d => 0.0,
            GeometryMode::Cone3d => (row as f64 + 0.5 - self.detector_rows as f64 / 2.0) * pt,
        };
        (u, v)
    }

    /// Unit vectors `(towards source, detector column axis)` at the given angle.
    pub fn frame(angle: f64) -> (Point3, Point3) {
        let (s, c) = angle.sin_cos();
        (Point3::new(c, s, 0.0), Point3::new(-s, c, 0.0))
    }

    pub fn pixel_center(&self, view: usize, row: usize, col: usize) -> Point3 {
        let angle = self.view_angle(view);
        let (e_s, e_u) = Self::frame(angle);
        let (u, v) = self.pixel_offset(row, col);
        self.source_position(angle) - e_s * self.source_to_detector_mm
            + e_u * u
            + Point3::new(0.0, 0.0, v)
    }

    pub fn make_ray(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if view >= self.n_views || row >= self.detector_rows || col >= self.detector_cols {
            return Err(Error::Bounds(format!(
                "detector index (view {view}, row {row}, col {col}) outside \
                 ({}, {}, {})",
                self.n_views, self.detector_rows, self.detector_cols
            )));
        }
        let origin = self.source_position(self.view_angle(view));
        let target = self.pixel_center(view, row, col);
        Ok(Ray {
            origin,
            direction: (target - origin).normalize(),
            index: (view, row, col),
        })
    }

    pub fn ray_at(&self, index: usize) -> Result<Ray> {
        let (v, r, c) = self.unravel(index);
        self.make_ray(v, r, c)
    }

    /// Radius of the cylinder around the rotation axis that every view covers.
    pub fn fov_radius(&self) -> f64 {
        let half = self.detector_cols as f64 * self.pixel_pitch_mm.0 / 2.0;
        self.source_to_isocenter_mm * (half / self.source_to_detector_mm).atan().sin()
    }

    /// Same geometry with the whole trajectory rotated by `delta` radians.
    pub fn rotated(&self, delta: f64) -> Self {
        ScanGeometry { angle_start: self.angle_start + delta, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Point3,
    /// (view, row, col)
    pub index: (usize, usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned box in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    /// Box of the given full extent centred at `center`.
    pub fn centered(center: [f64; 3], extent: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            min[i] = center[i] - extent[i] / 2.0;
            max[i] = center[i] + extent[i] / 2.0;
        }
        Aabb { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|i| !(self.max[i] > self.min[i]))
    }

    /// Closed-set membership.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        for i in 0..3 {
            out.min[i] = out.min[i].min(other.min[i]);
            out.max[i] = out.max[i].max(other.max[i]);
        }
        out
    }

    /// Slab-method intersection of the ray's forward half-line with the box.
    ///
    /// Returns `(t_near, t_far)` with `0 <= t_near < t_far`, or `None` when the
    /// forward part of the ray misses the box or only grazes it.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (self.min[i] - o) * inv;
            let mut tb = (self.max[i] - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Truncated field of view `Ω` nested inside the extended domain `Ω_E`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub fov: Aabb,
    pub extended: Aabb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Zone {
    /// Inside `Ω`.
    Inside,
    /// In `Ω_E \ Ω`.
    Outside,
    /// Not in `Ω_E` at all.
    Exterior,
}

impl Domain {
    pub fn new(fov: Aabb, extended: Aabb) -> Result<Self> {
        let d = Domain { fov, extended };
        let v = d.violations();
        if v.is_empty() {
            Ok(d)
        } else {
            Err(Error::Config(v))
        }
    }

    /// Both boxes centred on the rotation axis with the given full extents.
    pub fn centered(fov_extent: [f64; 3], extended_extent: [f64; 3]) -> Result<Self> {
        Domain::new(
            Aabb::centered([0.0; 3], fov_extent),
            Aabb::centered([0.0; 3], extended_extent),
        )
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.fov.is_degenerate() {
            v.push(format!("domain: FOV box is degenerate: {:?}", self.fov));
        }
        if self.extended.is_degenerate() {
            v.push(format!("domain: extended box is degenerate: {:?}", self.extended));
        }
        if !self.extended.contains_box(&self.fov) {
            v.push("domain: FOV must be contained in the extended FOV".into());
        }
        for (name, b) in [("FOV", &self.fov), ("extended FOV", &self.extended)] {
            let c = b.center();
            if c[0].abs() > 1e-9 || c[1].abs() > 1e-9 {
                v.push(format!("domain: {name} must be centred on the rotation axis, centre {c:?}"));
            }
        }
        v
    }

    pub fn zone(&self, p: &Point3) -> Zone {
        if self.fov.contains(p) {
            Zone::Inside
        } else if self.extended.contains(p) {
            Zone::Outside
        } else {
            Zone::Exterior
        }
    }

    /// Maps a point of `Ω_E` into the unit cube, clamping rounding spill.
    pub fn normalize(&self, p: &Point3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            let span = self.extended.max[i] - self.extended.min[i];
            out[i] = ((p[i] - self.extended.min[i]) / span).clamp(0.0, 1.0);
        }
        out
    }
}
