//! Analytic phantoms built from constant-attenuation ellipsoids.
//!
//! Attenuation is additive: `μ(x) = Σ δμ_e · 1[x ∈ e]` with closed
//! ellipsoids. Line integrals are exact chord sums. In planar mode every
//! ellipsoid is treated as an infinite elliptic cylinder along `z`, which is
//! how 2D ellipse phantoms are represented.

use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{Aabb, GeometryMode, Point3, Ray, ScanGeometry};
use crate::volume::{GridSpec, Sinogram, VolumeGrid};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3,
    pub semi_axes: Vector3<f64>,
    /// Local-to-world rotation.
    pub rotation: Matrix3<f64>,
    pub delta_mu: f64,
}

impl Ellipsoid {
    pub fn new(center: [f64; 3], semi_axes: [f64; 3], rotation: Matrix3<f64>, delta_mu: f64) -> Result<Self> {
        let e = Ellipsoid {
            center: Point3::from(center),
            semi_axes: Vector3::from(semi_axes),
            rotation,
            delta_mu,
        };
        if e.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config(format!("ellipsoid semi-axes must be positive, got {semi_axes:?}")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-10 {
            return Err(Error::config(format!("ellipsoid rotation is not orthonormal (error {ortho:e})")));
        }
        Ok(e)
    }

    /// Axis-aligned ellipsoid.
    pub fn aligned(center: [f64; 3], semi_axes: [f64; 3], delta_mu: f64) -> Result<Self> {
        Self::new(center, semi_axes, Matrix3::identity(), delta_mu)
    }

    /// Rotation given as Z-Y-X Euler angles in degrees: `R = Rz(α)·Ry(β)·Rx(γ)`.
    pub fn with_euler_deg(center: [f64; 3], semi_axes: [f64; 3], angles: [f64; 3], delta_mu: f64) -> Result<Self> {
        Self::new(center, semi_axes, euler_zyx_deg(angles), delta_mu)
    }

    /// Sphere/disk helper.
    pub fn ball(center: [f64; 3], radius: f64, delta_mu: f64) -> Result<Self> {
        Self::aligned(center, [radius; 3], delta_mu)
    }

    fn to_local(&self, p: &Point3) -> Vector3<f64> {
        (self.rotation.transpose() * (p - self.center)).component_div(&self.semi_axes)
    }

    pub fn contains(&self, p: &Point3, planar: bool) -> bool {
        let q = self.to_local(p);
        if planar {
            q.x * q.x + q.y * q.y <= 1.0
        } else {
            q.norm_squared() <= 1.0
        }
    }

    /// Length of the forward half-line inside the ellipsoid.
    pub fn chord(&self, ray: &Ray, planar: bool) -> f64 {
        let rt = self.rotation.transpose();
        let mut p = (rt * (ray.origin - self.center)).component_div(&self.semi_axes);
        let mut q = (rt * ray.direction).component_div(&self.semi_axes);
        if planar {
            p.z = 0.0;
            q.z = 0.0;
        }
        let a = q.norm_squared();
        if a == 0.0 {
            return 0.0;
        }
        // a - |p × q|² equals b² - a·c without the cancellation.
        let disc = a - p.cross(&q).norm_squared();
        if disc <= 0.0 {
            return 0.0;
        }
        let mid = -p.dot(&q) / a;
        let half = disc.sqrt() / a;
        if mid - half >= 0.0 {
            2.0 * half
        } else {
            (mid + half).max(0.0)
        }
    }

    /// Axis-aligned bounding box of the rotated ellipsoid.
    pub fn bounding_box(&self) -> Aabb {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            let h = (0..3)
                .map(|j| (self.rotation[(i, j)] * self.semi_axes[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            min[i] = self.center[i] - h;
            max[i] = self.center[i] + h;
        }
        Aabb::new(min, max)
    }

    fn is_z_rotation(&self) -> bool {
        let r = &self.rotation;
        r[(2, 2)] == 1.0 && r[(0, 2)] == 0.0 && r[(1, 2)] == 0.0 && r[(2, 0)] == 0.0 && r[(2, 1)] == 0.0
    }
}

pub fn euler_zyx_deg(angles: [f64; 3]) -> Matrix3<f64> {
    let [a, b, g] = angles.map(f64::to_radians);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), a);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), g);
    let mut m = (rz * ry * rx).into_inner();
    if b == 0.0 && g == 0.0 {
        // Keep pure z rotations exactly block-diagonal.
        m[(2, 2)] = 1.0;
        m[(0, 2)] = 0.0;
        m[(1, 2)] = 0.0;
        m[(2, 0)] = 0.0;
        m[(2, 1)] = 0.0;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub ellipsoids: Vec<Ellipsoid>,
    pub support_box: Aabb,
    /// Ellipsoids act as infinite cylinders along z (2D ellipse phantoms).
    pub planar: bool,
}

impl Phantom {
    pub fn new(ellipsoids: Vec<Ellipsoid>, planar: bool) -> Result<Self> {
        if planar {
            if let Some(i) = ellipsoids.iter().position(|e| !e.is_z_rotation()) {
                return Err(Error::config(format!(
                    "planar phantom: ellipse {i} must be rotated about z only"
                )));
            }
        }
        let support_box = ellipsoids
            .iter()
            .map(Ellipsoid::bounding_box)
            .reduce(|a, b| a.union(&b))
            .unwrap_or(Aabb::new([0.0; 3], [0.0; 3]));
        Ok(Phantom { ellipsoids, support_box, planar })
    }

    pub fn empty(planar: bool) -> Self {
        Phantom { ellipsoids: Vec::new(), support_box: Aabb::new([0.0; 3], [0.0; 3]), planar }
    }

    pub fn is_empty(&self) -> bool {
        self.ellipsoids.is_empty()
    }

    /// Attenuation at `x` in 1/mm (closed-set membership).
    pub fn mu_at(&self, x: &Point3) -> f64 {
        self.ellipsoids
            .iter()
            .filter(|e| e.contains(x, self.planar))
            .fold(0.0, |acc, e| acc + e.delta_mu)
    }

    /// Exact line integral of μ along the ray.
    pub fn analytic_projection(&self, ray: &Ray) -> f64 {
        self.ellipsoids
            .iter()
            .fold(0.0, |acc, e| acc + e.delta_mu * e.chord(ray, self.planar))
    }

    /// Line integral of μ restricted to the part of the ray inside `region`.
    pub fn projection_within(&self, ray: &Ray, region: &Aabb) -> f64 {
        let Some((t0, t1)) = region.clip(ray) else {
            return 0.0;
        };
        let shifted = Ray { origin: ray.at(t0), ..ray.clone() };
        let clipped = Ray { origin: ray.at(t1), ..ray.clone() };
        self.analytic_projection(&shifted) - self.analytic_projection(&clipped)
    }

    /// Noise-free projections of every detector pixel.
    pub fn simulate_sinogram(&self, geom: &ScanGeometry) -> Sinogram {
        let values = (0..geom.n_rays())
            .into_par_iter()
            .map(|i| {
                let ray = geom.ray_at(i).expect("index within geometry");
                self.analytic_projection(&ray)
            })
            .collect();
        Sinogram { geometry: geom.clone(), values }
    }

    /// Voxel values at centres, or the mean of `k^d` regular subsamples.
    pub fn rasterize(&self, grid: &GridSpec, supersample: usize) -> Result<VolumeGrid> {
        grid.validate()?;
        let k = supersample.max(1);
        let kz = if self.planar { 1 } else { k };
        let n_sub = (k * k * kz) as f64;
        let centers = grid.centers();
        let values = centers
            .par_iter()
            .map(|c| {
                if k == 1 {
                    return self.mu_at(c);
                }
                let mut acc = 0.0;
                for sz in 0..kz {
                    for sy in 0..k {
                        for sx in 0..k {
                            let off = |s: usize, n: usize, axis: usize| {
                                ((s as f64 + 0.5) / n as f64 - 0.5) * grid.pitch[axis]
                            };
                            let p = c + Vector3::new(off(sx, k, 0), off(sy, k, 1), off(sz, kz, 2));
                            acc += self.mu_at(&p);
                        }
                    }
                }
                acc / n_sub
            })
            .collect();
        VolumeGrid::from_values(*grid, values)
    }

    /// Checks `μ ≥ 0` at `samples` random points of the support box.
    pub fn check_nonnegative(&self, samples: usize, seed: u64) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &self.support_box;
        for _ in 0..samples {
            let p = Point3::new(
                rng.random_range(b.min[0]..=b.max[0]),
                rng.random_range(b.min[1]..=b.max[1]),
                if self.planar { 0.0 } else { rng.random_range(b.min[2]..=b.max[2]) },
            );
            let mu = self.mu_at(&p);
            if mu < -1e-12 {
                return Err(Error::config(format!("phantom has negative attenuation {mu} at {p:?}")));
            }
        }
        Ok(())
    }

    /// Every ellipsoid scaled about the origin by `s` (geometry only).
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let ellipsoids = self
            .ellipsoids
            .iter()
            .map(|e| Ellipsoid { center: e.center * s, semi_axes: e.semi_axes * s, ..e.clone() })
            .collect();
        Phantom::new(ellipsoids, self.planar)
    }

    /// Rigidly rotated about the z axis by `angle` radians.
    pub fn rotated_z(&self, angle: f64) -> Result<Self> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
        let ellipsoids = self
            .ellipsoids
            .iter()
            .map(|e| Ellipsoid { center: r * e.center, rotation: r * e.rotation, ..e.clone() })
            .collect();
        Phantom::new(ellipsoids, self.planar)
    }

    /// Attenuation multiplied by `lambda`.
    pub fn with_contrast(&self, lambda: f64) -> Self {
        let mut p = self.clone();
        for e in &mut p.ellipsoids {
            e.delta_mu *= lambda;
        }
        p
    }

    /// Concatenation of two ellipsoid lists.
    pub fn union(&self, other: &Phantom) -> Result<Self> {
        let mut ellipsoids = self.ellipsoids.clone();
        ellipsoids.extend(other.ellipsoids.iter().cloned());
        Phantom::new(ellipsoids, self.planar)
    }

    pub fn for_mode(mut self, mode: GeometryMode) -> Result<Self> {
        self.planar = mode == GeometryMode::Fan2d;
        Phantom::new(self.ellipsoids, self.planar)
    }

    /// Parses the text format: one ellipsoid per line,
    /// `cx cy cz  ax ay az  alpha beta gamma  delta_mu` (mm, degrees, 1/mm).
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, planar: bool) -> Result<Self> {
        let mut ellipsoids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(f64::from_str).collect();
            let nums = nums.map_err(|e| Error::Format(format!("phantom line {}: {e}", lineno + 1)))?;
            if nums.len() != 10 {
                return Err(Error::Format(format!(
                    "phantom line {}: expected 10 numbers, found {}",
                    lineno + 1,
                    nums.len()
                )));
            }
            ellipsoids.push(Ellipsoid::with_euler_deg(
                [nums[0], nums[1], nums[2]],
                [nums[3], nums[4], nums[5]],
                [nums[6], nums[7], nums[8]],
                nums[9],
            )?);
        }
        Phantom::new(ellipsoids, planar)
    }

    /// Named built-in phantom.
    pub fn builtin(name: &str, planar: bool) -> Result<Self> {
        match name {
            "empty" => Ok(Phantom::empty(planar)),
            "disk" => Phantom::new(vec![Ellipsoid::ball([0.0; 3], 60.0, 0.02)?], planar),
            "head" => head(planar),
            "shepp-logan" => shepp_logan(planar),
            other => Err(Error::config(format!(
                "unknown built-in phantom '{other}' (expected one of: empty, disk, head, shepp-logan)"
            ))),
        }
    }
}

/// Simplified FORBILD-like head sized to a 128 mm extended domain: bone shell,
/// brain, two ventricles, small bright inserts, sinus cavities and dense ear
/// inserts. The ears and most of the skull lie outside a central 64 mm FOV.
fn head(planar: bool) -> Result<Phantom> {
    let e = |c: [f64; 3], a: [f64; 3], ang: f64, d: f64| Ellipsoid::with_euler_deg(c, a, [ang, 0.0, 0.0], d);
    Phantom::new(
        vec![
            e([0.0, 0.0, 0.0], [58.0, 48.0, 50.0], 0.0, 0.045)?,
            e([0.0, 0.0, 0.0], [54.0, 44.0, 46.0], 0.0, -0.025)?,
            e([-8.0, 6.0, 0.0], [6.0, 10.0, 8.0], 20.0, -0.002)?,
            e([8.0, 6.0, 0.0], [6.0, 10.0, 8.0], -20.0, -0.002)?,
            e([0.0, -12.0, 0.0], [4.0, 4.0, 4.0], 0.0, 0.010)?,
            e([-15.0, -20.0, 0.0], [2.0, 2.0, 2.0], 0.0, 0.015)?,
            e([15.0, -20.0, 0.0], [2.5, 2.5, 2.5], 0.0, 0.012)?,
            e([0.0, 20.0, 0.0], [3.0, 3.0, 3.0], 0.0, 0.008)?,
            e([-14.0, 28.0, 0.0], [7.0, 5.0, 6.0], 0.0, -0.020)?,
            e([14.0, 28.0, 0.0], [7.0, 5.0, 6.0], 0.0, -0.020)?,
            e([-50.0, 0.0, 0.0], [3.0, 8.0, 6.0], 0.0, 0.040)?,
            e([50.0, 0.0, 0.0], [3.0, 8.0, 6.0], 0.0, 0.040)?,
        ],
        planar,
    )
}

/// Modified Shepp-Logan (Toft contrasts) with semi-axes in units of 60 mm and
/// unit intensity mapped to 0.02 /mm.
fn shepp_logan(planar: bool) -> Result<Phantom> {
    const TABLE: [[f64; 6]; 10] = [
        // a, b, x0, y0, phi (deg), intensity
        [0.69, 0.92, 0.0, 0.0, 0.0, 1.0],
        [0.6624, 0.874, 0.0, -0.0184, 0.0, -0.8],
        [0.11, 0.31, 0.22, 0.0, -18.0, -0.2],
        [0.16, 0.41, -0.22, 0.0, 18.0, -0.2],
        [0.21, 0.25, 0.0, 0.35, 0.0, 0.1],
        [0.046, 0.046, 0.0, 0.1, 0.0, 0.1],
        [0.046, 0.046, 0.0, -0.1, 0.0, 0.1],
        [0.046, 0.023, -0.08, -0.605, 0.0, 0.1],
        [0.023, 0.023, 0.0, -0.606, 0.0, 0.1],
        [0.023, 0.046, 0.06, -0.605, 0.0, 0.1],
    ];
    let s = 60.0;
    let ellipsoids = TABLE
        .iter()
        .map(|&[a, b, x0, y0, phi, v]| {
            let c = a.min(b);
            Ellipsoid::with_euler_deg([x0 * s, y0 * s, 0.0], [a * s, b * s, c * s], [phi, 0.0, 0.0], 0.02 * v)
        })
        .collect::<Result<Vec<_>>>()?;
    Phantom::new(ellipsoids, planar)
}
