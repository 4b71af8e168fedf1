//! Voxel volumes and projection stacks with physical metadata.

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Point3, ScanGeometry};
use crate::{Error, Result};

/// Voxel lattice: `dims` voxels of size `pitch`, `origin` is the min corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub pitch: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], pitch: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = GridSpec { dims, pitch, origin };
        g.validate()?;
        Ok(g)
    }

    /// Grid tiling `region` with (approximately) the requested pitch.
    ///
    /// In-plane dims are `round(extent / pitch)` and the pitch is then adjusted
    /// so the grid covers the region exactly. With `planar`, a single slice of
    /// thickness `pitch` is centred on `z = 0`.
    pub fn covering(region: &Aabb, pitch: f64, planar: bool) -> Result<Self> {
        let ext = region.extent();
        let mut dims = [1usize; 3];
        let mut p = [pitch; 3];
        let mut origin = region.min;
        let axes = if planar { 2 } else { 3 };
        for i in 0..axes {
            dims[i] = ((ext[i] / pitch).round() as usize).max(1);
            p[i] = ext[i] / dims[i] as f64;
        }
        if planar {
            origin[2] = -pitch / 2.0;
        }
        GridSpec::new(dims, p, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty grid {:?}", self.dims)));
        }
        if self.pitch.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Shape(format!("voxel pitch must be positive, got {:?}", self.pitch)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, x fastest and z slowest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(
            self.origin[0] + (i as f64 + 0.5) * self.pitch[0],
            self.origin[1] + (j as f64 + 0.5) * self.pitch[1],
            self.origin[2] + (k as f64 + 0.5) * self.pitch[2],
        )
    }

    /// Centres of all voxels in storage order.
    pub fn centers(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    out.push(self.voxel_center(i, j, k));
                }
            }
        }
        out
    }

    pub fn bounds(&self) -> Aabb {
        let mut max = [0.0; 3];
        for i in 0..3 {
            max[i] = self.origin[i] + self.dims[i] as f64 * self.pitch[i];
        }
        Aabb::new(self.origin, max)
    }

    /// Box spanned by voxel centres (what point evaluation actually touches).
    pub fn center_bounds(&self) -> Aabb {
        let lo = self.voxel_center(0, 0, 0);
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        Aabb::new([lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z])
    }

    pub fn same_lattice(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
            && (0..3).all(|i| {
                (self.pitch[i] - other.pitch[i]).abs() <= 1e-9 * self.pitch[i].abs()
                    && (self.origin[i] - other.origin[i]).abs() <= 1e-9 * (1.0 + self.origin[i].abs())
            })
    }
}

/// Attenuation volume in 1/mm.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl VolumeGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        VolumeGrid { values: vec![0.0; spec.len()], spec }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape(format!(
                "volume payload has {} values, grid {:?} needs {}",
                values.len(),
                spec.dims,
                spec.len()
            )));
        }
        Ok(VolumeGrid { spec, values })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }

    /// One z-slice as a row-major `ny × nx` block.
    pub fn slice_z(&self, k: usize) -> &[f64] {
        let n = self.spec.dims[0] * self.spec.dims[1];
        &self.values[k * n..(k + 1) * n]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Projection stack `P(view, row, col)`, view-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: ScanGeometry) -> Self {
        Sinogram { values: vec![0.0; geometry.n_rays()], geometry }
    }

    pub fn from_values(geometry: ScanGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.n_rays() {
            return Err(Error::Shape(format!(
                "sinogram has {} values, geometry needs {}",
                values.len(),
                geometry.n_rays()
            )));
        }
        Ok(Sinogram { geometry, values })
    }

    pub fn get(&self, view: usize, row: usize, col: usize) -> f64 {
        self.values[self.geometry.ray_index(view, row, col)]
    }

    pub fn row(&self, view: usize, row: usize) -> &[f64] {
        let start = self.geometry.ray_index(view, row, 0);
        &self.values[start..start + self.geometry.detector_cols]
    }

    pub fn row_mut(&mut self, view: usize, row: usize) -> &mut [f64] {
        let start = self.geometry.ray_index(view, row, 0);
        let n = self.geometry.detector_cols;
        &mut self.values[start..start + n]
    }
}
