//! Analytic reconstruction: fan-beam FBP / cone-beam FDK, sinogram
//! extrapolation for truncated rows, and a rim-artifact measure.
//!
//! Projections are rescaled to a virtual detector through the isocentre,
//! cosine pre-weighted, ramp filtered row by row in the frequency domain and
//! backprojected voxel by voxel with `SID² / U²` distance weighting.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryMode, ScanGeometry};
use crate::volume::{GridSpec, Sinogram, VolumeGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Apodization {
    None,
    /// `cos(π f)` with `f` in cycles per sample: 1 at DC, 0 at Nyquist.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub apodization: Apodization,
    /// Rows are zero-padded to the next power of two ≥ `padding · cols`.
    pub padding: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { apodization: Apodization::None, padding: 8 }
    }
}

impl FilterSpec {
    pub fn violations(&self) -> Vec<String> {
        if self.padding >= 2 {
            Vec::new()
        } else {
            vec![format!("fdk.padding must be >= 2, got {}", self.padding)]
        }
    }

    pub fn padded_len(&self, cols: usize) -> usize {
        (self.padding * cols).next_power_of_two()
    }

    /// Frequency response for rows of `cols` samples with spacing `ds`.
    ///
    /// Built from the band-limited spatial ramp kernel over the whole padded
    /// period, so it is real and even; the DC bin is forced to zero. The
    /// kernel's own DC is `O(1/n)`, so zeroing it biases the reconstruction
    /// by `O(1/n²)`: larger padding makes it negligible.
    pub fn response(&self, cols: usize, ds: f64) -> Vec<f64> {
        let n = self.padded_len(cols);
        let mut h = vec![Complex::new(0.0, 0.0); n];
        h[0].re = 1.0 / (4.0 * ds * ds);
        for k in (1..n / 2).step_by(2) {
            let v = -1.0 / (PI * PI * (k * k) as f64 * ds * ds);
            h[k].re = v;
            h[n - k].re = v;
        }
        FftPlanner::new().plan_fft_forward(n).process(&mut h);
        let mut out: Vec<f64> = h.iter().map(|c| c.re).collect();
        out[0] = 0.0;
        if self.apodization == Apodization::Cosine {
            for (k, v) in out.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 / n as f64;
                *v *= (PI * f).cos();
            }
        }
        out
    }
}

/// Geometry quantities on the virtual detector through the isocentre.
struct Virtual {
    sid: f64,
    ds: f64,
    dt: f64,
    cols: usize,
    rows: usize,
}

impl Virtual {
    fn new(g: &ScanGeometry) -> Self {
        let mag = g.source_to_detector_mm / g.source_to_isocenter_mm;
        Virtual {
            sid: g.source_to_isocenter_mm,
            ds: g.pixel_pitch_mm.0 / mag,
            dt: g.pixel_pitch_mm.1 / mag,
            cols: g.detector_cols,
            rows: g.detector_rows,
        }
    }

    fn s(&self, col: usize) -> f64 {
        (col as f64 + 0.5 - self.cols as f64 / 2.0) * self.ds
    }

    fn t(&self, row: usize, planar: bool) -> f64 {
        if planar {
            0.0
        } else {
            (row as f64 + 0.5 - self.rows as f64 / 2.0) * self.dt
        }
    }
}

/// Cosine-weighted, ramp-filtered projections (same layout as the sinogram).
pub fn filter_sinogram(sino: &Sinogram, filter: &FilterSpec) -> Result<Vec<f64>> {
    let g = &sino.geometry;
    let v = Virtual::new(g);
    let planar = g.mode == GeometryMode::Fan2d;
    let n = filter.padded_len(v.cols);
    let response = filter.response(v.cols, v.ds);
    let mut planner = FftPlanner::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(n);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(n);
    let mut out = vec![0.0; sino.values.len()];
    out.par_chunks_mut(v.cols).zip(sino.values.par_chunks(v.cols)).enumerate().for_each(|(r, (dst, src))| {
        let t = v.t(r % v.rows, planar);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (c, (b, p)) in buf.iter_mut().zip(src).enumerate() {
            let s = v.s(c);
            b.re = p * v.sid / (v.sid * v.sid + s * s + t * t).sqrt();
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&response) {
            *b *= *h;
        }
        inv.process(&mut buf);
        // Inverse FFT is unnormalised; `ds` is the convolution measure.
        let k = v.ds / n as f64;
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re * k;
        }
    });
    Ok(out)
}

/// FBP (fan2d) or FDK (cone3d) reconstruction on `grid`, optionally after
/// extrapolating truncated detector rows.
pub fn fdk_reconstruct(
    sino: &Sinogram,
    grid: &GridSpec,
    filter: &FilterSpec,
    extrapolation: Option<&Extrapolation>,
) -> Result<VolumeGrid> {
    let g = &sino.geometry;
    g.validate()?;
    grid.validate()?;
    let fv = filter.violations();
    if !fv.is_empty() {
        return Err(Error::Config(fv));
    }
    if !g.is_full_scan() {
        return Err(Error::Unsupported(format!(
            "angular range {:.4} rad: only full 2π scans are supported (no short-scan weighting)",
            g.angle_range
        )));
    }
    if let Some(e) = extrapolation {
        let ext = extrapolate_sinogram(sino, e)?;
        return fdk_reconstruct(&ext, grid, filter, None);
    }
    let filtered = filter_sinogram(sino, filter)?;
    let v = Virtual::new(g);
    let planar = g.mode == GeometryMode::Fan2d;
    let frames: Vec<_> = g.view_angles().into_iter().map(ScanGeometry::frame).collect();
    let scale = g.angular_step() / 2.0;
    let [nx, ny, _] = grid.dims;
    let mut values = vec![0.0; grid.len()];
    values.par_chunks_mut(nx).enumerate().for_each(|(line, out)| {
        let (j, k) = (line % ny, line / ny);
        for (i, dst) in out.iter_mut().enumerate() {
            let p = grid.voxel_center(i, j, k);
            let mut acc = 0.0;
            for (view, (e_s, e_u)) in frames.iter().enumerate() {
                let u = v.sid - p.dot(e_s);
                if u <= 0.0 {
                    continue;
                }
                let mag = v.sid / u;
                let fc = p.dot(e_u) * mag / v.ds + v.cols as f64 / 2.0 - 0.5;
                let sample = if planar {
                    interp_row(&filtered[view * v.cols..(view + 1) * v.cols], fc)
                } else {
                    let fr = p.z * mag / v.dt + v.rows as f64 / 2.0 - 0.5;
                    let base = view * v.rows * v.cols;
                    interp_2d(&filtered[base..base + v.rows * v.cols], v.cols, v.rows, fc, fr)
                };
                acc += mag * mag * sample;
            }
            *dst = acc * scale;
        }
    });
    VolumeGrid::from_values(*grid, values)
}

fn interp_row(row: &[f64], x: f64) -> f64 {
    let n = row.len();
    if !(x > -1.0 && x < n as f64) {
        return 0.0;
    }
    let i0 = x.floor();
    let w = x - i0;
    let i0 = i0 as isize;
    let at = |i: isize| if i >= 0 && (i as usize) < n { row[i as usize] } else { 0.0 };
    (1.0 - w) * at(i0) + w * at(i0 + 1)
}

fn interp_2d(img: &[f64], cols: usize, rows: usize, x: f64, y: f64) -> f64 {
    if !(y > -1.0 && y < rows as f64) {
        return 0.0;
    }
    let j0 = y.floor();
    let w = y - j0;
    let j0 = j0 as isize;
    let row = |j: isize| {
        if j >= 0 && (j as usize) < rows {
            interp_row(&img[j as usize * cols..(j as usize + 1) * cols], x)
        } else {
            0.0
        }
    };
    (1.0 - w) * row(j0) + w * row(j0 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Extrapolation {
    /// Added columns per side as a fraction of the detector width.
    pub margin_fraction: f64,
}

impl Default for Extrapolation {
    fn default() -> Self {
        Extrapolation { margin_fraction: 0.25 }
    }
}

/// Extends one row by `margin` samples on each side: point mirror about
/// the edge value with a raised-cosine roll-off to zero, clamped at zero.
pub fn extrapolate_row(row: &[f64], margin: usize) -> Vec<f64> {
    let n = row.len();
    let mut out = vec![0.0; n + 2 * margin];
    out[margin..margin + n].copy_from_slice(row);
    if n == 0 || margin == 0 {
        return out;
    }
    let taper = |k: usize| 0.5 * (1.0 + (PI * k as f64 / margin as f64).cos());
    let (left, right) = (row[0], row[n - 1]);
    for k in 1..=margin {
        let mirror = k.min(n - 1);
        out[margin - k] = taper(k) * (2.0 * left - row[mirror]).max(0.0);
        out[margin + n - 1 + k] = taper(k) * (2.0 * right - row[n - 1 - mirror]).max(0.0);
    }
    out
}

/// Sinogram on a detector widened by the extrapolation margin on both sides.
pub fn extrapolate_sinogram(sino: &Sinogram, cfg: &Extrapolation) -> Result<Sinogram> {
    let g = &sino.geometry;
    let margin = (cfg.margin_fraction * g.detector_cols as f64).round() as usize;
    let geometry = ScanGeometry { detector_cols: g.detector_cols + 2 * margin, ..g.clone() };
    let values: Vec<f64> = sino.values.chunks(g.detector_cols).flat_map(|r| extrapolate_row(r, margin)).collect();
    Sinogram::from_values(geometry, values)
}

/// Rim-artifact measure of a transaxial slice: relative excess of the mean
/// over the annulus `[0.85, 0.95]·R` above the mean over `r < 0.5·R`, with
/// `R` the field-of-view radius.
pub fn rim_artifact_metric(volume: &VolumeGrid, slice: usize, fov_radius: f64) -> Result<f64> {
    let [nx, ny, nz] = volume.spec.dims;
    if slice >= nz {
        return Err(Error::Bounds(format!("slice {slice} outside 0..{nz}")));
    }
    let (mut rim, mut n_rim, mut inner, mut n_inner) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..ny {
        for i in 0..nx {
            let c = volume.spec.voxel_center(i, j, slice);
            let r = c.x.hypot(c.y) / fov_radius;
            let v = volume.get(i, j, slice);
            if r < 0.5 {
                inner += v;
                n_inner += 1;
            } else if (0.85..=0.95).contains(&r) {
                rim += v;
                n_rim += 1;
            }
        }
    }
    if n_rim == 0 || n_inner == 0 {
        return Err(Error::Shape("grid does not cover the field-of-view rim".into()));
    }
    let inner = inner / n_inner as f64;
    Ok((rim / n_rim as f64 - inner) / inner.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_is_even_real_zero_dc() {
        let f = FilterSpec::default();
        let h = f.response(64, 0.5);
        let n = h.len();
        assert_eq!(n, 512);
        assert_eq!(h[0], 0.0);
        for k in 1..n / 2 {
            assert!((h[k] - h[n - k]).abs() < 1e-9 * h[n / 2].abs());
        }
        assert!(h[n / 2] > h[1]);
    }

    #[test]
    fn extrapolation_examples() {
        let zero_edge = extrapolate_row(&[0.0, 1.0, 2.0, 0.0], 3);
        assert_eq!(&zero_edge[..3], &[0.0; 3]);
        assert_eq!(&zero_edge[7..], &[0.0; 3]);
        let c = extrapolate_row(&[2.0; 8], 4);
        let right = &c[12..];
        assert!(right.windows(2).all(|w| w[1] <= w[0]));
        assert!(right[0] > 1.7 && right[0] <= 2.0);
        assert_eq!(right[3], 0.0);
    }

    #[test]
    fn short_scan_rejected() {
        let mut g = ScanGeometry::fan2d(600.0, 400.0, 16, 1.0, 10).unwrap();
        g.angle_range = PI;
        let sino = Sinogram::zeros(g);
        let grid = GridSpec::new([4, 4, 1], [1.0; 3], [-2.0, -2.0, -0.5]).unwrap();
        assert!(matches!(fdk_reconstruct(&sino, &grid, &FilterSpec::default(), None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_in_zero_out() {
        let g = ScanGeometry::fan2d(600.0, 400.0, 32, 1.0, 12).unwrap();
        let grid = GridSpec::new([8, 8, 1], [2.0; 3], [-8.0, -8.0, -1.0]).unwrap();
        let v = fdk_reconstruct(&Sinogram::zeros(g), &grid, &FilterSpec::default(), Some(&Extrapolation::default())).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }
}
