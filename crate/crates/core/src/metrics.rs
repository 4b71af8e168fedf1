//! Image-quality metrics over the field of view: PSNR, slice-wise SSIM and
//! 8-bit difference images.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Aabb;
use crate::volume::{GridSpec, VolumeGrid};
use crate::{Error, Result};

fn check_pair(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if !a.spec.same_lattice(&b.spec) {
        return Err(Error::Shape(format!(
            "volumes differ: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
            a.spec.dims, a.spec.pitch, a.spec.origin, b.spec.dims, b.spec.pitch, b.spec.origin
        )));
    }
    Ok(())
}

fn resolve_range(gt: &VolumeGrid, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| {
        let (lo, hi) = gt.min_max();
        hi - lo
    });
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::Shape(format!("data range must be positive, got {r}")))
    }
}

/// Sub-volume of the voxels whose centres lie in `region`.
pub fn crop(volume: &VolumeGrid, region: &Aabb) -> Result<VolumeGrid> {
    let s = &volume.spec;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for axis in 0..3 {
        let inside: Vec<usize> = (0..s.dims[axis])
            .filter(|&i| {
                let c = s.origin[axis] + (i as f64 + 0.5) * s.pitch[axis];
                c >= region.min[axis] && c <= region.max[axis]
            })
            .collect();
        match (inside.first(), inside.last()) {
            (Some(&a), Some(&b)) => {
                lo[axis] = a;
                hi[axis] = b + 1;
            }
            _ => return Err(Error::Shape("crop region contains no voxel centres".into())),
        }
    }
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut origin = s.origin;
    for axis in 0..3 {
        origin[axis] += lo[axis] as f64 * s.pitch[axis];
    }
    let spec = GridSpec::new(dims, s.pitch, origin)?;
    let mut values = Vec::with_capacity(spec.len());
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            let start = s.index(lo[0], j, k);
            values.extend_from_slice(&volume.values[start..start + dims[0]]);
        }
    }
    VolumeGrid::from_values(spec, values)
}

/// `10·log10(range² / MSE)`; `+∞` when the volumes are identical.
///
/// `data_range` defaults to `max(gt) - min(gt)`.
pub fn psnr(recon: &VolumeGrid, gt: &VolumeGrid, data_range: Option<f64>) -> Result<f64> {
    check_pair(recon, gt)?;
    let range = resolve_range(gt, data_range)?;
    let mse = recon
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / gt.values.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub sigma: f64,
    /// Window half-width; the support is `2·radius + 1` samples.
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { sigma: 1.5, radius: 5, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    fn kernel(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Half-sample symmetric reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable filter with reflected borders on a row-major `ny × nx` image.
fn filter2d(img: &[f64], nx: usize, ny: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..ny {
        let row = &img[y * nx..(y + 1) * nx];
        for x in 0..nx {
            tmp[y * nx + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[reflect(x as isize + k as isize - r, nx)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..ny {
        for x in 0..nx {
            out[y * nx + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - r, ny) * nx + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of one 2D image pair (Gaussian-weighted, population
/// covariances), averaged over pixels at least `radius` from the border.
pub fn ssim_2d(a: &[f64], b: &[f64], nx: usize, ny: usize, params: &SsimParams, data_range: f64) -> Result<f64> {
    if a.len() != nx * ny || b.len() != nx * ny {
        return Err(Error::Shape(format!("images must have {} pixels", nx * ny)));
    }
    let pad = params.radius;
    if nx <= 2 * pad || ny <= 2 * pad {
        return Err(Error::Shape(format!("image {nx}×{ny} is smaller than the SSIM window")));
    }
    let kernel = params.kernel();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ux = filter2d(a, nx, ny, &kernel);
    let uy = filter2d(b, nx, ny, &kernel);
    let uxx = filter2d(&aa, nx, ny, &kernel);
    let uyy = filter2d(&bb, nx, ny, &kernel);
    let uxy = filter2d(&ab, nx, ny, &kernel);
    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in pad..ny - pad {
        for x in pad..nx - pad {
            let i = y * nx + x;
            let (mx, my) = (ux[i], uy[i]);
            let vx = uxx[i] - mx * mx;
            let vy = uyy[i] - my * my;
            let vxy = uxy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            sum += num / den;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Slice-wise (constant z) SSIM averaged over slices.
pub fn ssim(recon: &VolumeGrid, gt: &VolumeGrid, params: &SsimParams, data_range: Option<f64>) -> Result<f64> {
    check_pair(recon, gt)?;
    let range = resolve_range(gt, data_range)?;
    let [nx, ny, nz] = gt.spec.dims;
    let per_slice = (0..nz)
        .into_par_iter()
        .map(|k| ssim_2d(recon.slice_z(k), gt.slice_z(k), nx, ny, params, range))
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_slice.iter().sum::<f64>() / nz as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

/// Signed difference mapped to 8 bits: `0 ↦ 127.5`, `±window ↦ 255 / 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub window: f64,
}

impl DiffImage {
    pub fn quantize(d: f64, window: f64) -> u8 {
        let v = 127.5 + 127.5 * (d / window).clamp(-1.0, 1.0);
        v.round().clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(p: u8, window: f64) -> f64 {
        (p as f64 - 127.5) / 127.5 * window
    }

    /// One quantization step in attenuation units.
    pub fn step(&self) -> f64 {
        2.0 * self.window / 255.0
    }

    pub fn decode(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| Self::dequantize(p, self.window)).collect()
    }

    /// 8-bit grayscale PNG with the window stored as a `tEXt` chunk.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width, self.height, &self.pixels, &[("window", format!("{:e}", self.window))])
    }
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8], text: &[(&str, String)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.clone()).map_err(|e| Error::Format(e.to_string()))?;
    }
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(pixels).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Extracts one slice as `(width, height, values)`, rows along the second in-plane axis.
pub fn slice(volume: &VolumeGrid, axis: SliceAxis, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    let [nx, ny, nz] = volume.spec.dims;
    let (limit, w, h) = match axis {
        SliceAxis::X => (nx, ny, nz),
        SliceAxis::Y => (ny, nx, nz),
        SliceAxis::Z => (nz, nx, ny),
    };
    if index >= limit {
        return Err(Error::Bounds(format!("slice {index} along {axis:?} outside 0..{limit}")));
    }
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push(match axis {
                SliceAxis::X => volume.get(index, c, r),
                SliceAxis::Y => volume.get(c, index, r),
                SliceAxis::Z => volume.get(c, r, index),
            });
        }
    }
    Ok((w, h, out))
}

pub fn diff_image(recon: &VolumeGrid, gt: &VolumeGrid, axis: SliceAxis, index: usize, window: f64) -> Result<DiffImage> {
    check_pair(recon, gt)?;
    if !(window > 0.0) {
        return Err(Error::config(format!("difference window must be positive, got {window}")));
    }
    let (w, h, a) = slice(recon, axis, index)?;
    let (_, _, b) = slice(gt, axis, index)?;
    let pixels = a.iter().zip(&b).map(|(x, y)| DiffImage::quantize(x - y, window)).collect();
    Ok(DiffImage { width: w, height: h, pixels, window })
}

/// Windowed grayscale PNG of one slice (`lo ↦ 0`, `hi ↦ 255`).
pub fn write_slice_png(volume: &VolumeGrid, axis: SliceAxis, index: usize, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let (w, h, v) = slice(volume, axis, index)?;
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let px: Vec<u8> = v.iter().map(|x| (255.0 * ((x - lo) / span).clamp(0.0, 1.0)).round() as u8).collect();
    write_gray_png(path, w, h, &px, &[("window", format!("{lo:e} {hi:e}"))])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub data_range: f64,
}

impl MetricsReport {
    pub fn evaluate(label: &str, recon: &VolumeGrid, gt: &VolumeGrid, data_range: Option<f64>) -> Result<Self> {
        let range = resolve_range(gt, data_range)?;
        Ok(MetricsReport {
            label: label.to_string(),
            psnr_db: psnr(recon, gt, Some(range))?,
            ssim: ssim(recon, gt, &SsimParams::default(), Some(range))?,
            data_range: range,
        })
    }

    pub fn write_csv(reports: &[MetricsReport], mut out: impl Write) -> Result<()> {
        writeln!(out, "label,psnr_db,ssim,data_range")?;
        for r in reports {
            writeln!(out, "{},{},{},{}", r.label, fmt_psnr(r.psnr_db), r.ssim, r.data_range)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!("{}: PSNR {} dB, SSIM {:.4} (range {:.4e})", self.label, fmt_psnr(self.psnr_db), self.ssim, self.data_range)
    }
}

/// PSNR formatted with `inf` for identical inputs.
pub fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}
