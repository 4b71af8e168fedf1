//! Binary little-endian containers for sinograms, volumes and trained fields.
//!
//! Sinogram: `"SINO0001"`, `u32` views/rows/cols/mode (0 = fan2d,
//! 1 = cone3d), `f64` SDD, SID, column pitch, row pitch, start angle,
//! angular range, then `f32` values view-major.
//!
//! Volume: `"VOL00001"`, `u32` nx/ny/nz, `f64` pitch ×3, origin ×3, then
//! `f32` values with x fastest.
//!
//! Checkpoint: `"INRHASH1"`, `u32` dim, L, T, F, N_min, N_max, m, the `f32`
//! hash tables (level-major), then `"MLP1"`, `u32` input/hidden layers/
//! hidden width, `f64` mu_max, and per layer the row-major `f32` weights
//! (out × in) followed by the biases.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{EncoderConfig, HashEncoding};
use crate::field::Field;
use crate::geometry::{GeometryMode, ScanGeometry};
use crate::network::{MlpConfig, MlpParams};
use crate::volume::{GridSpec, Sinogram, VolumeGrid};
use crate::{Error, Real, Result};

pub const SINOGRAM_MAGIC: &[u8; 8] = b"SINO0001";
pub const VOLUME_MAGIC: &[u8; 8] = b"VOL00001";
pub const ENCODER_MAGIC: &[u8; 8] = b"INRHASH1";
pub const MLP_MAGIC: &[u8; 4] = b"MLP1";

struct Writer<W>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> Result<()> {
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn magic<const N: usize>(&mut self, want: &[u8; N]) -> Result<()> {
        let mut got = [0u8; N];
        self.0.read_exact(&mut got)?;
        if &got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }
    fn u32(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.0.read_exact(&mut raw)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
    fn end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.0.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<std::fs::File>>> {
    Ok(Writer(BufWriter::new(std::fs::File::create(path)?)))
}

fn open(path: &Path) -> Result<Reader<BufReader<std::fs::File>>> {
    Ok(Reader(BufReader::new(std::fs::File::open(path)?)))
}

pub fn write_sinogram_to(sino: &Sinogram, out: impl Write) -> Result<()> {
    let g = &sino.geometry;
    let mut w = Writer(out);
    w.bytes(SINOGRAM_MAGIC)?;
    w.u32(g.n_views)?;
    w.u32(g.detector_rows)?;
    w.u32(g.detector_cols)?;
    w.u32(match g.mode {
        GeometryMode::Fan2d => 0,
        GeometryMode::Cone3d => 1,
    })?;
    for v in [g.source_to_detector_mm, g.source_to_isocenter_mm, g.pixel_pitch_mm.0, g.pixel_pitch_mm.1, g.angle_start, g.angle_range] {
        w.f64(v)?;
    }
    w.f32s(sino.values.iter().map(|&v| v as f32))?;
    w.0.flush()?;
    Ok(())
}

pub fn read_sinogram_from(input: impl Read) -> Result<Sinogram> {
    let mut r = Reader(input);
    r.magic(SINOGRAM_MAGIC)?;
    let (views, rows, cols) = (r.u32()?, r.u32()?, r.u32()?);
    let mode = match r.u32()? {
        0 => GeometryMode::Fan2d,
        1 => GeometryMode::Cone3d,
        m => return Err(Error::Format(format!("unknown geometry mode {m}"))),
    };
    let geometry = ScanGeometry {
        source_to_detector_mm: r.f64()?,
        source_to_isocenter_mm: r.f64()?,
        detector_rows: rows,
        detector_cols: cols,
        pixel_pitch_mm: (r.f64()?, r.f64()?),
        n_views: views,
        angle_start: r.f64()?,
        angle_range: r.f64()?,
        mode,
    };
    geometry.validate()?;
    let values = r.f32s(geometry.n_rays())?.into_iter().map(f64::from).collect();
    r.end()?;
    Sinogram::from_values(geometry, values)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_sinogram_to(sino, create(path)?.0)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    read_sinogram_from(open(path)?.0)
}

pub fn write_volume(path: &Path, vol: &VolumeGrid) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(VOLUME_MAGIC)?;
    for d in vol.spec.dims {
        w.u32(d)?;
    }
    for v in vol.spec.pitch.iter().chain(&vol.spec.origin) {
        w.f64(*v)?;
    }
    w.f32s(vol.values.iter().map(|&v| v as f32))?;
    w.0.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let mut r = open(path)?;
    r.magic(VOLUME_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let pitch = [r.f64()?, r.f64()?, r.f64()?];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let spec = GridSpec::new(dims, pitch, origin)?;
    let values = r.f32s(spec.len())?.into_iter().map(f64::from).collect();
    r.end()?;
    VolumeGrid::from_values(spec, values)
}

pub fn write_checkpoint<R: Real>(path: &Path, field: &Field<R>) -> Result<()> {
    let mut w = create(path)?;
    let c = &field.encoding.config;
    w.bytes(ENCODER_MAGIC)?;
    for v in [field.dim(), c.n_levels, c.table_size, c.feature_dim, c.n_min, c.n_max, c.restricted_levels] {
        w.u32(v)?;
    }
    w.f32s(field.encoding.tables.iter().map(|v| v.f64() as f32))?;
    let m = &field.mlp.config;
    w.bytes(MLP_MAGIC)?;
    w.u32(m.input_dim)?;
    w.u32(m.hidden_layers)?;
    w.u32(m.hidden_width)?;
    w.f64(m.mu_max)?;
    for (wt, b) in field.mlp.weights.iter().zip(&field.mlp.biases) {
        w.f32s(wt.iter().map(|v| v.f64() as f32))?;
        w.f32s(b.iter().map(|v| v.f64() as f32))?;
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Real>(path: &Path) -> Result<Field<R>> {
    let mut r = open(path)?;
    r.magic(ENCODER_MAGIC)?;
    let dim = r.u32()?;
    let config = EncoderConfig {
        n_levels: r.u32()?,
        table_size: r.u32()?,
        feature_dim: r.u32()?,
        n_min: r.u32()?,
        n_max: r.u32()?,
        restricted_levels: r.u32()?,
    };
    let mut encoding = HashEncoding::<R>::zeros(config, dim)?;
    encoding.tables = r.f32s(config.n_params())?.into_iter().map(|v| R::of(v as f64)).collect();
    r.magic(MLP_MAGIC)?;
    let mcfg = MlpConfig::new(r.u32()?, r.u32()?, r.u32()?, r.f64()?);
    let mut mlp = MlpParams::<R>::zeros(mcfg)?;
    let dims = mcfg.layer_dims();
    for (l, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w: Vec<R> = r.f32s(fan_in * fan_out)?.into_iter().map(|v| R::of(v as f64)).collect();
        mlp.weights[l] = Array2::from_shape_vec((fan_out, fan_in), w).map_err(|e| Error::Format(e.to_string()))?;
        mlp.biases[l] = Array1::from_vec(r.f32s(fan_out)?.into_iter().map(|v| R::of(v as f64)).collect());
    }
    r.end()?;
    mlp.touch();
    Field::new(encoding, mlp)
}
