//! The neural attenuation field: hash encoding followed by the MLP.

use ndarray::Array2;

use crate::encoder::{EncoderConfig, EncoderGradBuffer, HashEncoding};
use crate::geometry::{Domain, Point3};
use crate::network::{MlpConfig, MlpGrads, MlpParams};
use crate::{Error, Real, Result};

/// Points evaluated per MLP call in [`Field::eval_points`].
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Field<R> {
    pub encoding: HashEncoding<R>,
    pub mlp: MlpParams<R>,
}

/// Gradient storage for every learnable parameter of a [`Field`].
#[derive(Clone, Debug)]
pub struct FieldGrads<R> {
    pub mlp: MlpGrads<R>,
    pub encoder: EncoderGradBuffer<R>,
}

impl<R: Real> FieldGrads<R> {
    pub fn new(field: &Field<R>) -> Self {
        FieldGrads { mlp: MlpGrads::zeros_like(&field.mlp), encoder: EncoderGradBuffer::new(field.encoding.config) }
    }

    pub fn clear(&mut self) {
        self.mlp.fill_zero();
        self.encoder.clear();
    }
}

impl<R: Real> Field<R> {
    pub fn new(encoding: HashEncoding<R>, mlp: MlpParams<R>) -> Result<Self> {
        if mlp.config.input_dim != encoding.output_dim() {
            return Err(Error::config(format!(
                "mlp input_dim {} does not match encoder output L*F = {}",
                mlp.config.input_dim,
                encoding.output_dim()
            )));
        }
        Ok(Field { encoding, mlp })
    }

    /// Fresh field: tables seeded with `seed`, MLP with `seed + 1`.
    pub fn init(enc: EncoderConfig, mlp: MlpConfig, dim: usize, seed: u64) -> Result<Self> {
        Field::new(
            HashEncoding::init(enc, dim, seed)?,
            MlpParams::init(mlp, seed.wrapping_add(1))?,
        )
    }

    pub fn dim(&self) -> usize {
        self.encoding.dim
    }

    pub fn n_params(&self) -> usize {
        self.encoding.tables.len() + self.mlp.n_params()
    }

    /// Encodes normalized points (`dim` coordinates each) into an MLP batch.
    pub fn encode_batch(&self, coords: &[f64], active_levels: impl Fn(usize) -> usize) -> Array2<R> {
        let d = self.dim();
        let n = coords.len() / d;
        let width = self.encoding.output_dim();
        let mut x = Array2::<R>::zeros((n, width));
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            let out = row.as_slice_mut().expect("row-major");
            self.encoding.encode_into(&coords[i * d..(i + 1) * d], active_levels(i), out);
        }
        x
    }

    /// Full-encoder attenuation at physical points of `Ω_E`.
    pub fn eval_points(&self, domain: &Domain, points: &[Point3]) -> Result<Vec<f64>> {
        let d = self.dim();
        let levels = self.encoding.config.n_levels;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut coords = Vec::with_capacity(chunk.len() * d);
            for p in chunk {
                if !domain.extended.contains(p) {
                    return Err(Error::Domain(format!("{p:?} is outside the extended FOV")));
                }
                coords.extend_from_slice(&domain.normalize(p)[..d]);
            }
            let x = self.encode_batch(&coords, |_| levels);
            out.extend(self.mlp.predict_batch(x)?.iter().map(|v| v.f64()));
        }
        Ok(out)
    }

    pub fn cast<S: Real>(&self) -> Field<S> {
        Field { encoding: self.encoding.cast(), mlp: self.mlp.cast() }
    }

    pub fn all_finite(&self) -> bool {
        self.mlp.all_finite() && self.encoding.tables.iter().all(|v| v.is_finite())
    }
}
