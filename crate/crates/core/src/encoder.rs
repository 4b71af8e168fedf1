//! Multi-resolution hash encoding and the restricted (coarse-levels-only)
//! encoder used outside the field of view.
//!
//! Level `ℓ` uses a grid of resolution `N_ℓ = ⌊N_min · b^ℓ⌋` over the unit
//! cube. The `2^d` vertices of the cell containing `x·N_ℓ` are hashed into a
//! table of `T` rows of `F` features each and blended with multilinear weights.
//! The restricted encoder keeps the first `m` level outputs and zeroes the rest,
//! so the network input width stays `L·F` everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Hash multipliers, one per spatial axis.
pub const HASH_PRIMES: [u64; 3] = [1, 19_349_663, 83_492_791];

/// Half-width of the uniform table initialisation interval.
pub const INIT_SCALE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_levels: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub table_size: usize,
    pub feature_dim: usize,
    /// Levels kept by the restricted encoder (`m`).
    pub restricted_levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_levels: 16,
            n_min: 16,
            n_max: 1400,
            table_size: 1 << 19,
            feature_dim: 2,
            restricted_levels: 4,
        }
    }
}

impl EncoderConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_levels < 2 {
            v.push(format!("encoder: n_levels must be >= 2, got {}", self.n_levels));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            v.push(format!("encoder: need 1 <= n_min <= n_max, got {} and {}", self.n_min, self.n_max));
        }
        if !self.table_size.is_power_of_two() {
            v.push(format!("encoder: table_size must be a power of two, got {}", self.table_size));
        }
        if self.table_size > u32::MAX as usize {
            v.push("encoder: table_size must fit in 32 bits".into());
        }
        if self.feature_dim == 0 {
            v.push("encoder: feature_dim must be >= 1".into());
        }
        if self.restricted_levels == 0 || self.restricted_levels > self.n_levels {
            v.push(format!(
                "encoder: restricted_levels must be in 1..={}, got {}",
                self.n_levels, self.restricted_levels
            ));
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

    /// Per-level growth factor `b`.
    pub fn growth_factor(&self) -> f64 {
        (((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.n_levels as f64 - 1.0)).exp()
    }

    pub fn level_resolution(&self, level: usize) -> Result<usize> {
        if level >= self.n_levels {
            return Err(Error::Bounds(format!("level {level} >= n_levels {}", self.n_levels)));
        }
        let r = self.n_min as f64 * self.growth_factor().powf(level as f64);
        Ok(r.floor() as usize)
    }

    pub fn output_dim(&self) -> usize {
        self.n_levels * self.feature_dim
    }

    /// Learnable scalars in all tables.
    pub fn n_params(&self) -> usize {
        self.n_levels * self.table_size * self.feature_dim
    }
}

/// `(⊕_i c_i·v_i) mod T` with wrapping 64-bit products; `T` must be a power of two.
#[inline]
pub fn spatial_hash(vertex: &[u64], table_size: usize) -> usize {
    let mut h = 0u64;
    for (v, c) in vertex.iter().zip(HASH_PRIMES) {
        h ^= v.wrapping_mul(c);
    }
    (h & (table_size as u64 - 1)) as usize
}

/// Hashed corners of one cell with their interpolation weights.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub rows: [usize; 8],
    pub weights: [f64; 8],
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding<R> {
    pub config: EncoderConfig,
    /// Spatial dimension (2 or 3).
    pub dim: usize,
    resolutions: Vec<usize>,
    /// Level-major, then row, then feature.
    pub tables: Vec<R>,
}

impl<R: Real> HashEncoding<R> {
    pub fn zeros(config: EncoderConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if !(dim == 2 || dim == 3) {
            return Err(Error::config(format!("encoder dimension must be 2 or 3, got {dim}")));
        }
        let resolutions = (0..config.n_levels)
            .map(|l| config.level_resolution(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(HashEncoding { config, dim, resolutions, tables: vec![R::zero(); config.n_params()] })
    }

    /// Tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn init(config: EncoderConfig, dim: usize, seed: u64) -> Result<Self> {
        let mut enc = Self::zeros(config, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut enc.tables {
            *v = R::of(rng.random_range(-INIT_SCALE..=INIT_SCALE));
        }
        Ok(enc)
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    #[inline]
    pub fn row_offset(&self, level: usize, row: usize) -> usize {
        (level * self.config.table_size + row) * self.config.feature_dim
    }

    pub fn row(&self, level: usize, row: usize) -> &[R] {
        let o = self.row_offset(level, row);
        &self.tables[o..o + self.config.feature_dim]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [R] {
        let o = self.row_offset(level, row);
        let f = self.config.feature_dim;
        &mut self.tables[o..o + f]
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("point has {} coordinates, encoder is {}D", x.len(), self.dim)));
        }
        if x.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain(format!("{x:?} is outside the unit cube")));
        }
        Ok(())
    }

    /// Cell corners of `x` at `level`; `x` must already be in the unit cube.
    #[inline]
    pub fn corners(&self, x: &[f64], level: usize) -> Corners {
        let n = self.resolutions[level];
        let mut cell = [0u64; 3];
        let mut frac = [0.0f64; 3];
        for i in 0..self.dim {
            let s = x[i] * n as f64;
            // x = 1 falls in the last cell rather than past the grid.
            let c = (s.floor() as usize).min(n - 1);
            cell[i] = c as u64;
            frac[i] = s - c as f64;
        }
        let len = 1usize << self.dim;
        let mut out = Corners { rows: [0; 8], weights: [0.0; 8], len };
        let mut vertex = [0u64; 3];
        for corner in 0..len {
            let mut w = 1.0;
            for i in 0..self.dim {
                let bit = (corner >> i) & 1;
                vertex[i] = cell[i] + bit as u64;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            out.rows[corner] = spatial_hash(&vertex[..self.dim], self.config.table_size);
            out.weights[corner] = w;
        }
        out
    }

    /// Writes the first `active_levels` level outputs into `out` (length `L·F`)
    /// and zeroes the rest. No domain check.
    #[inline]
    pub fn encode_into(&self, x: &[f64], active_levels: usize, out: &mut [R]) {
        let f = self.config.feature_dim;
        for v in out.iter_mut() {
            *v = R::zero();
        }
        for level in 0..active_levels {
            let c = self.corners(x, level);
            let y = &mut out[level * f..(level + 1) * f];
            for k in 0..c.len {
                let w = R::of(c.weights[k]);
                let q = self.row(level, c.rows[k]);
                for j in 0..f {
                    y[j] += w * q[j];
                }
            }
        }
    }

    /// Concatenation of all `L` interpolated level features.
    pub fn encode_full(&self, x: &[f64]) -> Result<Vec<R>> {
        self.check_point(x)?;
        let mut out = vec![R::zero(); self.output_dim()];
        self.encode_into(x, self.config.n_levels, &mut out);
        Ok(out)
    }

    /// First `m` level features followed by `L - m` zero vectors.
    pub fn encode_restricted(&self, x: &[f64]) -> Result<Vec<R>> {
        self.check_point(x)?;
        let mut out = vec![R::zero(); self.output_dim()];
        self.encode_into(x, self.config.restricted_levels, &mut out);
        Ok(out)
    }

    pub fn active_levels(&self, restricted: bool) -> usize {
        if restricted {
            self.config.restricted_levels
        } else {
            self.config.n_levels
        }
    }

    /// Scatters `upstream` (gradient w.r.t. the encoding) onto table rows.
    #[inline]
    pub fn backward_into(&self, x: &[f64], upstream: &[R], active_levels: usize, buf: &mut EncoderGradBuffer<R>) {
        let f = self.config.feature_dim;
        for level in 0..active_levels {
            let g = &upstream[level * f..(level + 1) * f];
            if g.iter().all(|v| *v == R::zero()) {
                continue;
            }
            let c = self.corners(x, level);
            for k in 0..c.len {
                buf.add(level, c.rows[k], R::of(c.weights[k]), g);
            }
        }
    }

    pub fn encode_backward(
        &self,
        x: &[f64],
        upstream: &[R],
        restricted: bool,
        buf: &mut EncoderGradBuffer<R>,
    ) -> Result<()> {
        self.check_point(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if buf.config != self.config {
            return Err(Error::Shape("gradient buffer built for a different encoder".into()));
        }
        self.backward_into(x, upstream, self.active_levels(restricted), buf);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.tables.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    /// Same tables converted to another precision.
    pub fn cast<S: Real>(&self) -> HashEncoding<S> {
        HashEncoding {
            config: self.config,
            dim: self.dim,
            resolutions: self.resolutions.clone(),
            tables: self.tables.iter().map(|v| S::of(v.f64())).collect(),
        }
    }
}

/// Sparse per-level gradient accumulator for the hash tables.
///
/// Storage is dense so accumulation is a plain add; the list of touched rows
/// lets the optimiser and `clear` visit only rows that received gradient.
#[derive(Clone, Debug)]
pub struct EncoderGradBuffer<R> {
    pub config: EncoderConfig,
    grads: Vec<R>,
    touched: Vec<Vec<u32>>,
    marked: Vec<bool>,
}

impl<R: Real> EncoderGradBuffer<R> {
    pub fn new(config: EncoderConfig) -> Self {
        EncoderGradBuffer {
            config,
            grads: vec![R::zero(); config.n_params()],
            touched: vec![Vec::new(); config.n_levels],
            marked: vec![false; config.n_levels * config.table_size],
        }
    }

    #[inline]
    pub fn add(&mut self, level: usize, row: usize, weight: R, grad: &[R]) {
        let slot = level * self.config.table_size + row;
        if !self.marked[slot] {
            self.marked[slot] = true;
            self.touched[level].push(row as u32);
        }
        let o = slot * self.config.feature_dim;
        for (dst, g) in self.grads[o..o + grad.len()].iter_mut().zip(grad) {
            *dst += weight * *g;
        }
    }

    /// Rows that received a contribution since the last `clear`, in first-touch order.
    pub fn touched(&self, level: usize) -> &[u32] {
        &self.touched[level]
    }

    pub fn n_touched(&self) -> usize {
        self.touched.iter().map(Vec::len).sum()
    }

    pub fn is_touched(&self, level: usize, row: usize) -> bool {
        self.marked[level * self.config.table_size + row]
    }

    pub fn row(&self, level: usize, row: usize) -> &[R] {
        let o = (level * self.config.table_size + row) * self.config.feature_dim;
        &self.grads[o..o + self.config.feature_dim]
    }

    /// Dense gradient with the same layout as [`HashEncoding::tables`].
    pub fn dense(&self) -> &[R] {
        &self.grads
    }

    /// Zeroes touched rows only.
    pub fn clear(&mut self) {
        let f = self.config.feature_dim;
        let t = self.config.table_size;
        for (level, rows) in self.touched.iter_mut().enumerate() {
            for &row in rows.iter() {
                let slot = level * t + row as usize;
                self.marked[slot] = false;
                for v in &mut self.grads[slot * f..(slot + 1) * f] {
                    *v = R::zero();
                }
            }
            rows.clear();
        }
    }

    pub fn has_non_finite(&self) -> bool {
        let f = self.config.feature_dim;
        let t = self.config.table_size;
        self.touched.iter().enumerate().any(|(level, rows)| {
            rows.iter().any(|&r| {
                let o = (level * t + r as usize) * f;
                self.grads[o..o + f].iter().any(|v| !v.is_finite())
            })
        })
    }
}
