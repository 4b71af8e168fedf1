//! Field MLP: encoded coordinates to attenuation, with hand-written
//! backpropagation.
//!
//! Hidden layers use ReLU. The output is `mu_max · sigmoid(z)`, which keeps
//! every prediction strictly inside `(0, mu_max)`. All passes are batched: a
//! batch is an `n × input_dim` matrix and the heavy lifting is GEMM.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Output scale in 1/mm.
    pub mu_max: f64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_width: usize, mu_max: f64) -> Self {
        MlpConfig { input_dim, hidden_layers, hidden_width, mu_max }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input_dim == 0 {
            v.push("mlp: input_dim must be >= 1".into());
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            v.push("mlp: hidden_width must be >= 1".into());
        }
        if !(self.mu_max > 0.0 && self.mu_max.is_finite()) {
            v.push(format!("mlp: mu_max must be positive, got {}", self.mu_max));
        }
        v
    }

    /// `[input_dim, hidden..., 1]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        d.push(1);
        d
    }
}

#[derive(Clone, Debug)]
pub struct MlpParams<R> {
    pub config: MlpConfig,
    /// `weights[l]` is `out × in`.
    pub weights: Vec<Array2<R>>,
    pub biases: Vec<Array1<R>>,
    /// Bumped whenever parameters change; caches remember the version they saw.
    version: u64,
}

/// Parameter equality; the cache version is bookkeeping, not state.
impl<R: PartialEq> PartialEq for MlpParams<R> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights && self.biases == other.biases
    }
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<R> {
    pub weights: Vec<Array2<R>>,
    pub biases: Vec<Array1<R>>,
}

/// Activations saved by a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<R> {
    version: u64,
    /// `acts[0]` is the input batch, `acts[l]` the post-ReLU output of hidden layer `l`.
    acts: Vec<Array2<R>>,
    /// Derivative of the (clamped) output sigmoid, per sample.
    dsigmoid: Array1<R>,
}

impl<R: Real> MlpCache<R> {
    pub fn batch_len(&self) -> usize {
        self.dsigmoid.len()
    }
}

impl<R: Real> MlpParams<R> {
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let dims = config.layer_dims();
        let weights = dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(MlpParams { config, weights, biases, version: 0 })
    }

    /// He-uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| R::of(rng.random_range(-bound..bound)));
        }
        Ok(p)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Call after mutating weights or biases in place.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Parameter tensors as flat slices, weights then biases per layer.
    pub fn slices_mut(&mut self) -> Vec<&mut [R]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn slices(&self) -> Vec<&[R]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    /// Batched forward pass on an `n × input_dim` matrix.
    pub fn forward_batch(&self, inputs: Array2<R>) -> Result<(Array1<R>, MlpCache<R>)> {
        if inputs.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "mlp input has {} features, expected {}",
                inputs.ncols(),
                self.config.input_dim
            )));
        }
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(inputs);
        for l in 0..n_layers - 1 {
            let mut z = acts[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            z.mapv_inplace(|v| if v > R::zero() { v } else { R::zero() });
            acts.push(z);
        }
        let last = n_layers - 1;
        let z = acts[last].dot(&self.weights[last].t());
        let b = self.biases[last][0];
        let (lo, hi) = preactivation_bounds::<R>();
        let mu_max = R::of(self.config.mu_max);
        let n = z.nrows();
        let mut out = Array1::<R>::zeros(n);
        let mut dsigmoid = Array1::<R>::zeros(n);
        for i in 0..n {
            let v = z[(i, 0)] + b;
            let s = sigmoid(v.max(lo).min(hi));
            out[i] = mu_max * s;
            dsigmoid[i] = if v > lo && v < hi { s * (R::one() - s) } else { R::zero() };
        }
        Ok((out, MlpCache { version: self.version, acts, dsigmoid }))
    }

    /// Batched backward pass. Accumulates parameter gradients into `grads` and
    /// returns `∂L/∂inputs` for the batch.
    pub fn backward_batch(&self, cache: &MlpCache<R>, upstream: &[R], grads: &mut MlpGrads<R>) -> Result<Array2<R>> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, params: self.version });
        }
        let n = cache.batch_len();
        if upstream.len() != n {
            return Err(Error::Shape(format!("upstream has {} entries, batch has {n}", upstream.len())));
        }
        let mu_max = R::of(self.config.mu_max);
        let mut dz = Array2::<R>::zeros((n, 1));
        Zip::from(dz.column_mut(0))
            .and(upstream)
            .and(&cache.dsigmoid)
            .for_each(|d, &g, &ds| *d = g * mu_max * ds);

        for l in (0..self.weights.len()).rev() {
            let a_prev = &cache.acts[l];
            grads.weights[l] += &dz.t().dot(a_prev);
            grads.biases[l] += &dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.weights[l]);
            if l > 0 {
                Zip::from(&mut da).and(a_prev).for_each(|d, &a| {
                    if a <= R::zero() {
                        *d = R::zero();
                    }
                });
            }
            dz = da;
        }
        Ok(dz)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, features: &[R]) -> Result<(R, MlpCache<R>)> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let (out, cache) = self.forward_batch(x)?;
        Ok((out[0], cache))
    }

    /// Single-sample backward pass; returns the input-feature gradient.
    pub fn backward(&self, cache: &MlpCache<R>, upstream: R, grads: &mut MlpGrads<R>) -> Result<Vec<R>> {
        let dx = self.backward_batch(cache, &[upstream], grads)?;
        Ok(dx.row(0).to_vec())
    }

    /// Forward without keeping a cache, for evaluation.
    pub fn predict_batch(&self, inputs: Array2<R>) -> Result<Array1<R>> {
        Ok(self.forward_batch(inputs)?.0)
    }

    pub fn cast<S: Real>(&self) -> MlpParams<S> {
        MlpParams {
            config: self.config,
            weights: self.weights.iter().map(|w| w.mapv(|v| S::of(v.f64()))).collect(),
            biases: self.biases.iter().map(|b| b.mapv(|v| S::of(v.f64()))).collect(),
            version: 0,
        }
    }
}

impl<R: Real> MlpGrads<R> {
    pub fn zeros_like(params: &MlpParams<R>) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(R::zero()));
        self.biases.iter_mut().for_each(|b| b.fill(R::zero()));
    }

    pub fn add_assign(&mut self, other: &MlpGrads<R>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn slices(&self) -> Vec<&[R]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Output pre-activation clamp keeping `mu_max·σ(z)` strictly inside
/// `(0, mu_max)` at the working precision; the gradient is zero outside it.
fn preactivation_bounds<R: Real>() -> (R, R) {
    (R::of(-80.0), -R::epsilon().ln() - R::one())
}

#[inline]
fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}
