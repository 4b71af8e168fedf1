//! Differentiable forward projection of the neural field.
//!
//! Each ray's stretch through `Ω_E` is split into at most three pieces
//! (outside, inside, outside `Ω`). Every piece is sampled at midpoint-rule
//! nodes with its zone's step; the last step of a piece is shortened so the
//! step weights add up to the piece length exactly. Inside samples use the
//! full encoder, outside samples the restricted one.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::{Field, FieldGrads};
use crate::geometry::{Domain, Point3, Ray, Zone};
use crate::network::MlpCache;
use crate::{Error, Real, Result};

/// Relative slack below which a trailing partial step is folded into the previous one.
const STEP_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    /// Step inside `Ω` in mm.
    pub step_inside: f64,
    /// Step in `Ω_E \ Ω` in mm.
    pub step_outside: f64,
    #[serde(default)]
    pub jitter: bool,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan { step_inside: 0.2, step_outside: 2.0, jitter: false }
    }
}

impl SamplingPlan {
    pub fn new(step_inside: f64, step_outside: f64) -> Result<Self> {
        let p = SamplingPlan { step_inside, step_outside, jitter: false };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        if self.step_inside > 0.0 && self.step_inside <= self.step_outside && self.step_outside.is_finite() {
            Vec::new()
        } else {
            vec![format!(
                "sampling: need 0 < step_inside <= step_outside, got {} and {}",
                self.step_inside, self.step_outside
            )]
        }
    }

    pub fn step(&self, zone: Zone) -> f64 {
        match zone {
            Zone::Inside => self.step_inside,
            _ => self.step_outside,
        }
    }
}

/// Which samples enter the predicted projection and how they are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Integrate over `Ω` only.
    Truncated,
    /// Integrate over `Ω_E`, restricted encoder outside `Ω`.
    Extended,
    /// Integrate over `Ω_E` with the full encoder everywhere (naive extension).
    Dense,
}

impl ProjectionMode {
    pub fn includes(self, zone: Zone) -> bool {
        match zone {
            Zone::Inside => true,
            Zone::Outside => self != ProjectionMode::Truncated,
            Zone::Exterior => false,
        }
    }

    pub fn restricted(self, zone: Zone) -> bool {
        self == ProjectionMode::Extended && zone == Zone::Outside
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    /// Ray parameter (mm from the source).
    pub t: f64,
    pub point: Point3,
    /// Quadrature weight in mm.
    pub weight: f64,
    pub zone: Zone,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySampleSet {
    pub samples: Vec<RaySample>,
}

impl RaySampleSet {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn count(&self, zone: Zone) -> usize {
        self.samples.iter().filter(|s| s.zone == zone).count()
    }

    /// Sum of step weights in one zone.
    pub fn length(&self, zone: Zone) -> f64 {
        self.samples.iter().filter(|s| s.zone == zone).map(|s| s.weight).sum()
    }

    /// Quadrature `Σ f(x_k)·Δ_k` over the samples `mode` includes.
    pub fn integrate(&self, mode: ProjectionMode, mut f: impl FnMut(&RaySample) -> f64) -> f64 {
        self.samples
            .iter()
            .filter(|s| mode.includes(s.zone))
            .map(|s| f(s) * s.weight)
            .sum()
    }
}

/// Midpoint nodes over `[a, b]` with step `step`; `offset` in `[0, step)`
/// shortens the first cell (jitter).
fn sample_interval(ray: &Ray, a: f64, b: f64, step: f64, offset: f64, zone: Zone, out: &mut Vec<RaySample>) {
    let len = b - a;
    if !(len > 0.0) {
        return;
    }
    let mut edges = Vec::new();
    edges.push(a);
    let mut start = a;
    if offset > 0.0 && offset < len {
        start = a + offset;
        edges.push(start);
    }
    let rest = b - start;
    let n = ((rest / step) - STEP_SLACK).ceil().max(1.0) as usize;
    for k in 1..n {
        edges.push(start + k as f64 * step);
    }
    edges.push(b);
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let t = 0.5 * (lo + hi);
        out.push(RaySample { t, point: ray.at(t), weight: hi - lo, zone });
    }
}

/// Splits the ray's `Ω_E` chord by `Ω` membership and samples each piece.
pub fn sample_ray(ray: &Ray, domain: &Domain, plan: &SamplingPlan) -> RaySampleSet {
    sample_ray_with(ray, domain, plan, None::<&mut rand::rngs::ThreadRng>)
}

/// [`sample_ray`] with optional per-ray jitter drawn from `rng`.
pub fn sample_ray_with<G: Rng>(ray: &Ray, domain: &Domain, plan: &SamplingPlan, rng: Option<&mut G>) -> RaySampleSet {
    let mut out = Vec::new();
    let Some((e0, e1)) = domain.extended.clip(ray) else {
        return RaySampleSet { samples: out };
    };
    let u = match (plan.jitter, rng) {
        (true, Some(r)) => r.random::<f64>(),
        _ => 0.0,
    };
    let mut pieces: Vec<(f64, f64, Zone)> = Vec::with_capacity(3);
    match domain.fov.clip(ray) {
        None => pieces.push((e0, e1, Zone::Outside)),
        Some((i0, i1)) => {
            let i0 = i0.clamp(e0, e1);
            let i1 = i1.clamp(i0, e1);
            pieces.push((e0, i0, Zone::Outside));
            pieces.push((i0, i1, Zone::Inside));
            pieces.push((i1, e1, Zone::Outside));
        }
    }
    for (a, b, zone) in pieces {
        let step = plan.step(zone);
        sample_interval(ray, a, b, step, u * step, zone, &mut out);
    }
    RaySampleSet { samples: out }
}

/// Flattened samples of a batch of rays, ready for the network.
#[derive(Clone, Debug, Default)]
pub struct SampleBatch {
    /// Normalized coordinates, `dim` per sample.
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
    pub restricted: Vec<bool>,
    /// Sample range of ray `r` is `offsets[r]..offsets[r + 1]`.
    pub offsets: Vec<usize>,
}

impl SampleBatch {
    pub fn from_rays(sets: &[RaySampleSet], domain: &Domain, mode: ProjectionMode, dim: usize) -> Self {
        let mut b = SampleBatch { offsets: vec![0], ..Default::default() };
        for set in sets {
            for s in set.samples.iter().filter(|s| mode.includes(s.zone)) {
                b.coords.extend_from_slice(&domain.normalize(&s.point)[..dim]);
                b.weights.push(s.weight);
                b.restricted.push(mode.restricted(s.zone));
            }
            b.offsets.push(b.weights.len());
        }
        b
    }

    pub fn n_rays(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_samples(&self) -> usize {
        self.weights.len()
    }
}

/// Everything the backward pass needs from a forward projection.
#[derive(Clone, Debug)]
pub struct ProjectionCache<R> {
    pub batch: SampleBatch,
    mlp: Option<MlpCache<R>>,
}

/// Predicted line integrals for a batch of rays.
pub fn forward_project<R: Real>(field: &Field<R>, batch: SampleBatch) -> Result<(Vec<f64>, ProjectionCache<R>)> {
    let n_rays = batch.n_rays();
    if batch.n_samples() == 0 {
        return Ok((vec![0.0; n_rays], ProjectionCache { batch, mlp: None }));
    }
    let enc = &field.encoding;
    let (full, restricted) = (enc.active_levels(false), enc.active_levels(true));
    let x = field.encode_batch(&batch.coords, |i| if batch.restricted[i] { restricted } else { full });
    let (mu, cache) = field.mlp.forward_batch(x)?;
    let mut pred = vec![0.0; n_rays];
    for (r, p) in pred.iter_mut().enumerate() {
        let range = batch.offsets[r]..batch.offsets[r + 1];
        *p = range.map(|k| mu[k].f64() * batch.weights[k]).sum();
    }
    Ok((pred, ProjectionCache { batch, mlp: Some(cache) }))
}

/// Single-ray convenience wrapper around [`forward_project`].
pub fn forward_project_ray<R: Real>(
    field: &Field<R>,
    domain: &Domain,
    samples: &RaySampleSet,
    mode: ProjectionMode,
) -> Result<(f64, ProjectionCache<R>)> {
    let batch = SampleBatch::from_rays(std::slice::from_ref(samples), domain, mode, field.dim());
    let (p, c) = forward_project(field, batch)?;
    Ok((p[0], c))
}

/// Backpropagates per-ray upstream gradients through the MLP.
///
/// Accumulates MLP gradients and returns the gradient w.r.t. each sample's
/// encoding (`n_samples × L·F`), or `None` for an empty batch.
pub fn backward_network<R: Real>(
    field: &Field<R>,
    cache: &ProjectionCache<R>,
    upstream: &[f64],
    grads: &mut crate::network::MlpGrads<R>,
) -> Result<Option<Array2<R>>> {
    let b = &cache.batch;
    if upstream.len() != b.n_rays() {
        return Err(Error::Shape(format!("{} upstream values for {} rays", upstream.len(), b.n_rays())));
    }
    let Some(mlp_cache) = &cache.mlp else {
        return Ok(None);
    };
    let mut per_sample = vec![R::zero(); b.n_samples()];
    for r in 0..b.n_rays() {
        let g = upstream[r];
        if g == 0.0 {
            continue;
        }
        for k in b.offsets[r]..b.offsets[r + 1] {
            per_sample[k] = R::of(g * b.weights[k]);
        }
    }
    Ok(Some(field.mlp.backward_batch(mlp_cache, &per_sample, grads)?))
}

/// Scatters encoding gradients onto hash-table rows, in sample order.
pub fn backward_encoder<R: Real>(
    field: &Field<R>,
    batch: &SampleBatch,
    d_encoding: &Array2<R>,
    buf: &mut crate::encoder::EncoderGradBuffer<R>,
) {
    let d = field.dim();
    let enc = &field.encoding;
    let (full, restricted) = (enc.active_levels(false), enc.active_levels(true));
    for (k, row) in d_encoding.outer_iter().enumerate() {
        let levels = if batch.restricted[k] { restricted } else { full };
        let g = row.as_slice().expect("row-major");
        enc.backward_into(&batch.coords[k * d..(k + 1) * d], g, levels, buf);
    }
}

pub fn backward_project<R: Real>(
    field: &Field<R>,
    cache: &ProjectionCache<R>,
    upstream: &[f64],
    grads: &mut FieldGrads<R>,
) -> Result<()> {
    if let Some(dx) = backward_network(field, cache, upstream, &mut grads.mlp)? {
        backward_encoder(field, &cache.batch, &dx, &mut grads.encoder);
    }
    Ok(())
}

/// Subgradient of `|P - pred|` w.r.t. `pred` (0 at a zero residual).
pub fn l1_upstream(measured: f64, predicted: f64) -> f64 {
    let r = measured - predicted;
    if r > 0.0 {
        -1.0
    } else if r < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// L1 loss `Σ |P - pred|` over the batch, backpropagated with an extra
/// factor `scale` (e.g. `1 / batch_len` for a mean loss).
pub fn residual_and_backward<R: Real>(
    measured: &[f64],
    predicted: &[f64],
    field: &Field<R>,
    cache: &ProjectionCache<R>,
    grads: &mut FieldGrads<R>,
    scale: f64,
) -> Result<f64> {
    if measured.len() != predicted.len() {
        return Err(Error::Shape(format!("{} measurements for {} predictions", measured.len(), predicted.len())));
    }
    let loss = measured.iter().zip(predicted).map(|(p, q)| (p - q).abs()).sum();
    let upstream: Vec<f64> = measured.iter().zip(predicted).map(|(&p, &q)| scale * l1_upstream(p, q)).collect();
    backward_project(field, cache, &upstream, grads)?;
    Ok(loss)
}
