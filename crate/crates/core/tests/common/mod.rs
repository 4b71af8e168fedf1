//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use inrct::encoder::EncoderConfig;
use inrct::network::MlpConfig;
use inrct::phantom::Phantom;
use inrct::projector::{backward_project, forward_project, sample_ray, ProjectionMode, SampleBatch, SamplingPlan};
use inrct::trainer::Reference;
use inrct::{Domain, Field, GridSpec, Ray, ScanGeometry, Sinogram};
use inrct::field::FieldGrads;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spatial hash evaluated with 128-bit products truncated by hand.
pub fn hash_oracle(v: &[u64], table_size: u64) -> u64 {
    const P: [u128; 3] = [1, 19_349_663, 83_492_791];
    let mut h: u128 = 0;
    for (x, p) in v.iter().zip(P) {
        h ^= (*x as u128 * p) % (1u128 << 64);
    }
    (h % table_size as u128) as u64
}

/// Relative error with an absolute floor for gradients that are ~0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Small random problem: a field, a domain and a few rays crossing both zones.
pub struct GradProblem {
    pub field: Field<f64>,
    pub domain: Domain,
    pub batch: SampleBatch,
    pub coeffs: Vec<f64>,
}

pub fn grad_problem(seed: u64) -> GradProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = if rng.random_bool(0.5) { 2 } else { 3 };
    let n_levels = rng.random_range(2..=5);
    let enc = EncoderConfig {
        n_levels,
        n_min: rng.random_range(2..=4),
        n_max: rng.random_range(8..=24),
        table_size: 1 << rng.random_range(6..=10),
        feature_dim: [1, 2, 4][rng.random_range(0..3)],
        restricted_levels: rng.random_range(1..=n_levels),
    };
    let mlp = MlpConfig::new(enc.output_dim(), rng.random_range(1..=2), rng.random_range(4..=12), 0.1);
    let mut field = Field::<f64>::init(enc, mlp, dim, seed).unwrap();
    // Spread the tables so the MLP sees non-trivial features.
    for v in &mut field.encoding.tables {
        *v *= 3000.0;
    }
    // Zero initial biases put dead-layer samples exactly on a ReLU kink,
    // where central differences average the two one-sided slopes.
    for b in &mut field.mlp.biases {
        b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    field.mlp.touch();
    let (geom, domain) = if dim == 2 {
        (
            ScanGeometry::fan2d(600.0, 400.0, 16, 4.0, 7).unwrap(),
            Domain::centered([40.0, 40.0, 4.0], [80.0, 80.0, 4.0]).unwrap(),
        )
    } else {
        (
            ScanGeometry::cone3d(600.0, 400.0, 4, 16, (4.0, 4.0), 7).unwrap(),
            Domain::centered([40.0, 40.0, 20.0], [80.0, 80.0, 40.0]).unwrap(),
        )
    };
    let plan = SamplingPlan::new(4.0, 9.0).unwrap();
    let mode = [ProjectionMode::Extended, ProjectionMode::Dense, ProjectionMode::Truncated][rng.random_range(0..3)];
    let rays: Vec<Ray> = (0..6).map(|_| geom.ray_at(rng.random_range(0..geom.n_rays())).unwrap()).collect();
    let sets: Vec<_> = rays.iter().map(|r| sample_ray(r, &domain, &plan)).collect();
    let batch = SampleBatch::from_rays(&sets, &domain, mode, dim);
    let coeffs = (0..rays.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    GradProblem { field, domain, batch, coeffs }
}

impl GradProblem {
    pub fn loss(&self, field: &Field<f64>) -> f64 {
        let (pred, _) = forward_project(field, self.batch.clone()).unwrap();
        pred.iter().zip(&self.coeffs).map(|(p, c)| p * c).sum()
    }

    pub fn grads(&self) -> FieldGrads<f64> {
        let (_, cache) = forward_project(&self.field, self.batch.clone()).unwrap();
        let mut g = FieldGrads::new(&self.field);
        backward_project(&self.field, &cache, &self.coeffs, &mut g).unwrap();
        g
    }

    /// Central difference of the loss along one parameter, with the step
    /// chosen from the differences themselves: for each candidate step the
    /// error estimate is the disagreement of the two one-sided differences
    /// (curvature, or a ReLU kink inside the stencil) plus the rounding
    /// error of the loss divided by the step.
    fn central_difference(&self, l0: f64, perturb: impl Fn(&mut Field<f64>, f64)) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for h in [1e-4, 1e-5, 1e-6] {
            let mut plus = self.field.clone();
            perturb(&mut plus, h);
            let mut minus = self.field.clone();
            perturb(&mut minus, -h);
            let (lp, lm) = (self.loss(&plus), self.loss(&minus));
            let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
            let estimate = (fwd - bwd).abs() + 4.0 * f64::EPSILON * l0.abs().max(1e-300) / h;
            if estimate < best.0 {
                best = (estimate, 0.5 * (fwd + bwd));
            }
        }
        best.1
    }

    /// Relative errors of analytic vs central-difference gradients for
    /// `n` random touched table entries and `n` random MLP parameters.
    pub fn check(&self, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let g = self.grads();
        let l0 = self.loss(&self.field);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.field.encoding.config.feature_dim;
        let mut touched = Vec::new();
        for level in 0..self.field.encoding.config.n_levels {
            for &row in g.encoder.touched(level) {
                let o = self.field.encoding.row_offset(level, row as usize);
                touched.extend(o..o + f);
            }
        }
        let mut enc_errs = Vec::new();
        for _ in 0..n.min(touched.len()) {
            let i = touched[rng.random_range(0..touched.len())];
            let fd = self.central_difference(l0, |fld, h| fld.encoding.tables[i] += h);
            enc_errs.push(rel_err(g.encoder.dense()[i], fd));
        }
        let analytic: Vec<Vec<f64>> = g.mlp.slices().iter().map(|s| s.to_vec()).collect();
        let mut mlp_errs = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(0..analytic.len());
            let i = rng.random_range(0..analytic[t].len());
            let fd = self.central_difference(l0, |fld, h| {
                fld.mlp.slices_mut()[t][i] += h;
                fld.mlp.touch();
            });
            mlp_errs.push(rel_err(analytic[t][i], fd));
        }
        (enc_errs, mlp_errs)
    }
}

/// Smooth test field `0.5 + cos(x/a)·cos(y/b)` with closed-form line integrals.
pub struct CosineField {
    pub a: f64,
    pub b: f64,
}

impl CosineField {
    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        0.5 + (p.x / self.a).cos() * (p.y / self.b).cos()
    }

    /// Exact integral along `ray` for `t ∈ [t0, t1]` (unit direction).
    pub fn integral(&self, ray: &Ray, t0: f64, t1: f64) -> f64 {
        let (o, d) = (ray.origin, ray.direction);
        // cos(u)cos(v) = (cos(u+v) + cos(u-v)) / 2 with u, v linear in t.
        let lin = |c0: f64, c1: f64| {
            if c1.abs() < 1e-14 {
                c0.cos() * (t1 - t0)
            } else {
                ((c0 + c1 * t1).sin() - (c0 + c1 * t0).sin()) / c1
            }
        };
        let (u0, u1) = (o.x / self.a, d.x / self.a);
        let (v0, v1) = (o.y / self.b, d.y / self.b);
        0.5 * (t1 - t0) + 0.5 * (lin(u0 + v0, u1 + v1) + lin(u0 - v0, u1 - v1))
    }
}

/// RMS quadrature error over a fixed ray set for each inside step
/// (outside step = 2 × inside), integrating over the whole extended box.
pub fn quadrature_errors(steps: &[f64]) -> Vec<f64> {
    let geom = ScanGeometry::fan2d(600.0, 400.0, 64, 3.0, 9).unwrap();
    let domain = Domain::centered([64.0, 64.0, 4.0], [128.0, 128.0, 4.0]).unwrap();
    let f = CosineField { a: 9.0, b: 13.0 };
    let rays: Vec<Ray> = (0..geom.n_rays()).step_by(5).map(|i| geom.ray_at(i).unwrap()).collect();
    steps
        .iter()
        .map(|&s| {
            let plan = SamplingPlan::new(s, 2.0 * s).unwrap();
            let mut sq = 0.0;
            let mut n = 0;
            for ray in &rays {
                let Some((t0, t1)) = domain.extended.clip(ray) else { continue };
                let set = sample_ray(ray, &domain, &plan);
                let q = set.integrate(ProjectionMode::Dense, |x| f.value(&x.point));
                sq += (q - f.integral(ray, t0, t1)).powi(2);
                n += 1;
            }
            (sq / n as f64).sqrt()
        })
        .collect()
}

/// The desk-scale truncated fan-beam scenario.
pub struct Desk {
    pub phantom: Phantom,
    pub sinogram: Sinogram,
    pub domain: Domain,
    pub plan: SamplingPlan,
    pub reference: Reference,
    pub encoder: EncoderConfig,
    pub mlp: MlpConfig,
}

pub const DESK_STEP: f64 = 0.5;
pub const DESK_LR: f64 = 1e-3;

pub fn desk_geometry() -> ScanGeometry {
    ScanGeometry::fan2d(600.0, 400.0, 256, 0.55, 120).unwrap()
}

pub fn desk() -> Desk {
    let geometry = desk_geometry();
    let phantom = Phantom::builtin("head", true).unwrap();
    let sinogram = phantom.simulate_sinogram(&geometry);
    let domain = Domain::centered([64.0, 64.0, 4.0], [128.0, 128.0, 4.0]).unwrap();
    let grid = GridSpec::covering(&domain.fov, 0.5, true).unwrap();
    let reference = Reference { volume: phantom.rasterize(&grid, 4).unwrap(), data_range: None };
    let encoder = EncoderConfig { n_levels: 8, n_min: 16, n_max: 256, table_size: 1 << 14, feature_dim: 2, restricted_levels: 2 };
    Desk {
        phantom,
        sinogram,
        domain,
        plan: SamplingPlan::new(DESK_STEP, 10.0 * DESK_STEP).unwrap(),
        reference,
        encoder,
        mlp: MlpConfig::new(16, 2, 64, 0.1),
    }
}

/// Deterministic 64×64 pairs; reference values computed once with
/// scikit-image 0.x `structural_similarity(gaussian_weights=True, sigma=1.5,
/// use_sample_covariance=False)` and `peak_signal_noise_ratio`.
pub fn ssim_patterns() -> [(Vec<f64>, Vec<f64>); 2] {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut d = Vec::new();
    for y in 0..64 {
        for x in 0..64 {
            let (x, y) = (x as f64, y as f64);
            let av = (0.3 * x).sin() * (0.2 * y).cos() + 0.05 * x / 64.0;
            a.push(av);
            b.push(av + 0.1 * (0.7 * x + 0.4 * y).sin() + 0.02 * (1.3 * y).cos());
            let r2 = |cx: f64, cy: f64| (x - cx).powi(2) + (y - cy).powi(2);
            c.push(if r2(30.0, 34.0) < 225.0 { 0.02 } else { 0.0 } + 0.001 * x / 64.0);
            d.push(if r2(32.0, 32.0) < 196.0 { 0.021 } else { 0.002 });
        }
    }
    [(a, b), (c, d)]
}

/// Small fan-beam training problem with a synthetic sinogram.
pub struct Small {
    pub sino: Sinogram,
    pub domain: Domain,
    pub plan: SamplingPlan,
}

pub fn small_problem(values: impl Fn(usize) -> f64) -> Small {
    let g = ScanGeometry::fan2d(600.0, 400.0, 24, 2.0, 12).unwrap();
    let sino = Sinogram::from_values(g.clone(), (0..g.n_rays()).map(values).collect()).unwrap();
    Small { sino, domain: Domain::centered([24.0, 24.0, 2.0], [60.0, 60.0, 2.0]).unwrap(), plan: SamplingPlan::new(1.0, 3.0).unwrap() }
}

pub fn f32_field(seed: u64, m: usize) -> Field<f32> {
    let enc = EncoderConfig { n_levels: 4, n_min: 4, n_max: 32, table_size: 1 << 10, feature_dim: 2, restricted_levels: m };
    Field::init(enc, MlpConfig::new(8, 2, 16, 0.1), 2, seed).unwrap()
}

pub fn sine_sinogram(i: usize) -> f64 {
    0.5 + 0.3 * ((i % 24) as f64 * 0.4).sin()
}

