//! Joint optimisation of the MLP and the hash tables from projection data.

mod adam;
pub mod ablation;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, AdamState, AdamStep, TableUpdate};

use crate::field::{Field, FieldGrads};
use crate::geometry::Domain;
use crate::metrics;
use crate::network::MlpGrads;
use crate::projector::{
    backward_encoder, backward_network, forward_project, l1_upstream, sample_ray_with, ProjectionMode, RaySampleSet,
    SampleBatch, SamplingPlan,
};
use crate::volume::{GridSpec, Sinogram, VolumeGrid};
use crate::{Error, Real, Result};

/// Points per parallel task in [`reconstruct_volume`].
const RECON_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub max_iterations: usize,
    /// Iterations between PSNR evaluations / stopping checks.
    pub eval_every: usize,
    /// Iterations between loss log records.
    pub log_every: usize,
    /// Stop when consecutive PSNR evaluations differ by less than this (dB).
    pub stop_psnr_delta: f64,
    /// Without a reference volume: stop when the windowed mean loss improves
    /// by less than this fraction between evaluations.
    pub loss_plateau: f64,
    pub seed: u64,
    pub mode: ProjectionMode,
    /// Rays per parallel work unit. Results depend on this value but not on
    /// the number of worker threads.
    pub chunk_rays: usize,
    pub table_update: TableUpdate,
    /// Where to write the field if training hits a non-finite value.
    pub diagnostic_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_rays: 128,
            max_iterations: 200_000,
            eval_every: 10_000,
            log_every: 100,
            stop_psnr_delta: 0.1,
            loss_plateau: 0.005,
            seed: 0,
            mode: ProjectionMode::Extended,
            chunk_rays: 32,
            table_update: TableUpdate::Sparse,
            diagnostic_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_rays < 1 {
            v.push("train.batch_rays must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.eval_every < 1 || self.log_every < 1 || self.chunk_rays < 1 {
            v.push("train.eval_every, train.log_every and train.chunk_rays must be >= 1".into());
        }
        if !(self.stop_psnr_delta >= 0.0) || !(self.loss_plateau >= 0.0) {
            v.push("train stopping thresholds must be non-negative".into());
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
}

/// Reference volume used for PSNR monitoring and the stopping rule.
#[derive(Clone, Debug)]
pub struct Reference {
    pub volume: VolumeGrid,
    pub data_range: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub wall_ms: f64,
    pub phase: &'static str,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub sampling: Duration,
    pub forward: Duration,
    pub backward: Duration,
    pub optimizer: Duration,
    pub evaluation: Duration,
}

impl PhaseTimes {
    /// Training time, evaluation excluded.
    pub fn training(&self) -> Duration {
        self.sampling + self.forward + self.backward + self.optimizer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NotStopped,
    PsnrConverged,
    LossPlateau,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    /// Mean L1 loss of every iteration.
    pub losses: Vec<f64>,
    /// `(iteration, PSNR dB, training wall-clock)` at each evaluation.
    pub evals: Vec<(usize, f64, Duration)>,
    /// Mean loss over each evaluation window.
    pub loss_windows: Vec<f64>,
    pub has_reference: bool,
    pub phases: PhaseTimes,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

impl TrainingLog {
    pub fn new(has_reference: bool) -> Self {
        TrainingLog {
            records: Vec::new(),
            losses: Vec::new(),
            evals: Vec::new(),
            loss_windows: Vec::new(),
            has_reference,
            phases: PhaseTimes::default(),
            iterations: 0,
            stop_reason: StopReason::NotStopped,
        }
    }

    pub fn last_psnr(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }

    pub fn ms_per_iteration(&self) -> f64 {
        self.phases.training().as_secs_f64() * 1e3 / self.iterations.max(1) as f64
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iteration,loss,psnr,wall_ms,phase")?;
        for r in &self.records {
            let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{:.3},{}", r.iteration, r.loss, psnr, r.wall_ms, r.phase)?;
        }
        Ok(())
    }
}

/// The stopping rule: PSNR change between the last two evaluations, or the
/// relative loss plateau when no reference volume is available.
pub fn stopping_check(log: &TrainingLog, cfg: &TrainConfig) -> StopDecision {
    if log.has_reference {
        if let [.., a, b] = log.evals.as_slice() {
            if (b.1 - a.1).abs() < cfg.stop_psnr_delta || (a.1.is_infinite() && b.1.is_infinite()) {
                return StopDecision::Stop(StopReason::PsnrConverged);
            }
        }
    } else if let [.., a, b] = log.loss_windows.as_slice() {
        if *a > 0.0 && (a - b) / a < cfg.loss_plateau {
            return StopDecision::Stop(StopReason::LossPlateau);
        }
    }
    StopDecision::Continue
}

/// What is being fitted: measured projections and the reconstruction domain.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub sinogram: &'a Sinogram,
    pub domain: &'a Domain,
    pub plan: &'a SamplingPlan,
}

impl Problem<'_> {
    fn check<R: Real>(&self, field: &Field<R>) -> Result<()> {
        let g = &self.sinogram.geometry;
        g.validate()?;
        if self.sinogram.values.len() != g.n_rays() {
            return Err(Error::Shape(format!("sinogram has {} values for {} rays", self.sinogram.values.len(), g.n_rays())));
        }
        if field.dim() != g.mode.dim() {
            return Err(Error::Shape(format!("{}D field for a {:?} scan", field.dim(), g.mode)));
        }
        self.plan.validate()
    }
}

pub struct TrainOutcome<R> {
    pub field: Field<R>,
    pub log: TrainingLog,
}

struct ChunkForward<R> {
    measured: Vec<f64>,
    predicted: Vec<f64>,
    cache: crate::projector::ProjectionCache<R>,
}

/// Trains `field` on `problem`, starting from its current parameters.
pub fn train<R: Real>(
    problem: &Problem,
    mut field: Field<R>,
    cfg: &TrainConfig,
    reference: Option<&Reference>,
) -> Result<TrainOutcome<R>> {
    cfg.validate()?;
    problem.check(&field)?;
    let geom = &problem.sinogram.geometry;
    let n_total = geom.n_rays();
    let dim = field.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&field, AdamConfig::default(), cfg.table_update);
    let mut grads = FieldGrads::new(&field);
    let mut log = TrainingLog::new(reference.is_some());
    let scale = 1.0 / cfg.batch_rays as f64;
    let mut log_window = 0.0;
    let mut eval_window = 0.0;

    for it in 1..=cfg.max_iterations {
        // Sampling.
        let t0 = Instant::now();
        let picks: Vec<(usize, u64)> = (0..cfg.batch_rays)
            .map(|_| (rng.random_range(0..n_total), if problem.plan.jitter { rng.random() } else { 0 }))
            .collect();
        let chunks: Vec<(Vec<f64>, SampleBatch)> = picks
            .par_chunks(cfg.chunk_rays)
            .map(|chunk| -> Result<_> {
                let mut sets: Vec<RaySampleSet> = Vec::with_capacity(chunk.len());
                let mut measured = Vec::with_capacity(chunk.len());
                for &(idx, jitter_seed) in chunk {
                    let ray = geom.ray_at(idx)?;
                    let mut jrng = ChaCha8Rng::seed_from_u64(jitter_seed);
                    let jitter = problem.plan.jitter.then_some(&mut jrng);
                    sets.push(sample_ray_with(&ray, problem.domain, problem.plan, jitter));
                    measured.push(problem.sinogram.values[idx]);
                }
                Ok((measured, SampleBatch::from_rays(&sets, problem.domain, cfg.mode, dim)))
            })
            .collect::<Result<_>>()?;
        let t1 = Instant::now();

        // Forward.
        let forwards: Vec<ChunkForward<R>> = chunks
            .into_par_iter()
            .map(|(measured, batch)| {
                let (predicted, cache) = forward_project(&field, batch)?;
                Ok(ChunkForward { measured, predicted, cache })
            })
            .collect::<Result<_>>()?;
        let loss: f64 = forwards
            .iter()
            .flat_map(|c| c.measured.iter().zip(&c.predicted).map(|(p, q)| (p - q).abs()))
            .sum::<f64>()
            * scale;
        let t2 = Instant::now();
        if !loss.is_finite() {
            return Err(abort(cfg, &field, format!("loss is {loss} at iteration {it}")));
        }

        // Backward: per-chunk network gradients in parallel, reduced and
        // scattered into the tables in chunk order.
        let backs: Vec<(MlpGrads<R>, Option<ndarray::Array2<R>>)> = forwards
            .par_iter()
            .map(|c| {
                let upstream: Vec<f64> =
                    c.measured.iter().zip(&c.predicted).map(|(&p, &q)| scale * l1_upstream(p, q)).collect();
                let mut g = MlpGrads::zeros_like(&field.mlp);
                let dx = backward_network(&field, &c.cache, &upstream, &mut g)?;
                Ok((g, dx))
            })
            .collect::<Result<_>>()?;
        grads.clear();
        for (c, (g, dx)) in forwards.iter().zip(&backs) {
            grads.mlp.add_assign(g);
            if let Some(dx) = dx {
                backward_encoder(&field, &c.cache.batch, dx, &mut grads.encoder);
            }
        }
        let t3 = Instant::now();

        // Optimizer.
        if let Err(e) = adam.step(&mut field, &grads, cfg.learning_rate) {
            return Err(abort(cfg, &field, e.to_string()));
        }
        let t4 = Instant::now();
        log.phases.sampling += t1 - t0;
        log.phases.forward += t2 - t1;
        log.phases.backward += t3 - t2;
        log.phases.optimizer += t4 - t3;
        log.iterations = it;
        log.losses.push(loss);
        log_window += loss;
        eval_window += loss;

        let wall_ms = log.phases.training().as_secs_f64() * 1e3;
        if it % cfg.log_every == 0 {
            log.records.push(LogRecord {
                iteration: it,
                loss: log_window / cfg.log_every as f64,
                psnr: None,
                wall_ms,
                phase: "train",
            });
            log_window = 0.0;
        }
        if it % cfg.eval_every == 0 {
            log.loss_windows.push(eval_window / cfg.eval_every as f64);
            eval_window = 0.0;
            if let Some(reference) = reference {
                let te = Instant::now();
                let psnr = evaluate_psnr(&field, problem.domain, reference)?;
                log.phases.evaluation += te.elapsed();
                log.evals.push((it, psnr, log.phases.training()));
                log.records.push(LogRecord { iteration: it, loss, psnr: Some(psnr), wall_ms, phase: "eval" });
            }
            if let StopDecision::Stop(reason) = stopping_check(&log, cfg) {
                log.stop_reason = reason;
                return Ok(TrainOutcome { field, log });
            }
        }
    }
    log.stop_reason = StopReason::MaxIterations;
    Ok(TrainOutcome { field, log })
}

fn abort<R: Real>(cfg: &TrainConfig, field: &Field<R>, what: String) -> Error {
    match &cfg.diagnostic_checkpoint {
        Some(path) => match crate::io::write_checkpoint(path, field) {
            Ok(()) => Error::NonFinite(format!("{what}; diagnostic checkpoint written to {}", path.display())),
            Err(e) => Error::NonFinite(format!("{what}; diagnostic checkpoint failed: {e}")),
        },
        None => Error::NonFinite(what),
    }
}

pub fn evaluate_psnr<R: Real>(field: &Field<R>, domain: &Domain, reference: &Reference) -> Result<f64> {
    let recon = reconstruct_volume(field, domain, &reference.volume.spec)?;
    metrics::psnr(&recon, &reference.volume, reference.data_range)
}

/// Evaluates the field (full encoder) at every voxel centre of `grid`.
pub fn reconstruct_volume<R: Real>(field: &Field<R>, domain: &Domain, grid: &GridSpec) -> Result<VolumeGrid> {
    grid.validate()?;
    if !domain.extended.contains_box(&grid.center_bounds()) {
        return Err(Error::Domain(format!(
            "grid voxel centres span {:?}..{:?}, outside the extended FOV",
            grid.center_bounds().min,
            grid.center_bounds().max
        )));
    }
    let centers = grid.centers();
    let parts = centers
        .par_chunks(RECON_CHUNK)
        .map(|c| field.eval_points(domain, c))
        .collect::<Result<Vec<_>>>()?;
    VolumeGrid::from_values(*grid, parts.concat())
}
