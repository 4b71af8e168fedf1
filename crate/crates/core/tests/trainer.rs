mod common;

use inrct::encoder::{EncoderConfig, EncoderGradBuffer};
use inrct::field::FieldGrads;
use inrct::network::MlpConfig;
use inrct::projector::{forward_project, sample_ray, ProjectionMode, SampleBatch, SamplingPlan};
use inrct::trainer::{
    adam_update, reconstruct_volume, stopping_check, train, AdamConfig, AdamState, AdamStep, Problem, StopDecision,
    StopReason, TableUpdate, TrainConfig, TrainingLog,
};
use inrct::{Domain, Error, Field, GridSpec, ScanGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{f32_field, sine_sinogram, small_problem};

/// Textbook Adam in plain f64, one scalar at a time.
fn oracle_adam(p: &mut [f64], g_seq: &[Vec<f64>], lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in g_seq.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_matches_textbook_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 64;
    let init: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..20).map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let mut expect = init.clone();
    oracle_adam(&mut expect, &grads, 1e-2);
    let mut got = init.clone();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    for (t, g) in grads.iter().enumerate() {
        adam_update(&mut got, g, &mut m, &mut v, &AdamStep::new(&AdamConfig::default(), 1e-2, t as u64 + 1));
    }
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
    }
}

fn tiny_field(seed: u64, levels: usize, m: usize) -> Field<f64> {
    let enc = EncoderConfig { n_levels: levels, n_min: 2, n_max: 8, table_size: 16, feature_dim: 2, restricted_levels: m };
    Field::init(enc, MlpConfig::new(2 * levels, 1, 8, 0.1), 2, seed).unwrap()
}

#[test]
fn sparse_equals_dense_when_every_row_is_touched() {
    let field = tiny_field(1, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sparse, mut dense) = (field.clone(), field.clone());
    let mut s_state = AdamState::new(&field, AdamConfig::default(), TableUpdate::Sparse);
    let mut d_state = AdamState::new(&field, AdamConfig::default(), TableUpdate::Dense);
    for _ in 0..5 {
        let mut g = FieldGrads::new(&field);
        for level in 0..2 {
            // Touch rows in a shuffled order.
            let mut rows: Vec<usize> = (0..16).collect();
            rows.sort_by_key(|_| rng.random::<u32>());
            for r in rows {
                g.encoder.add(level, r, 1.0, &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
        }
        g.mlp.weights[0].mapv_inplace(|_| rng.random_range(-1.0..1.0));
        s_state.step(&mut sparse, &g, 1e-2).unwrap();
        d_state.step(&mut dense, &g, 1e-2).unwrap();
    }
    assert_eq!(sparse.encoding.tables, dense.encoding.tables);
    assert_eq!(sparse.mlp.weights, dense.mlp.weights);
}

#[test]
fn untouched_rows_are_frozen_and_zero_gradient_is_a_no_op() {
    let mut field = tiny_field(1, 2, 1);
    let before = field.clone();
    let mut state = AdamState::new(&field, AdamConfig::default(), TableUpdate::Sparse);
    let mut g = FieldGrads::new(&field);
    g.encoder.add(0, 3, 1.0, &[0.0, 0.0]);
    state.step(&mut field, &g, 1e-2).unwrap();
    assert_eq!(state.step, 1);
    assert_eq!(field.encoding.tables, before.encoding.tables);
    let mut g = FieldGrads::new(&field);
    g.encoder.add(0, 5, 1.0, &[1.0, -1.0]);
    state.step(&mut field, &g, 1e-2).unwrap();
    for level in 0..2 {
        for row in 0..16 {
            let changed = field.encoding.row(level, row) != before.encoding.row(level, row);
            assert_eq!(changed, level == 0 && row == 5, "level {level} row {row}");
        }
    }
}

#[test]
fn nan_gradient_is_an_error() {
    let mut field = tiny_field(1, 2, 1);
    let mut state = AdamState::new(&field, AdamConfig::default(), TableUpdate::Sparse);
    let mut g = FieldGrads::new(&field);
    g.encoder.add(0, 2, 1.0, &[f64::NAN, 0.0]);
    assert!(matches!(state.step(&mut field, &g, 1e-3), Err(Error::NonFinite(_))));
    let _ = EncoderGradBuffer::<f64>::new(field.encoding.config);
}

#[test]
fn reconstruct_volume_examples() {
    let mut field = tiny_field(4, 2, 1);
    let domain = Domain::centered([20.0, 20.0, 2.0], [40.0, 40.0, 2.0]).unwrap();
    let grid = GridSpec::covering(&domain.fov, 1.0, true).unwrap();
    let v = reconstruct_volume(&field, &domain, &grid).unwrap();
    assert!(v.values.iter().all(|&x| x > 0.0 && x < 0.1));
    field.mlp.weights.iter_mut().for_each(|w| w.fill(0.0));
    field.mlp.touch();
    let flat = reconstruct_volume(&field, &domain, &grid).unwrap();
    assert!(flat.values.iter().all(|&x| x == 0.05));
    let outside = GridSpec::new([4, 4, 1], [20.0, 20.0, 1.0], [-40.0, -40.0, -0.5]).unwrap();
    assert!(matches!(reconstruct_volume(&field, &domain, &outside), Err(Error::Domain(_))));
}

#[test]
fn zero_sinogram_drives_field_to_zero() {
    let s = small_problem(|_| 0.0);
    let problem = Problem { sinogram: &s.sino, domain: &s.domain, plan: &s.plan };
    let cfg = TrainConfig { learning_rate: 3e-2, max_iterations: 800, eval_every: 100_000, batch_rays: 32, ..Default::default() };
    let out = train(&problem, f32_field(1, 2), &cfg, None).unwrap();
    let g = &s.sino.geometry;
    let sets: Vec<_> = (0..g.n_rays()).map(|i| sample_ray(&g.ray_at(i).unwrap(), &s.domain, &s.plan)).collect();
    let chords: Vec<f64> = sets.iter().map(|s| s.samples.iter().map(|x| x.weight).sum()).collect();
    let batch = SampleBatch::from_rays(&sets, &s.domain, ProjectionMode::Extended, 2);
    let (pred, _) = forward_project(&out.field, batch).unwrap();
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    let mean_chord = chords.iter().sum::<f64>() / chords.len() as f64;
    assert!(mean_pred < 1e-3 * 0.1 * mean_chord, "{mean_pred} vs {}", 0.1 * mean_chord);
}

#[test]
fn seeded_runs_are_bit_identical_across_thread_counts() {
    let s = small_problem(sine_sinogram);
    let problem = Problem { sinogram: &s.sino, domain: &s.domain, plan: &s.plan };
    let cfg = TrainConfig { learning_rate: 1e-2, max_iterations: 40, batch_rays: 70, chunk_rays: 16, ..Default::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&problem, f32_field(5, 2), &cfg, None).unwrap())
    };
    let (a, b, c) = (run(1), run(1), run(3));
    assert_eq!(a.log.losses, b.log.losses);
    assert_eq!(a.log.losses, c.log.losses);
    assert_eq!(a.field, c.field);
}

#[test]
fn extended_with_all_levels_matches_dense_trajectory() {
    let s = small_problem(sine_sinogram);
    let plan = SamplingPlan::new(1.0, 1.0).unwrap();
    let problem = Problem { sinogram: &s.sino, domain: &s.domain, plan: &plan };
    let base = TrainConfig { learning_rate: 1e-2, max_iterations: 60, ..Default::default() };
    let ext = train(&problem, f32_field(8, 4), &TrainConfig { mode: ProjectionMode::Extended, ..base.clone() }, None).unwrap();
    let dense = train(&problem, f32_field(8, 4), &TrainConfig { mode: ProjectionMode::Dense, ..base }, None).unwrap();
    for (a, b) in ext.log.losses.iter().zip(&dense.log.losses) {
        assert!((a - b).abs() <= 1e-5 * b.abs());
    }
}

#[test]
fn plateau_is_detected_within_one_window() {
    let cfg = TrainConfig::default();
    let onset = 7;
    let windows: Vec<f64> = (0..20).map(|k| if k < onset { 1.0 / (1.0 + k as f64) } else { 1.0 / (1.0 + onset as f64) }).collect();
    let mut log = TrainingLog::new(false);
    let mut stopped = None;
    for (k, w) in windows.iter().enumerate() {
        log.loss_windows.push(*w);
        if stopping_check(&log, &cfg) == StopDecision::Stop(StopReason::LossPlateau) {
            stopped = Some(k);
            break;
        }
    }
    let k = stopped.expect("plateau detected");
    assert!(k >= onset && k <= onset + 1, "stopped at window {k}");
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let s = small_problem(|i| if i % 2 == 0 { f64::NAN } else { 0.1 });
    let problem = Problem { sinogram: &s.sino, domain: &s.domain, plan: &s.plan };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("diag.ckpt");
    let cfg = TrainConfig { batch_rays: 288, max_iterations: 3, diagnostic_checkpoint: Some(ckpt.clone()), ..Default::default() };
    let err = train(&problem, f32_field(1, 2), &cfg, None).err().expect("must fail");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let back: Field<f32> = inrct::io::read_checkpoint(&ckpt).unwrap();
    assert_eq!(back, f32_field(1, 2));
}

#[test]
fn training_log_csv() {
    let s = small_problem(sine_sinogram);
    let problem = Problem { sinogram: &s.sino, domain: &s.domain, plan: &s.plan };
    let cfg = TrainConfig { max_iterations: 20, log_every: 10, ..Default::default() };
    let out = train(&problem, f32_field(1, 2), &cfg, None).unwrap();
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,loss,psnr,wall_ms,phase");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,"));
    assert_eq!(out.log.stop_reason, StopReason::MaxIterations);
}

#[test]
fn cone_beam_training_smoke() {
    let g = ScanGeometry::cone3d(600.0, 400.0, 12, 24, (4.0, 4.0), 16).unwrap();
    let phantom = inrct::phantom::Phantom::builtin("head", false).unwrap();
    let sino = phantom.simulate_sinogram(&g);
    let domain = Domain::centered([64.0, 64.0, 32.0], [128.0, 128.0, 64.0]).unwrap();
    let plan = SamplingPlan::new(2.0, 8.0).unwrap();
    let problem = Problem { sinogram: &sino, domain: &domain, plan: &plan };
    let enc = EncoderConfig { n_levels: 4, n_min: 4, n_max: 32, table_size: 1 << 12, feature_dim: 2, restricted_levels: 2 };
    let field = Field::<f32>::init(enc, MlpConfig::new(8, 1, 16, 0.1), 3, 3).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-2, max_iterations: 80, batch_rays: 48, ..Default::default() };
    let out = train(&problem, field, &cfg, None).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let l = &out.log.losses;
    assert!(mean(&l[70..]) < 0.5 * mean(&l[..10]), "{} -> {}", mean(&l[..10]), mean(&l[70..]));
    let grid = GridSpec::covering(&domain.fov, 8.0, false).unwrap();
    let vol = reconstruct_volume(&out.field, &domain, &grid).unwrap();
    assert_eq!(vol.spec.dims, [8, 8, 4]);
    assert!(vol.all_finite());
}
