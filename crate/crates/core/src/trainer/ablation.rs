//! Sweep over the restricted-level count and the outside step size, reporting
//! PSNR against training time for each setting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{train, Problem, Reference, TrainConfig, TrainingLog};
use crate::encoder::EncoderConfig;
use crate::field::Field;
use crate::network::MlpConfig;
use crate::projector::{ProjectionMode, SamplingPlan};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSetting {
    pub label: String,
    pub mode: ProjectionMode,
    /// Levels used outside the field of view.
    pub restricted_levels: usize,
    pub step_outside: f64,
}

pub struct AblationRun {
    pub setting: AblationSetting,
    pub log: TrainingLog,
}

/// Trains one field per setting from the same seed and initialisation.
pub fn run_ablation(
    problem: &Problem,
    encoder: EncoderConfig,
    mlp: MlpConfig,
    cfg: &TrainConfig,
    settings: &[AblationSetting],
    reference: &Reference,
) -> Result<Vec<AblationRun>> {
    let dim = problem.sinogram.geometry.mode.dim();
    settings
        .iter()
        .map(|s| {
            let enc = EncoderConfig { restricted_levels: s.restricted_levels, ..encoder };
            let plan = SamplingPlan { step_outside: s.step_outside, ..*problem.plan };
            plan.validate()?;
            let field = Field::<f32>::init(enc, mlp, dim, cfg.seed)?;
            let p = Problem { plan: &plan, ..*problem };
            let run_cfg = TrainConfig { mode: s.mode, ..cfg.clone() };
            let out = train(&p, field, &run_cfg, Some(reference))?;
            Ok(AblationRun { setting: s.clone(), log: out.log })
        })
        .collect()
}

/// One row per evaluation: `label,mode,m,step_outside,iteration,train_s,psnr,ms_per_iter`.
pub fn write_ablation_csv(runs: &[AblationRun], mut out: impl Write) -> Result<()> {
    writeln!(out, "label,mode,m,step_outside,iteration,train_s,psnr,ms_per_iter")?;
    for r in runs {
        let s = &r.setting;
        for (it, psnr, wall) in &r.log.evals {
            writeln!(
                out,
                "{},{:?},{},{},{},{:.3},{:.4},{:.3}",
                s.label,
                s.mode,
                s.restricted_levels,
                s.step_outside,
                it,
                wall.as_secs_f64(),
                psnr,
                r.log.ms_per_iteration()
            )?;
        }
    }
    Ok(())
}

/// One row per setting: `label,mode,m,step_outside,final_psnr,train_s,iterations`.
pub fn write_ablation_summary(runs: &[AblationRun], mut out: impl Write) -> Result<()> {
    writeln!(out, "label,mode,m,step_outside,final_psnr,train_s,iterations")?;
    for r in runs {
        let s = &r.setting;
        let psnr = r.log.last_psnr().map(|p| format!("{p:.4}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:?},{},{},{},{:.3},{}",
            s.label,
            s.mode,
            s.restricted_levels,
            s.step_outside,
            psnr,
            r.log.phases.training().as_secs_f64(),
            r.log.iterations
        )?;
    }
    Ok(())
}
