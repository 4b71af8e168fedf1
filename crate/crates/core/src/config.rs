//! Run configuration: one TOML file describing geometry, domain, data
//! source, model, sampling, training, baseline and evaluation settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{Extrapolation, FilterSpec};
use crate::encoder::EncoderConfig;
use crate::geometry::{Domain, GeometryMode, ScanGeometry};
use crate::network::MlpConfig;
use crate::phantom::Phantom;
use crate::projector::{ProjectionMode, SamplingPlan};
use crate::trainer::ablation::AblationSetting;
use crate::trainer::TrainConfig;
use crate::volume::GridSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// Full extent of `Ω` in mm (x, y, z), centred on the isocentre.
    pub fov_mm: [f64; 3],
    /// Full extent of `Ω_E` in mm.
    pub extended_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Built-in phantom name (`empty`, `disk`, `head`, `shepp-logan`).
    pub builtin: Option<String>,
    /// Text file with one ellipsoid per line.
    pub file: Option<PathBuf>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "one")]
    pub contrast: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    /// Must equal `n_levels · feature_dim` when given.
    pub input_dim: Option<usize>,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub mu_max: f64,
}

impl Default for MlpSection {
    fn default() -> Self {
        MlpSection { input_dim: None, hidden_layers: 3, hidden_width: 256, mu_max: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdkConfig {
    pub filter: FilterSpec,
    pub extrapolate: bool,
    pub extrapolation: Extrapolation,
}

impl Default for FdkConfig {
    fn default() -> Self {
        FdkConfig { filter: FilterSpec::default(), extrapolate: false, extrapolation: Extrapolation::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Voxel pitch of reconstructions and the reference grid over `Ω`.
    pub voxel_pitch_mm: f64,
    /// PSNR/SSIM range; defaults to the reference's max − min.
    pub data_range: Option<f64>,
    /// Symmetric window of difference images (1/mm).
    pub diff_window: f64,
    /// Subsamples per axis when rasterizing the phantom.
    pub supersample: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { voxel_pitch_mm: 1.0, data_range: None, diff_window: 0.005, supersample: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub settings: Vec<AblationSetting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub geometry: ScanGeometry,
    pub domain: DomainConfig,
    pub phantom: Option<PhantomConfig>,
    /// Measured sinogram; overrides simulation from the phantom.
    pub sinogram: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mlp: MlpSection,
    #[serde(default)]
    pub sampling: SamplingPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fdk: FdkConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Parses and validates; every violated constraint is reported at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.geometry.violations();
        v.extend(self.encoder.violations());
        v.extend(self.mlp_config().violations());
        if let Some(d) = self.mlp.input_dim {
            if d != self.encoder.output_dim() {
                v.push(format!(
                    "mlp.input_dim = {d} but encoder n_levels·feature_dim = {}",
                    self.encoder.output_dim()
                ));
            }
        }
        for (name, e) in [("fov_mm", self.domain.fov_mm), ("extended_mm", self.domain.extended_mm)] {
            if e.iter().any(|x| !(*x > 0.0)) {
                v.push(format!("domain.{name} must be positive, got {e:?}"));
            }
        }
        if self.domain.fov_mm.iter().zip(&self.domain.extended_mm).any(|(a, b)| a > b) {
            v.push("domain: FOV must be contained in the extended FOV".into());
        }
        v.extend(self.sampling.violations());
        v.extend(self.train.violations());
        if self.train.seed != 0 && self.train.seed != self.seed {
            v.push("train.seed: set the top-level `seed`, which drives both initialisation and sampling".into());
        }
        v.extend(self.fdk.filter.violations());
        if !(self.fdk.extrapolation.margin_fraction >= 0.0) {
            v.push("fdk.extrapolation.margin_fraction must be >= 0".into());
        }
        if !(self.eval.voxel_pitch_mm > 0.0) {
            v.push("eval.voxel_pitch_mm must be positive".into());
        }
        if !(self.eval.diff_window > 0.0) {
            v.push("eval.diff_window must be positive".into());
        }
        if self.eval.supersample == 0 {
            v.push("eval.supersample must be >= 1".into());
        }
        if let Some(p) = &self.phantom {
            match (&p.builtin, &p.file) {
                (None, None) => v.push("phantom: set either builtin or file".into()),
                (Some(_), Some(_)) => v.push("phantom: builtin and file are mutually exclusive".into()),
                _ => {}
            }
            if !(p.scale > 0.0) || !(p.contrast >= 0.0) {
                v.push("phantom: scale must be > 0 and contrast >= 0".into());
            }
        }
        for s in &self.ablate.settings {
            if s.restricted_levels > self.encoder.n_levels {
                v.push(format!("ablate {}: m = {} exceeds n_levels", s.label, s.restricted_levels));
            }
            if !(s.step_outside >= self.sampling.step_inside) {
                v.push(format!("ablate {}: step_outside below step_inside", s.label));
            }
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

    pub fn planar(&self) -> bool {
        self.geometry.mode == GeometryMode::Fan2d
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::centered(self.domain.fov_mm, self.domain.extended_mm)
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig::new(self.encoder.output_dim(), self.mlp.hidden_layers, self.mlp.hidden_width, self.mlp.mu_max)
    }

    /// Reference / evaluation grid covering `Ω`.
    pub fn fov_grid(&self) -> Result<GridSpec> {
        GridSpec::covering(&self.domain()?.fov, self.eval.voxel_pitch_mm, self.planar())
    }

    /// Grid covering `Ω_E`.
    pub fn extended_grid(&self) -> Result<GridSpec> {
        GridSpec::covering(&self.domain()?.extended, self.eval.voxel_pitch_mm, self.planar())
    }

    pub fn mode(&self) -> ProjectionMode {
        self.train.mode
    }

    /// Phantom named by the config, relative paths resolved against `base`.
    pub fn load_phantom(&self, base: &Path) -> Result<Phantom> {
        let Some(p) = &self.phantom else {
            return Err(Error::config("no [phantom] section: a phantom is required"));
        };
        let planar = self.planar();
        let ph = match (&p.builtin, &p.file) {
            (Some(name), None) => Phantom::builtin(name, planar)?,
            (None, Some(file)) => {
                let path = base.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::config(format!("cannot read phantom {}: {e}", path.display())))?;
                Phantom::parse(&text, planar)?
            }
            _ => return Err(Error::config("phantom: set exactly one of builtin or file")),
        };
        let ph = if p.scale != 1.0 { ph.scaled(p.scale)? } else { ph };
        Ok(if p.contrast != 1.0 { ph.with_contrast(p.contrast) } else { ph })
    }
}
