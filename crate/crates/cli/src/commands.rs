//! The subcommands, each wiring library operations to files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use inrct::baseline::fdk_reconstruct;
use inrct::config::{Precision, RunConfig};
use inrct::metrics::{diff_image, write_slice_png, MetricsReport, SliceAxis};
use inrct::projector::ProjectionMode;
use inrct::trainer::ablation::{run_ablation, write_ablation_csv, write_ablation_summary};
use inrct::trainer::{reconstruct_volume, train as train_field, Problem, Reference};
use inrct::{io, Error, Field, GridSpec, Real, Result, Sinogram, VolumeGrid};

use crate::manifest::Recorder;
use crate::WORKERS_ENV;

/// A loaded configuration and the directory its relative paths refer to.
struct Ctx {
    path: PathBuf,
    base: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::load(path)?;
        // One seed drives initialisation and ray sampling.
        cfg.train.seed = cfg.seed;
        init_workers(cfg.workers)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Ctx { path: path.to_path_buf(), base, cfg })
    }

    fn out_dir(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        Ok(self.cfg.output_dir.clone())
    }

    fn out_file(&self, given: Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let path = match given {
            Some(p) => p,
            None => self.out_dir()?.join(default),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    fn finish(&self, rec: Recorder) -> Result<()> {
        let manifest = rec.finish(&self.out_dir()?, Some((&self.path, &self.cfg)))?;
        println!("manifest: {}", manifest.display());
        Ok(())
    }

    /// The measured sinogram if configured, otherwise the phantom's.
    fn sinogram(&self) -> Result<Sinogram> {
        if let Some(p) = &self.cfg.sinogram {
            let sino = io::read_sinogram(&self.base.join(p))?;
            if sino.geometry != self.cfg.geometry {
                return Err(Error::config(format!("sinogram {} was acquired with a different geometry", p.display())));
            }
            return Ok(sino);
        }
        if self.cfg.phantom.is_none() {
            return Err(Error::config("no data: set `sinogram` or a [phantom] section"));
        }
        Ok(self.cfg.load_phantom(&self.base)?.simulate_sinogram(&self.cfg.geometry))
    }

    /// Ground truth over `Ω` when a phantom is configured.
    fn reference(&self) -> Result<Option<Reference>> {
        if self.cfg.phantom.is_none() {
            return Ok(None);
        }
        let volume = self.cfg.load_phantom(&self.base)?.rasterize(&self.cfg.fov_grid()?, self.cfg.eval.supersample)?;
        Ok(Some(Reference { volume, data_range: self.cfg.eval.data_range }))
    }

    fn grid(&self, extended: bool) -> Result<GridSpec> {
        if extended {
            self.cfg.extended_grid()
        } else {
            self.cfg.fov_grid()
        }
    }
}

/// Builds the global worker pool from the environment override or the config.
fn init_workers(configured: usize) -> Result<()> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::config(format!("{WORKERS_ENV}={v} is not a worker count")))?,
        Err(_) => configured,
    };
    if n > 0 {
        // Fails only if a pool already exists, which is then kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn write_volume_outputs(vol: &VolumeGrid, path: &Path, png: bool, rec: &mut Recorder) -> Result<()> {
    io::write_volume(path, vol)?;
    rec.output(path);
    println!("wrote {}", path.display());
    if png {
        let (lo, hi) = vol.min_max();
        let png_path = path.with_extension("png");
        write_slice_png(vol, SliceAxis::Z, vol.spec.dims[2] / 2, lo, hi, &png_path)?;
        rec.output(&png_path);
    }
    Ok(())
}

pub fn simulate(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let ctx = Ctx::load(config)?;
    let mut rec = Recorder::start("simulate");
    if ctx.cfg.phantom.is_none() {
        return Err(Error::config("simulate needs a [phantom] section"));
    }
    let phantom = ctx.cfg.load_phantom(&ctx.base)?;
    let sino = phantom.simulate_sinogram(&ctx.cfg.geometry);
    let path = ctx.out_file(out, "sinogram.sino")?;
    io::write_sinogram(&path, &sino)?;
    let echo = path.with_extension("geometry.toml");
    let geometry = toml::to_string(&ctx.cfg.geometry).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&echo, geometry)?;
    rec.output(&path);
    rec.output(&echo);
    println!("wrote {} ({} rays)", path.display(), sino.values.len());
    ctx.finish(rec)
}

pub fn train(config: &Path, mode: Option<ProjectionMode>, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut ctx = Ctx::load(config)?;
    if let Some(m) = mode {
        ctx.cfg.train.mode = m;
    }
    match ctx.cfg.precision {
        Precision::F32 => train_as::<f32>(&ctx, resume, out),
        Precision::F64 => train_as::<f64>(&ctx, resume, out),
    }
}

fn train_as<R: Real>(ctx: &Ctx, resume: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut rec = Recorder::start("train");
    let cfg = &ctx.cfg;
    let sino = ctx.sinogram()?;
    let reference = ctx.reference()?;
    let domain = cfg.domain()?;
    let field = match &resume {
        Some(p) => {
            let f = io::read_checkpoint::<R>(p)?;
            if f.encoding.config != cfg.encoder || f.mlp.config != cfg.mlp_config() {
                return Err(Error::config(format!("checkpoint {} does not match the configured model", p.display())));
            }
            f
        }
        None => Field::<R>::init(cfg.encoder, cfg.mlp_config(), cfg.geometry.mode.dim(), cfg.seed)?,
    };
    let mut train_cfg = cfg.train.clone();
    if train_cfg.diagnostic_checkpoint.is_none() {
        train_cfg.diagnostic_checkpoint = Some(ctx.out_dir()?.join("diagnostic.inr"));
    }
    let problem = Problem { sinogram: &sino, domain: &domain, plan: &cfg.sampling };
    let outcome = train_field(&problem, field, &train_cfg, reference.as_ref())?;
    let log = &outcome.log;

    let ckpt = ctx.out_file(out, "checkpoint.inr")?;
    io::write_checkpoint(&ckpt, &outcome.field)?;
    rec.output(&ckpt);
    let log_path = ctx.out_dir()?.join("train_log.csv");
    log.write_csv(BufWriter::new(File::create(&log_path)?))?;
    rec.output(&log_path);
    let psnr = log.last_psnr().map(|p| format!(", PSNR {p:.2} dB")).unwrap_or_default();
    println!(
        "{:?}: {} iterations ({:?}), {:.2} ms/iteration{psnr}; wrote {}",
        train_cfg.mode,
        log.iterations,
        log.stop_reason,
        log.ms_per_iteration(),
        ckpt.display()
    );
    ctx.finish(rec)
}

pub fn reconstruct(config: &Path, checkpoint: &Path, extended: bool, out: Option<PathBuf>, png: bool) -> Result<()> {
    let ctx = Ctx::load(config)?;
    let mut rec = Recorder::start("reconstruct");
    let vol = match ctx.cfg.precision {
        Precision::F32 => reconstruct_as::<f32>(&ctx, checkpoint, extended)?,
        Precision::F64 => reconstruct_as::<f64>(&ctx, checkpoint, extended)?,
    };
    let path = ctx.out_file(out, "inr.vol")?;
    write_volume_outputs(&vol, &path, png, &mut rec)?;
    ctx.finish(rec)
}

fn reconstruct_as<R: Real>(ctx: &Ctx, checkpoint: &Path, extended: bool) -> Result<VolumeGrid> {
    let field = io::read_checkpoint::<R>(checkpoint)?;
    reconstruct_volume(&field, &ctx.cfg.domain()?, &ctx.grid(extended)?)
}

pub fn fdk(config: &Path, extrapolate: bool, extended: bool, out: Option<PathBuf>, png: bool) -> Result<()> {
    let ctx = Ctx::load(config)?;
    let mut rec = Recorder::start("fdk");
    let sino = ctx.sinogram()?;
    let f = &ctx.cfg.fdk;
    let extrapolation = (extrapolate || f.extrapolate).then_some(&f.extrapolation);
    let vol = fdk_reconstruct(&sino, &ctx.grid(extended)?, &f.filter, extrapolation)?;
    let path = ctx.out_file(out, "fdk.vol")?;
    write_volume_outputs(&vol, &path, png, &mut rec)?;
    ctx.finish(rec)
}

pub struct EvalArgs {
    pub recon: PathBuf,
    pub reference: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub data_range: Option<f64>,
    pub diff_png: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label: String,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ctx = args.config.as_deref().map(Ctx::load).transpose()?;
    if ctx.is_none() {
        init_workers(0)?;
    }
    let mut rec = Recorder::start("eval");
    let recon = io::read_volume(&args.recon)?;
    let gt = match (&args.reference, &ctx) {
        (Some(p), _) => io::read_volume(p)?,
        (None, Some(c)) if c.cfg.phantom.is_some() => c.cfg.load_phantom(&c.base)?.rasterize(&recon.spec, c.cfg.eval.supersample)?,
        _ => return Err(Error::config("eval needs --reference or a config with a [phantom] section")),
    };
    let range = args.data_range.or(ctx.as_ref().and_then(|c| c.cfg.eval.data_range));
    let report = MetricsReport::evaluate(&args.label, &recon, &gt, range)?;
    println!("{}", report.summary());

    let out_dir = match &ctx {
        Some(c) => c.out_dir()?,
        None => args.recon.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let csv = args.out.unwrap_or_else(|| out_dir.join("metrics.csv"));
    MetricsReport::write_csv(&[report], BufWriter::new(File::create(&csv)?))?;
    rec.output(&csv);
    if let Some(p) = &args.diff_png {
        let window = ctx.as_ref().map_or(0.005, |c| c.cfg.eval.diff_window);
        diff_image(&recon, &gt, SliceAxis::Z, recon.spec.dims[2] / 2, window)?.write_png(p)?;
        rec.output(p);
    }
    let manifest = rec.finish(&out_dir, ctx.as_ref().map(|c| (c.path.as_path(), &c.cfg)))?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

pub fn ablate(config: &Path) -> Result<()> {
    let ctx = Ctx::load(config)?;
    let mut rec = Recorder::start("ablate");
    let cfg = &ctx.cfg;
    if cfg.ablate.settings.is_empty() {
        return Err(Error::config("ablate: [[ablate.settings]] is empty"));
    }
    let Some(reference) = ctx.reference()? else {
        return Err(Error::config("ablate needs a [phantom] section for the PSNR reference"));
    };
    let sino = ctx.sinogram()?;
    let domain = cfg.domain()?;
    let problem = Problem { sinogram: &sino, domain: &domain, plan: &cfg.sampling };
    let runs = run_ablation(&problem, cfg.encoder, cfg.mlp_config(), &cfg.train, &cfg.ablate.settings, &reference)?;
    for r in &runs {
        let psnr = r.log.last_psnr().map_or("-".into(), |p| format!("{p:.2} dB"));
        println!("{}: {psnr} after {} iterations, {:.1} s", r.setting.label, r.log.iterations, r.log.phases.training().as_secs_f64());
    }
    let dir = ctx.out_dir()?;
    let curves = dir.join("ablation.csv");
    write_ablation_csv(&runs, BufWriter::new(File::create(&curves)?))?;
    let summary = dir.join("ablation_summary.csv");
    write_ablation_summary(&runs, BufWriter::new(File::create(&summary)?))?;
    rec.output(&curves);
    rec.output(&summary);
    ctx.finish(rec)
}
