//! Resolution of run settings. Precedence, highest first: command-line flag,
//! config file (or replayed manifest), prompt spec, built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use fame_core::cross_attention::TokenGroupSpec;
use fame_core::diffusion::{EditConfig, LatentVideo, Prompts};
use fame_core::region::{synth_region_map, Layout, RegionMap};
use fame_core::{ften, FameError};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

/// Flags shared by every workflow.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Input latent clip (FTEN, h×w×frames×channels).
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Prompt spec JSON: {"ref", "tar", "fair", "theta_p", "lambda", "alpha", "overrides"}.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Run config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Take inputs and settings from a previous run manifest.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Region label map (FTEN); overrides --layout.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Synthetic region layout when no map is given: halves, disk, stripes.
    #[arg(long)]
    pub layout: Option<Layout>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attention modulation strength, applied to self and cross attention.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Prompt spec file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "tar")]
    pub target: Option<String>,
    #[serde(rename = "fair", default)]
    pub fairness: String,
    pub theta_p: Option<f64>,
    /// Fusion coefficient λ_k, shared by every selected position.
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub overrides: Option<Vec<usize>>,
}

/// Run config file; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub schedule_steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub guidance: Option<f64>,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub cross_lambda: Option<f64>,
    pub mu: Option<f64>,
    pub tau: Option<f64>,
    pub clamp_negative: Option<bool>,
    pub alpha: Option<f64>,
    pub theta_p: Option<f64>,
    pub fusion_lambda: Option<f64>,
    pub overrides: Option<Vec<usize>>,
    /// Token-group spec JSON path, relative to the config file.
    pub groups: Option<PathBuf>,
    /// Region label map path, relative to the config file.
    pub regions: Option<PathBuf>,
    pub layout: Option<Layout>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSource {
    File(PathBuf),
    Layout(Layout),
}

/// Fully resolved inputs and settings; stored verbatim in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub video: PathBuf,
    pub regions: RegionSource,
    pub prompts: Prompts,
    pub config: EditConfig,
}

impl ResolvedRun {
    pub fn load_video(&self) -> Result<LatentVideo> {
        let t = ften::read(&self.video).with_context(|| format!("reading video {}", self.video.display()))?;
        Ok(LatentVideo::new(t, 0)?)
    }

    pub fn load_regions(&self, video: &LatentVideo) -> Result<RegionMap> {
        Ok(match &self.regions {
            RegionSource::File(p) => {
                RegionMap::load(p).with_context(|| format!("reading region map {}", p.display()))?
            }
            RegionSource::Layout(l) => synth_region_map(video.height(), video.width(), *l, self.config.seed)?,
        })
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(FameError::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn missing(what: &str) -> anyhow::Error {
    FameError::Config(format!("missing required input: {what}")).into()
}

/// Resolves flags against the replayed manifest or the config files.
pub fn resolve(flags: &RunFlags) -> Result<ResolvedRun> {
    let mut run = match &flags.replay {
        Some(path) => {
            let manifest: RunManifest = read_json(path)?;
            manifest.verify_inputs()?;
            manifest.run
        }
        None => resolve_files(flags)?,
    };
    apply_flags(&mut run, flags);
    run.config.validate()?;
    Ok(run)
}

fn resolve_files(flags: &RunFlags) -> Result<ResolvedRun> {
    let mut cfg = EditConfig::default();
    let mut prompts = Prompts::new("", "", "");
    if let Some(path) = &flags.prompts {
        let spec: PromptSpec = read_json(path)?;
        prompts = Prompts {
            target: spec.target.clone().unwrap_or_else(|| spec.reference.clone()),
            reference: spec.reference,
            fairness: spec.fairness,
        };
        set(&mut cfg.theta_p, spec.theta_p);
        set(&mut cfg.fusion_lambda, spec.lambda);
        set(&mut cfg.alpha, spec.alpha);
        if spec.overrides.is_some() {
            cfg.overrides = spec.overrides;
        }
    }

    let mut regions = None;
    let mut layout = None;
    if let Some(path) = &flags.config {
        let file: FileConfig = read_json(path)?;
        set(&mut cfg.seed, file.seed);
        set(&mut cfg.steps, file.steps);
        set(&mut cfg.schedule.steps, file.schedule_steps);
        set(&mut cfg.schedule.beta_start, file.beta_start);
        set(&mut cfg.schedule.beta_end, file.beta_end);
        set(&mut cfg.dim, file.dim);
        set(&mut cfg.layers, file.layers);
        set(&mut cfg.guidance, file.guidance);
        set(&mut cfg.rho, file.rho);
        set(&mut cfg.self_attn.lambda, file.lambda);
        set(&mut cfg.cross_attn.lambda, file.cross_lambda.or(file.lambda));
        set(&mut cfg.self_attn.mu, file.mu);
        set(&mut cfg.self_attn.tau, file.tau);
        set(&mut cfg.cross_attn.clamp_negative, file.clamp_negative);
        set(&mut cfg.alpha, file.alpha);
        set(&mut cfg.theta_p, file.theta_p);
        set(&mut cfg.fusion_lambda, file.fusion_lambda);
        if file.overrides.is_some() {
            cfg.overrides = file.overrides;
        }
        if let Some(g) = &file.groups {
            let p = relative_to(path, g);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            cfg.groups = Some(TokenGroupSpec::from_json(&text)?);
        }
        regions = file.regions.map(|r| relative_to(path, &r));
        layout = file.layout;
    }

    let video = flags.video.clone().ok_or_else(|| missing("--video"))?;
    if flags.prompts.is_none() {
        return Err(missing("--prompts"));
    }
    let regions = match (&flags.regions, flags.layout, regions, layout) {
        (Some(p), _, _, _) => RegionSource::File(p.clone()),
        (None, Some(l), _, _) => RegionSource::Layout(l),
        (None, None, Some(p), _) => RegionSource::File(p),
        (None, None, None, l) => RegionSource::Layout(l.unwrap_or(Layout::Disk)),
    };
    Ok(ResolvedRun {
        video,
        regions,
        prompts,
        config: cfg,
    })
}

fn apply_flags(run: &mut ResolvedRun, flags: &RunFlags) {
    let cfg = &mut run.config;
    set(&mut cfg.seed, flags.seed);
    set(&mut cfg.steps, flags.steps);
    set(&mut cfg.alpha, flags.alpha);
    set(&mut cfg.self_attn.lambda, flags.lambda);
    set(&mut cfg.cross_attn.lambda, flags.lambda);
    set(&mut cfg.self_attn.mu, flags.mu);
    set(&mut cfg.self_attn.tau, flags.tau);
    set(&mut cfg.rho, flags.rho);
    set(&mut cfg.guidance, flags.guidance);
    if flags.replay.is_some() {
        if let Some(v) = &flags.video {
            run.video = v.clone();
        }
    }
    if let Some(p) = &flags.regions {
        run.regions = RegionSource::File(p.clone());
    } else if let Some(l) = flags.layout {
        run.regions = RegionSource::Layout(l);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Worker count: `FAME_DETERMINISTIC=1` forces one.
pub fn jobs(flag: Option<usize>, config: Option<&Path>) -> Result<usize> {
    if std::env::var("FAME_DETERMINISTIC").is_ok_and(|v| v == "1") {
        return Ok(1);
    }
    let from_file = match config {
        Some(p) => read_json::<FileConfig>(p)?.jobs,
        None => None,
    };
    let n = flag
        .or(from_file)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(n.max(1))
}

pub fn out_dir(flags: &RunFlags) -> Result<PathBuf> {
    let out = flags.out.clone().ok_or_else(|| missing("--out"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}
