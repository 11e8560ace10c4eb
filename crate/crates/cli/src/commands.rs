use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fame_core::cross_attention::CrossAttnConfig;
use fame_core::diffusion::fixture::{fixture_scene, FIXTURE_DIMS, FIXTURE_FAIR, FIXTURE_REF, FIXTURE_TAR};
use fame_core::diffusion::{decode_frames, EditConfig, EditRequest, Inversion, Session};
use fame_core::metrics::{
    bias_score, frame_consistency, intra_region_mass, mean, prompt_alignment, run_trials, BiasProbe,
    FairnessReport, DEFAULT_SEEDS,
};
use fame_core::region::Layout;
use fame_core::self_attention::SelfAttnConfig;
use fame_core::{ften, FameError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{jobs, out_dir, read_json, resolve, ResolvedRun, RunFlags};
use crate::manifest::RunManifest;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    FameError::Config(msg.into()).into()
}

fn session_for(run: &ResolvedRun) -> Result<Session> {
    let video = run.load_video()?;
    let regions = run.load_regions(&video)?;
    Ok(Session::new(&video, &regions, &run.config)?)
}

/// Settings under which an edit reproduces the inverted clip.
fn reconstruction_config(cfg: &EditConfig) -> EditConfig {
    EditConfig {
        rho: 1.0,
        ..cfg.without_fairness()
    }
}

/// Writes `trajectory.ften`, `reconstruction.ften`, `cache/`, `manifest.json`.
pub fn cmd_invert(flags: &RunFlags) -> Result<PathBuf> {
    let run = resolve(flags)?;
    let out = out_dir(flags)?;
    let session = session_for(&run)?;
    let inv = session.invert(&run.prompts.reference)?;
    let recon = session.edit_from(&inv, &run.prompts.reference, "", &reconstruction_config(&run.config))?;

    ften::write(out.join("trajectory.ften"), &inv.trajectory_tensor())?;
    ften::write(out.join("reconstruction.ften"), recon.edited.tensor())?;
    write_cache(&inv.cache, &out.join("cache"))?;

    let mut manifest = RunManifest::new("invert", &run)?;
    manifest.record_outputs(&out, &["trajectory.ften", "reconstruction.ften", "cache/"])?;
    manifest.write(&out)?;
    Ok(out)
}

fn write_cache(cache: &fame_core::diffusion::AttentionCache, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir)?;
    if !cache.is_empty() {
        cache.write_dir(dir)?;
    }
    Ok(())
}

/// Writes `edited.ften`, `frames.ften`, `conditioning.ften`, `cache/`,
/// `edit_cache/`, `manifest.json`.
pub fn cmd_edit(flags: &RunFlags) -> Result<PathBuf> {
    let run = resolve(flags)?;
    let out = out_dir(flags)?;
    let session = session_for(&run)?;
    let inv = session.invert(&run.prompts.reference)?;
    let p = &run.prompts;
    let outcome = session.edit_from(&inv, &p.target, &p.fairness, &run.config)?;

    ften::write(out.join("edited.ften"), outcome.edited.tensor())?;
    ften::write(out.join("frames.ften"), &decode_frames(&outcome.edited)?)?;
    ften::write(out.join("conditioning.ften"), outcome.conditioning.values())?;
    write_cache(&inv.cache, &out.join("cache"))?;
    write_cache(&outcome.cache, &out.join("edit_cache"))?;

    let mut manifest = RunManifest::new("edit", &run)?;
    manifest.record_outputs(
        &out,
        &["edited.ften", "frames.ften", "conditioning.ften", "cache/", "edit_cache/"],
    )?;
    manifest.write(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profession {
    pub name: String,
    /// Target prompt for this profession; the reference and fairness
    /// prompts come from the run.
    pub target: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(default)]
    pub professions: Vec<Profession>,
    pub seeds: Option<Vec<u64>>,
    pub probe_label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<FairnessReport>,
}

fn default_seeds(base: u64) -> Vec<u64> {
    (0..DEFAULT_SEEDS as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Correction count and ratio per profession; writes `report.json` and
/// `report.csv`.
pub fn cmd_eval(flags: &RunFlags, protocol: Option<&Path>, probe: Option<&Path>) -> Result<PathBuf> {
    let run = resolve(flags)?;
    let protocol: Protocol = match protocol {
        Some(p) => read_json(p)?,
        None => Protocol::default(),
    };
    let seeds = protocol.seeds.clone().unwrap_or_else(|| default_seeds(run.config.seed));
    if seeds.is_empty() {
        return Err(config_error("protocol has an empty trial list"));
    }
    let video = run.load_video()?;
    let regions = run.load_regions(&video)?;
    let label = protocol.probe_label.clone().unwrap_or_else(|| "gender".to_string());
    let probe = match probe {
        Some(p) => BiasProbe::load(&label, p)?,
        None => BiasProbe::seeded(&label, video.channels())?,
    };
    let professions = if protocol.professions.is_empty() {
        vec![Profession {
            name: run.prompts.target.clone(),
            target: run.prompts.target.clone(),
        }]
    } else {
        protocol.professions.clone()
    };
    let out = out_dir(flags)?;
    let n_jobs = jobs(flags.jobs, flags.config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n_jobs).build()?;
    let reports = pool.install(|| {
        professions
            .par_iter()
            .map(|prof| {
                let mut prompts = run.prompts.clone();
                prompts.target = prof.target.clone();
                let req = EditRequest {
                    prompts,
                    config: run.config.clone(),
                    regions: regions.clone(),
                };
                run_trials(&prof.name, &video, &req, &probe, &seeds)
            })
            .collect::<fame_core::Result<Vec<_>>>()
    })?;

    let report = EvalReport {
        probe: label,
        seeds,
        reports,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut csv = csv::Writer::from_path(out.join("report.csv"))?;
    csv.write_record(["profession", "count", "ratio"])?;
    for r in &report.reports {
        csv.write_record([r.profession.clone(), r.count.to_string(), r.ratio.to_string()])?;
    }
    csv.flush()?;
    Ok(out)
}

pub const MODULE_ROWS: [&str; 3] = ["+P", "+P +S", "+P +S +C"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "all_modules")]
    pub modules: Vec<String>,
    pub alpha: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
}

fn all_modules() -> Vec<String> {
    MODULE_ROWS.iter().map(|s| s.to_string()).collect()
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            modules: all_modules(),
            alpha: None,
            lambda: None,
            mu: None,
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    pub frame_consistency: f64,
    pub prompt_alignment: f64,
    pub intra_region_mass: f64,
    pub correction_count: usize,
    pub correction_ratio: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Config for one cumulative module row: prompt encoding only, then
/// self-attention modulation, then cross-attention reweighting.
pub fn module_config(base: &EditConfig, label: &str, alpha: f64, lambda: f64, mu: f64) -> Result<EditConfig> {
    let (self_on, cross_on) = match label {
        "+P" => (false, false),
        "+P +S" => (true, false),
        "+P +S +C" => (true, true),
        other => return Err(config_error(format!("unknown ablation row {other:?}"))),
    };
    Ok(EditConfig {
        alpha,
        self_attn: SelfAttnConfig {
            lambda: if self_on { lambda } else { 0.0 },
            mu: if self_on { mu } else { 0.0 },
            ..base.self_attn
        },
        cross_attn: CrossAttnConfig {
            lambda: if cross_on { lambda } else { 0.0 },
            ..base.cross_attn
        },
        ..base.clone()
    })
}

struct SeedRun {
    session: Session,
    inversion: Inversion,
    baseline_bias: f64,
}

/// One row per grid point in `modules × α × λ × μ` order; writes
/// `points/<i>/row.json` and the consolidated `ablation.json`.
pub fn cmd_ablate(flags: &RunFlags, grid: Option<&Path>) -> Result<PathBuf> {
    let run = resolve(flags)?;
    let grid: GridSpec = match grid {
        Some(p) => read_json(p)?,
        None => GridSpec::default(),
    };
    if grid.modules.is_empty() {
        return Err(config_error("ablation grid has no module rows"));
    }
    let cfg = &run.config;
    let alphas = grid.alpha.clone().unwrap_or_else(|| vec![cfg.alpha]);
    let lambdas = grid.lambda.clone().unwrap_or_else(|| vec![cfg.self_attn.lambda]);
    let mus = grid.mu.clone().unwrap_or_else(|| vec![cfg.self_attn.mu]);
    let seeds = grid.seeds.clone().unwrap_or_else(|| default_seeds(cfg.seed));
    if seeds.is_empty() || alphas.is_empty() || lambdas.is_empty() || mus.is_empty() {
        return Err(config_error("ablation grid has an empty axis"));
    }
    let mut points = Vec::new();
    for m in &grid.modules {
        for &a in &alphas {
            for &l in &lambdas {
                for &u in &mus {
                    points.push((m.clone(), a, l, u, module_config(cfg, m, a, l, u)?));
                }
            }
        }
    }
    for p in &points {
        p.4.validate()?;
    }

    let out = out_dir(flags)?;
    let video = run.load_video()?;
    let regions = run.load_regions(&video)?;
    let probe = BiasProbe::seeded("gender", video.channels())?;
    let p = &run.prompts;
    let n_jobs = jobs(flags.jobs, flags.config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n_jobs).build()?;

    let seed_runs: Vec<SeedRun> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| -> fame_core::Result<SeedRun> {
                let c = EditConfig { seed: s, ..cfg.clone() };
                let session = Session::new(&video, &regions, &c)?;
                let inversion = session.invert(&p.reference)?;
                let base = session.edit_from(&inversion, &p.target, &p.fairness, &c.without_fairness())?;
                Ok(SeedRun {
                    baseline_bias: bias_score(&base.edited, &probe)?,
                    session,
                    inversion,
                })
            })
            .collect::<fame_core::Result<Vec<_>>>()
    })?;

    let rows: Vec<AblationRow> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, (label, a, l, u, point))| -> Result<AblationRow> {
                let (mut fc, mut pa, mut irm, mut count) = (Vec::new(), Vec::new(), Vec::new(), 0);
                for sr in &seed_runs {
                    let c = EditConfig {
                        seed: sr.session.config().seed,
                        ..point.clone()
                    };
                    let o = sr.session.edit_from(&sr.inversion, &p.target, &p.fairness, &c)?;
                    let frames = decode_frames(&o.edited)?;
                    fc.push(frame_consistency(&frames)?);
                    pa.push(prompt_alignment(&frames, &o.conditioning)?);
                    irm.push(mean(&intra_region_mass(&o.cache, sr.session.regions())?));
                    if bias_score(&o.edited, &probe)?.abs() < sr.baseline_bias.abs() {
                        count += 1;
                    }
                }
                let row = AblationRow {
                    label: label.clone(),
                    alpha: *a,
                    lambda: *l,
                    mu: *u,
                    frame_consistency: mean(&fc),
                    prompt_alignment: mean(&pa),
                    intra_region_mass: mean(&irm),
                    correction_count: count,
                    correction_ratio: count as f64 / seed_runs.len() as f64,
                    trials: seed_runs.len(),
                };
                let dir = out.join("points").join(i.to_string());
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("row.json"), serde_json::to_string_pretty(&row)? + "\n")?;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let table = AblationTable { seeds, rows };
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(out)
}

/// Writes the bundled synthetic scene: `video.ften`, `regions.ften` (+ JSON
/// sidecar) and `prompts.json`.
pub fn cmd_fixture(out: &Path, dims: Option<&[usize]>, layout: Layout, seed: u64) -> Result<PathBuf> {
    let dims: [usize; 4] = match dims {
        None => FIXTURE_DIMS,
        Some(d) => d
            .try_into()
            .map_err(|_| config_error(format!("--dims takes h,w,frames,channels; got {d:?}")))?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (video, map) = fixture_scene(dims, layout, seed)?;
    ften::write(out.join("video.ften"), video.tensor())?;
    map.save(&out.join("regions.ften"))?;
    let prompts = serde_json::json!({
        "ref": FIXTURE_REF,
        "tar": FIXTURE_TAR,
        "fair": FIXTURE_FAIR,
    });
    fs::write(out.join("prompts.json"), serde_json::to_string_pretty(&prompts)? + "\n")?;
    Ok(out.to_path_buf())
}
