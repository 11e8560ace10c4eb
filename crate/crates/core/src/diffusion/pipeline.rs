//! Inversion and editing.
//!
//! Inversion walks the timestep ladder upward with DDIM inversion steps. The
//! noise used for the step into `z_t` is predicted at `z_t` itself, found by
//! fixed-point iteration, so the reverse sampler later sees the same
//! prediction and the round trip closes to solver precision.
//!
//! Editing starts from the inverted `z_T` and runs the guided reverse sampler
//! with the debiased target embedding, fair attention and the inversion cache
//! blended into the conditional branch.

use serde::{Deserialize, Serialize};

use crate::cross_attention::{CrossAttnConfig, FairConcept, FairTokenGroups, TokenGroupSpec};
use crate::error::{config_err, Result};
use crate::prompt::{debias_trace, encode, DebiasConfig, DebiasTrace, EmbeddingMatrix, PromptTokens, MIN_DIM};
use crate::region::{
    build_region_indicator, build_similarity_mask, standardize_features, temporal_mean_features, RegionIndicator,
    RegionMap,
};
use crate::self_attention::SelfAttnConfig;
use crate::tensor::{derive_seed, Tensor};

use super::cache::AttentionCache;
use super::ddim::{cfg_combine, ddim_invert_between, ddim_step_between};
use super::denoiser::{AttentionControl, CacheBlend, DenoiserShape, ToyDenoiser};
use super::schedule::{NoiseSchedule, ScheduleParams};
use super::LatentVideo;

const INVERSION_TOL: f64 = 1e-13;
const INVERSION_MAX_ITERS: usize = 60;

/// Reference, target and fairness prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompts {
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(rename = "tar")]
    pub target: String,
    #[serde(rename = "fair", default)]
    pub fairness: String,
}

impl Prompts {
    pub fn new(reference: &str, target: &str, fairness: &str) -> Self {
        Self {
            reference: reference.to_string(),
            target: target.to_string(),
            fairness: fairness.to_string(),
        }
    }
}

/// Every tunable of an inversion or edit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub seed: u64,
    /// Sampler steps; at most `schedule.steps`.
    pub steps: usize,
    pub schedule: ScheduleParams,
    /// Prompt embedding and attention width.
    pub dim: usize,
    pub layers: usize,
    pub guidance: f64,
    pub rho: f64,
    pub self_attn: SelfAttnConfig,
    pub cross_attn: CrossAttnConfig,
    pub alpha: f64,
    pub theta_p: f64,
    pub fusion_lambda: f64,
    pub overrides: Option<Vec<usize>>,
    pub groups: Option<TokenGroupSpec>,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            steps: 50,
            schedule: ScheduleParams::default(),
            dim: 16,
            layers: 1,
            guidance: 0.8,
            rho: 0.5,
            self_attn: SelfAttnConfig::default(),
            cross_attn: CrossAttnConfig::default(),
            alpha: 0.5,
            theta_p: 0.35,
            fusion_lambda: 0.5,
            overrides: None,
            groups: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > self.schedule.steps {
            return Err(config_err!(
                "steps {} exceed schedule length {}",
                self.steps,
                self.schedule.steps
            ));
        }
        if self.dim < MIN_DIM {
            return Err(config_err!("dim {} below {MIN_DIM}", self.dim));
        }
        if self.layers == 0 {
            return Err(config_err!("at least one attention layer is required"));
        }
        for (name, v) in [
            ("guidance", self.guidance),
            ("rho", self.rho),
            ("alpha", self.alpha),
            ("fusion_lambda", self.fusion_lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(-1.0..=1.0).contains(&self.theta_p) {
            return Err(config_err!("theta_p = {} outside [-1, 1]", self.theta_p));
        }
        self.self_attn.validate()?;
        self.cross_attn.validate()
    }

    pub fn encoder_seed(&self) -> u64 {
        derive_seed(self.seed, "encoder")
    }

    pub fn denoiser_seed(&self) -> u64 {
        derive_seed(self.seed, "denoiser")
    }

    pub fn debias(&self) -> DebiasConfig {
        DebiasConfig {
            dim: self.dim,
            encoder_seed: self.encoder_seed(),
            theta_p: self.theta_p,
            lambda: self.fusion_lambda,
            alpha: self.alpha,
            overrides: self.overrides.clone(),
        }
    }

    /// The same run with every fairness mechanism switched off.
    pub fn without_fairness(&self) -> Self {
        Self {
            alpha: 0.0,
            overrides: Some(Vec::new()),
            self_attn: SelfAttnConfig {
                lambda: 0.0,
                mu: 0.0,
                ..self.self_attn
            },
            cross_attn: CrossAttnConfig {
                lambda: 0.0,
                ..self.cross_attn
            },
            groups: None,
            ..self.clone()
        }
    }
}

/// Ladder of sampler timesteps `0 = t_0 < t_1 < … < t_steps = T`.
pub fn timestep_ladder(steps: usize, total: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(config_err!("steps {steps} exceed schedule length {total}"));
    }
    if steps == 0 {
        return Ok(vec![0]);
    }
    Ok((0..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Concept groups from a debiasing trace: each non-EOS fairness row governs
/// the target positions fused with it, and the first concept also governs
/// the target EOS.
pub fn derive_groups(trace: &DebiasTrace) -> Result<FairTokenGroups> {
    let fair_rows = trace.fairness.eos_index();
    let concepts = (0..fair_rows)
        .map(|j| {
            let mut keys: Vec<usize> = trace
                .positions
                .iter()
                .zip(&trace.pairing)
                .filter(|(_, &p)| p == j)
                .map(|(&k, _)| k)
                .collect();
            if j == 0 {
                keys.push(trace.output.eos_index());
            }
            FairConcept {
                embedding: trace.fairness.row(j).to_vec(),
                keys,
            }
        })
        .collect();
    FairTokenGroups::new(concepts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// `trajectory[i]` is the latent at `timesteps[i]`, from `z_0` to `z_T`.
    pub trajectory: Vec<LatentVideo>,
    pub timesteps: Vec<usize>,
    /// Conditional-branch maps, keyed by ladder timestep.
    pub cache: AttentionCache,
}

impl Inversion {
    pub fn noisy(&self) -> &LatentVideo {
        self.trajectory.last().expect("trajectory holds z_0")
    }

    /// `ℓ·h·w·c` trajectory stacked as `(steps + 1) × h × w × ℓ × c`.
    pub fn trajectory_tensor(&self) -> Tensor {
        let first = self.trajectory[0].tensor().shape().to_vec();
        let mut shape = vec![self.trajectory.len()];
        shape.extend(first);
        let data = self
            .trajectory
            .iter()
            .flat_map(|z| z.tensor().data().iter().copied())
            .collect();
        Tensor::from_parts(shape, data)
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited: LatentVideo,
    /// Conditional-branch maps recorded during the edit.
    pub cache: AttentionCache,
    /// Conditioning actually fed to the network.
    pub conditioning: EmbeddingMatrix,
    pub trace: DebiasTrace,
    pub groups: FairTokenGroups,
}

/// Network, schedule and masks shared by an inversion and its edits.
#[derive(Debug, Clone)]
pub struct Session {
    video: LatentVideo,
    region_map: RegionMap,
    regions: RegionIndicator,
    features: Tensor,
    schedule: NoiseSchedule,
    denoiser: ToyDenoiser,
    timesteps: Vec<usize>,
    config: EditConfig,
}

impl Session {
    pub fn new(video: &LatentVideo, region_map: &RegionMap, config: &EditConfig) -> Result<Self> {
        config.validate()?;
        if region_map.height() != video.height() || region_map.width() != video.width() {
            return Err(crate::error::shape_err!(
                "region map {}×{} vs video {}×{}",
                region_map.height(),
                region_map.width(),
                video.height(),
                video.width()
            ));
        }
        video.tensor().ensure_finite("input video")?;
        let schedule = NoiseSchedule::linear(config.schedule)?;
        let denoiser = ToyDenoiser::new(
            DenoiserShape {
                channels: video.channels(),
                dim: config.dim,
                layers: config.layers,
                max_timestep: schedule.steps(),
            },
            config.denoiser_seed(),
        )?;
        Ok(Self {
            video: video.clone().with_timestep(0),
            region_map: region_map.clone(),
            regions: build_region_indicator(region_map),
            features: standardize_features(&temporal_mean_features(video))?,
            timesteps: timestep_ladder(config.steps, schedule.steps())?,
            schedule,
            denoiser,
            config: config.clone(),
        })
    }

    pub fn regions(&self) -> &RegionIndicator {
        &self.regions
    }

    pub fn region_map(&self) -> &RegionMap {
        &self.region_map
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn config(&self) -> &EditConfig {
        &self.config
    }

    fn unconditional(&self) -> Result<EmbeddingMatrix> {
        encode(&PromptTokens::parse(""), self.config.dim, self.config.encoder_seed())
    }

    /// Guided DDIM inversion conditioned on `reference`, with plain attention.
    pub fn invert(&self, reference: &str) -> Result<Inversion> {
        let cfg = &self.config;
        let cond = encode(&PromptTokens::parse(reference), cfg.dim, cfg.encoder_seed())?;
        let uncond = self.unconditional()?;
        let similarity = build_similarity_mask(&self.features, cfg.self_attn.tau)?;
        let empty = FairTokenGroups::empty();
        let ctrl = AttentionControl {
            regions: &self.regions,
            similarity: &similarity,
            self_attn: SelfAttnConfig::vanilla(),
            cross_attn: CrossAttnConfig::vanilla(),
            groups: &empty,
            blend: None,
        };

        let mut trajectory = vec![self.video.clone()];
        let mut cache = AttentionCache::new();
        for pair in self.timesteps.windows(2) {
            let (tp, t) = (pair[0], pair[1]);
            let (a_t, a_p) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(tp));
            let prev = trajectory.last().expect("non-empty");
            let mut guess = prev.clone().with_timestep(t);
            let mut scratch = AttentionCache::new();
            for _ in 0..INVERSION_MAX_ITERS {
                scratch = AttentionCache::new();
                let e_c = self.denoiser.predict(&guess, t, &cond, &ctrl, Some(&mut scratch))?;
                let e_u = self.denoiser.predict(&guess, t, &uncond, &ctrl, None)?;
                let eps = cfg_combine(&e_c, &e_u, cfg.guidance)?;
                let next = ddim_invert_between(prev, &eps, a_t, a_p, t)?;
                let change = next.tensor().max_abs_diff(guess.tensor())?;
                let scale = next.tensor().data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                guess = next;
                if change <= INVERSION_TOL * scale {
                    break;
                }
            }
            cache.extend(scratch)?;
            trajectory.push(guess);
        }
        Ok(Inversion {
            trajectory,
            timesteps: self.timesteps.clone(),
            cache,
        })
    }

    /// Reverse sampling from an inversion of this session. Only the edit
    /// fields of `cfg` are read: fairness terms, guidance, ρ and groups.
    pub fn edit_from(&self, inversion: &Inversion, target: &str, fairness: &str, cfg: &EditConfig) -> Result<EditOutcome> {
        cfg.validate()?;
        if inversion.timesteps != self.timesteps {
            return Err(config_err!("inversion ladder does not match this session"));
        }
        let mut debias = cfg.debias();
        debias.encoder_seed = self.config.encoder_seed();
        debias.dim = self.config.dim;
        let trace = debias_trace(target, fairness, &debias)?;
        let groups = match &cfg.groups {
            Some(spec) => spec.resolve(PromptTokens::parse(fairness).words(), &trace.fairness)?,
            None => derive_groups(&trace)?,
        };
        let cond = trace.output.clone();
        let uncond = self.unconditional()?;
        let similarity = build_similarity_mask(&self.features, cfg.self_attn.tau)?;
        let empty = FairTokenGroups::empty();
        let cond_ctrl = AttentionControl {
            regions: &self.regions,
            similarity: &similarity,
            self_attn: cfg.self_attn,
            cross_attn: cfg.cross_attn,
            groups: &groups,
            blend: Some(CacheBlend {
                cache: &inversion.cache,
                rho: cfg.rho,
            }),
        };
        let uncond_ctrl = AttentionControl {
            groups: &empty,
            blend: None,
            ..cond_ctrl
        };

        let mut z = inversion.noisy().clone();
        let mut cache = AttentionCache::new();
        for pair in self.timesteps.windows(2).rev() {
            let (tp, t) = (pair[0], pair[1]);
            let e_c = self.denoiser.predict(&z, t, &cond, &cond_ctrl, Some(&mut cache))?;
            let e_u = self.denoiser.predict(&z, t, &uncond, &uncond_ctrl, None)?;
            let eps = cfg_combine(&e_c, &e_u, cfg.guidance)?;
            z = ddim_step_between(&z, &eps, self.schedule.alpha_bar(t), self.schedule.alpha_bar(tp), tp)?;
        }
        Ok(EditOutcome {
            edited: z,
            cache,
            conditioning: cond,
            trace,
            groups,
        })
    }
}

/// Prompts, configuration and region layout for one edit.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub prompts: Prompts,
    pub config: EditConfig,
    pub regions: RegionMap,
}

pub fn invert(video: &LatentVideo, reference: &str, config: &EditConfig, regions: &RegionMap) -> Result<Inversion> {
    Session::new(video, regions, config)?.invert(reference)
}

/// Inverts with `p_ref`, then edits toward the debiased `p_tar`.
pub fn edit(video: &LatentVideo, req: &EditRequest) -> Result<(Inversion, EditOutcome)> {
    let session = Session::new(video, &req.regions, &req.config)?;
    let inversion = session.invert(&req.prompts.reference)?;
    let outcome = session.edit_from(&inversion, &req.prompts.target, &req.prompts.fairness, &req.config)?;
    Ok((inversion, outcome))
}
