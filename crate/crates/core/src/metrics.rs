//! Evaluation: bias probing and correction counting over seeds, frame and
//! prompt proxies, attention locality and the prompt responsiveness test.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{decode_frames, AttentionCache, AttnKind, EditConfig, EditRequest, LatentVideo, Session};
use crate::error::{config_err, shape_err, Result};
use crate::ften;
use crate::prompt::EmbeddingMatrix;
use crate::region::{RegionIndicator, RegionMap};
use crate::tensor::{cosine, dot, l2_norm, SeededRng, Tensor, NORM_EPS};

/// Default number of seeds per prompt.
pub const DEFAULT_SEEDS: usize = 5;

const ALIGN_SEED: u64 = 0xA11C_0516;

/// Unit direction in latent channel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProbe {
    pub label: String,
    direction: Vec<f64>,
}

impl BiasProbe {
    pub fn new(label: &str, direction: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&direction);
        if !n.is_finite() || n < NORM_EPS {
            return Err(config_err!("probe direction must be finite and non-zero"));
        }
        Ok(Self {
            label: label.to_string(),
            direction: direction.into_iter().map(|v| v / n).collect(),
        })
    }

    /// Fixed direction per `(label, channels)`.
    pub fn seeded(label: &str, channels: usize) -> Result<Self> {
        let mut rng = SeededRng::derive(0xB1A5, &format!("probe:{label}:{channels}"));
        Self::new(label, rng.unit_vec(channels))
    }

    pub fn load(label: &str, path: &Path) -> Result<Self> {
        let t = ften::read(path)?;
        if t.rank() != 1 {
            return Err(shape_err!("probe file must hold a vector, got {:?}", t.shape()));
        }
        Self::new(label, t.into_data())
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }
}

/// Mean projection of every cell onto the probe.
pub fn bias_score(z: &LatentVideo, probe: &BiasProbe) -> Result<f64> {
    let c = z.channels();
    if probe.direction.len() != c {
        return Err(shape_err!("probe dim {} vs {c} channels", probe.direction.len()));
    }
    let chunks = z.tensor().data().chunks_exact(c);
    let n = chunks.len() as f64;
    Ok(chunks.map(|cell| dot(cell, &probe.direction)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub bias_baseline: f64,
    pub bias_edited: f64,
    pub corrected: bool,
}

impl TrialRecord {
    /// Ties are not corrections.
    pub fn new(seed: u64, bias_baseline: f64, bias_edited: f64) -> Self {
        Self {
            seed,
            bias_baseline,
            bias_edited,
            corrected: bias_edited.abs() < bias_baseline.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub profession: String,
    pub count: usize,
    pub ratio: f64,
    pub trials: Vec<TrialRecord>,
}

impl FairnessReport {
    pub fn from_trials(profession: &str, trials: Vec<TrialRecord>) -> Result<Self> {
        if trials.is_empty() {
            return Err(config_err!("a fairness report needs at least one trial"));
        }
        let count = trials.iter().filter(|t| t.corrected).count();
        Ok(Self {
            profession: profession.to_string(),
            count,
            ratio: count as f64 / trials.len() as f64,
            trials,
        })
    }
}

/// Runs `trial(seed)` for every seed, in order, and aggregates. The closure
/// returns `(baseline bias, edited bias)`.
pub fn run_trials_with(
    profession: &str,
    seeds: &[u64],
    mut trial: impl FnMut(u64) -> Result<(f64, f64)>,
) -> Result<FairnessReport> {
    if seeds.is_empty() {
        return Err(config_err!("no seeds given"));
    }
    let trials = seeds
        .iter()
        .map(|&s| trial(s).map(|(b, e)| TrialRecord::new(s, b, e)))
        .collect::<Result<Vec<_>>>()?;
    FairnessReport::from_trials(profession, trials)
}

/// Bias of the unmodulated edit and of the full edit for one seed.
pub fn trial_biases(video: &LatentVideo, req: &EditRequest, probe: &BiasProbe, seed: u64) -> Result<(f64, f64)> {
    let cfg = EditConfig {
        seed,
        ..req.config.clone()
    };
    let session = Session::new(video, &req.regions, &cfg)?;
    let inv = session.invert(&req.prompts.reference)?;
    let p = &req.prompts;
    let base = session.edit_from(&inv, &p.target, &p.fairness, &cfg.without_fairness())?;
    let full = session.edit_from(&inv, &p.target, &p.fairness, &cfg)?;
    Ok((bias_score(&base.edited, probe)?, bias_score(&full.edited, probe)?))
}

pub fn run_trials(
    profession: &str,
    video: &LatentVideo,
    req: &EditRequest,
    probe: &BiasProbe,
    seeds: &[u64],
) -> Result<FairnessReport> {
    run_trials_with(profession, seeds, |s| trial_biases(video, req, probe, s))
}

fn frames_of(frames: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [h, w, l, c] = *frames.shape() else {
        return Err(shape_err!("expected h×w×ℓ×c frames, got {:?}", frames.shape()));
    };
    let mut out = vec![Vec::with_capacity(h * w * c); l];
    for (i, chunk) in frames.data().chunks_exact(c).enumerate() {
        out[i % l].extend_from_slice(chunk);
    }
    Ok(out)
}

/// Mean cosine between consecutive flattened frames.
pub fn frame_consistency(frames: &Tensor) -> Result<f64> {
    let f = frames_of(frames)?;
    if f.len() < 2 {
        return Err(shape_err!("frame consistency needs at least 2 frames"));
    }
    let sims = f
        .windows(2)
        .map(|p| cosine(&p[0], &p[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Fixed `len × dim` projection from a flattened frame to prompt space.
pub fn alignment_projection(len: usize, dim: usize) -> Tensor {
    let mut rng = SeededRng::derive(ALIGN_SEED, &format!("align:{len}:{dim}"));
    Tensor::new(vec![len, dim], rng.normal_vec(len * dim))
        .expect("finite normals")
        .scale(1.0 / (len as f64).sqrt())
}

pub fn project_frame(frame: &[f64], dim: usize) -> Vec<f64> {
    let p = alignment_projection(frame.len(), dim);
    (0..dim)
        .map(|j| frame.iter().enumerate().map(|(i, v)| v * p.data()[i * dim + j]).sum())
        .collect()
}

/// Mean cosine between each projected frame and the prompt EOS row.
pub fn prompt_alignment(frames: &Tensor, prompt: &EmbeddingMatrix) -> Result<f64> {
    let f = frames_of(frames)?;
    let d = prompt.dim();
    let p = alignment_projection(f[0].len(), d);
    let mut total = 0.0;
    for frame in &f {
        let proj: Vec<f64> = (0..d)
            .map(|j| frame.iter().enumerate().map(|(i, v)| v * p.data()[i * d + j]).sum())
            .collect();
        total += cosine(&proj, prompt.eos())?;
    }
    Ok(total / f.len() as f64)
}

/// Share of each self-attention map's mass that stays within regions, in
/// cache order.
pub fn intra_region_mass(cache: &AttentionCache, regions: &RegionIndicator) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (key, rec) in cache.iter().filter(|(k, _)| k.kind == AttnKind::SelfAttn) {
        if rec.map.shape() != regions.matrix().shape() {
            return Err(shape_err!("map {key} does not match the region indicator"));
        }
        let total: f64 = rec.map.data().iter().sum();
        let inside: f64 = rec
            .map
            .data()
            .iter()
            .zip(regions.matrix().data())
            .map(|(a, r)| a * r)
            .sum();
        out.push(if total > 0.0 { (inside / total).clamp(0.0, 1.0) } else { 0.0 });
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponsivenessScores {
    pub alignment: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponsivenessReport {
    pub explicit: ResponsivenessScores,
    pub neutral: ResponsivenessScores,
    pub fame: ResponsivenessScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponsivenessDeltas {
    pub explicit_minus_neutral: ResponsivenessScores,
    pub fame_minus_neutral: ResponsivenessScores,
    pub fame_minus_explicit: ResponsivenessScores,
}

fn diff(a: ResponsivenessScores, b: ResponsivenessScores) -> ResponsivenessScores {
    ResponsivenessScores {
        alignment: a.alignment - b.alignment,
        consistency: a.consistency - b.consistency,
    }
}

impl ResponsivenessReport {
    pub fn deltas(&self) -> ResponsivenessDeltas {
        ResponsivenessDeltas {
            explicit_minus_neutral: diff(self.explicit, self.neutral),
            fame_minus_neutral: diff(self.fame, self.neutral),
            fame_minus_explicit: diff(self.fame, self.explicit),
        }
    }
}

/// Three edits from one inversion: the neutral and the explicit target with
/// fairness off, and the neutral target with the full configuration.
pub fn prompt_responsiveness_test(
    video: &LatentVideo,
    regions: &RegionMap,
    reference: &str,
    explicit: &str,
    neutral: &str,
    fairness: &str,
    config: &EditConfig,
) -> Result<ResponsivenessReport> {
    let session = Session::new(video, regions, config)?;
    let inv = session.invert(reference)?;
    let plain = config.without_fairness();
    let score = |target: &str, cfg: &EditConfig| -> Result<ResponsivenessScores> {
        let out = session.edit_from(&inv, target, fairness, cfg)?;
        let frames = decode_frames(&out.edited)?;
        Ok(ResponsivenessScores {
            alignment: prompt_alignment(&frames, &out.conditioning)?,
            consistency: frame_consistency(&frames)?,
        })
    };
    Ok(ResponsivenessReport {
        neutral: score(neutral, &plain)?,
        explicit: score(explicit, &plain)?,
        fame: score(neutral, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{CacheKey, CacheRecord};
    use crate::region::build_region_indicator;

    #[test]
    fn bias_score_examples() {
        let probe = BiasProbe::new("gender", vec![0.0, 3.0, 0.0, 4.0]).unwrap();
        assert!((l2_norm(probe.direction()) - 1.0).abs() < 1e-12);
        assert_eq!(bias_score(&LatentVideo::zeros(2, 2, 2, 4), &probe).unwrap(), 0.0);
        let cell = probe.direction().to_vec();
        let data: Vec<f64> = (0..8).flat_map(|_| cell.clone()).collect();
        let z = LatentVideo::new(Tensor::new(vec![2, 2, 2, 4], data).unwrap(), 0).unwrap();
        assert!((bias_score(&z, &probe).unwrap() - 1.0).abs() < 1e-12);
        let ortho = LatentVideo::new(Tensor::filled(&[2, 2, 2, 4], 0.0).add(&Tensor::new(vec![2, 2, 2, 4], (0..32).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect()).unwrap()).unwrap(), 0).unwrap();
        assert_eq!(bias_score(&ortho, &probe).unwrap(), 0.0);
        assert!(bias_score(&LatentVideo::zeros(1, 1, 1, 3), &probe).is_err());
        assert!(BiasProbe::new("x", vec![0.0; 3]).is_err());
        let s = BiasProbe::seeded("gender", 16).unwrap();
        assert_eq!(s, BiasProbe::seeded("gender", 16).unwrap());
        assert!((l2_norm(s.direction()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trial_arithmetic() {
        let r = run_trials_with("pilot", &(0..20).collect::<Vec<_>>(), |s| {
            Ok(if s % 2 == 0 { (1.0, 0.5) } else { (1.0, 1.0) })
        })
        .unwrap();
        assert_eq!(r.count, 10);
        assert_eq!(r.ratio, 0.5);
        assert!(!r.trials[1].corrected);
        let none = run_trials_with("ceo", &[1, 2], |_| Ok((0.1, -0.2))).unwrap();
        assert_eq!((none.count, none.ratio), (0, 0.0));
        assert!(run_trials_with("ceo", &[], |_| Ok((0.0, 0.0))).is_err());
        assert!(TrialRecord::new(0, -0.3, 0.2).corrected);
    }

    fn frames(per_frame: &[Vec<f64>]) -> Tensor {
        // One cell, `c` channels per frame.
        let c = per_frame[0].len();
        Tensor::new(vec![1, 1, per_frame.len(), c], per_frame.concat()).unwrap()
    }

    #[test]
    fn consistency_examples() {
        let a = vec![0.3, -0.2, 0.9];
        assert!((frame_consistency(&frames(&[a.clone(), a.clone(), a.clone()])).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((frame_consistency(&frames(&[a.clone(), neg])).unwrap() + 1.0).abs() < 1e-12);
        assert!(frame_consistency(&frames(&[a])).is_err());
    }

    #[test]
    fn alignment_examples() {
        let f = vec![0.2, 0.7, 0.1, 0.4, 0.9, 0.3];
        let proj = project_frame(&f, 8);
        let mut rows = vec![vec![0.0; 8]];
        rows.push(proj.clone());
        let emb = EmbeddingMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let t = Tensor::new(vec![1, 2, 1, 3], f.clone()).unwrap();
        assert!((prompt_alignment(&t, &emb).unwrap() - 1.0).abs() < 1e-12);

        // Orthogonal EOS: remove the projection direction from a basis vector.
        let n = l2_norm(&proj);
        let unit: Vec<f64> = proj.iter().map(|v| v / n).collect();
        let mut e = vec![0.0; 8];
        e[0] = 1.0;
        let along = dot(&e, &unit);
        let ortho: Vec<f64> = e.iter().zip(&unit).map(|(a, b)| a - along * b).collect();
        let emb = EmbeddingMatrix::new(Tensor::from_rows(&[vec![0.0; 8], ortho]).unwrap()).unwrap();
        assert!(prompt_alignment(&t, &emb).unwrap().abs() < 1e-12);
    }

    fn cache_with(map: Tensor) -> AttentionCache {
        let mut c = AttentionCache::new();
        c.insert(
            CacheKey::new(1, 0, 0, AttnKind::SelfAttn),
            CacheRecord {
                raw: Tensor::zeros(map.shape()),
                map,
            },
        )
        .unwrap();
        c
    }

    #[test]
    fn intra_region_examples() {
        let uniform = Tensor::filled(&[4, 4], 0.25);
        assert_eq!(intra_region_mass(&cache_with(uniform.clone()), &RegionIndicator::all_ones(4)).unwrap(), vec![1.0]);
        let singletons = build_region_indicator(&RegionMap::new(2, 2, vec![0, 1, 2, 3]).unwrap());
        assert_eq!(intra_region_mass(&cache_with(Tensor::identity(4)), &singletons).unwrap(), vec![1.0]);
        let halves = build_region_indicator(&RegionMap::new(2, 2, vec![0, 0, 1, 1]).unwrap());
        let m = intra_region_mass(&cache_with(uniform), &halves).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deltas_are_differences() {
        let s = |a, c| ResponsivenessScores { alignment: a, consistency: c };
        let r = ResponsivenessReport {
            explicit: s(0.5, 0.9),
            neutral: s(0.25, 0.95),
            fame: s(0.75, 0.97),
        };
        let d = r.deltas();
        assert_eq!(d.explicit_minus_neutral.alignment, 0.25);
        assert_eq!(d.fame_minus_explicit.alignment, 0.25);
        let json = serde_json::to_value(r).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 3);
        for k in ["explicit", "neutral", "fame"] {
            let inner = json[k].as_object().unwrap();
            assert_eq!(inner.len(), 2);
            assert!(inner.contains_key("alignment") && inner.contains_key("consistency"));
        }
    }
}
