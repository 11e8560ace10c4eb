//! Seeded stand-in for the noise-prediction network.
//!
//! Per frame, with `x` the `(h·w) × c` latent slice:
//!
//! ```text
//! h  = x + temb[t]
//! h += FairSelfAttn(h W_q, h W_k, h W_v) W_o        (per layer)
//! h += FairCrossAttn(h W_cq, E W_ck, E W_cv) W_co   (per layer)
//! ε  = h W_ε + b
//! ```
//!
//! Weights are drawn once from the seed and never change.

use crate::cross_attention::{cosine_region_mask, fair_cross_logits_from_raw, CrossAttnConfig, FairTokenGroups};
use crate::error::{config_err, shape_err, Result};
use crate::prompt::EmbeddingMatrix;
use crate::region::{RegionIndicator, SimilarityMask};
use crate::self_attention::{
    fair_logits_from_raw, project_rows, scaled_dot_product_attention, ProjectionWeights, SelfAttnConfig,
};
use crate::tensor::{matmul, matmul_transposed, softmax_rows, SeededRng, Tensor};

use super::cache::{AttentionCache, AttnKind, CacheKey, CacheRecord};
use super::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserShape {
    pub channels: usize,
    /// Attention width, equal to the prompt embedding dim.
    pub dim: usize,
    pub layers: usize,
    /// Largest timestep with an embedding row.
    pub max_timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    attn: ProjectionWeights,
    attn_out: Tensor,
    cross_q: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
    cross_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    shape: DenoiserShape,
    seed: u64,
    layers: Vec<Layer>,
    temb: Tensor,
    eps_w: Tensor,
    eps_b: Vec<f64>,
}

/// Inversion-time records mixed into the current raw logits.
#[derive(Debug, Clone, Copy)]
pub struct CacheBlend<'a> {
    pub cache: &'a AttentionCache,
    pub rho: f64,
}

/// Everything that shapes attention for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct AttentionControl<'a> {
    pub regions: &'a RegionIndicator,
    pub similarity: &'a SimilarityMask,
    pub self_attn: SelfAttnConfig,
    pub cross_attn: CrossAttnConfig,
    pub groups: &'a FairTokenGroups,
    pub blend: Option<CacheBlend<'a>>,
}

/// `ρ·cached + (1 − ρ)·current`.
pub fn blend_raw(cached: &Tensor, current: &Tensor, rho: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(config_err!("cache blend weight {rho} outside [0, 1]"));
    }
    if cached.shape() != current.shape() {
        return Err(shape_err!(
            "cached logits {:?} vs current {:?}",
            cached.shape(),
            current.shape()
        ));
    }
    if rho == 1.0 {
        return Ok(cached.clone());
    }
    if rho == 0.0 {
        return Ok(current.clone());
    }
    cached.zip_with(current, |c, x| rho * c + (1.0 - rho) * x)
}

fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_parts(vec![rows, cols], rng.normal_vec(rows * cols)).scale(scale)
}

fn timestep_table(max_t: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity((max_t + 1) * c);
    for t in 0..=max_t {
        for i in 0..c {
            let freq = 1.0 / 100f64.powf((i / 2) as f64 * 2.0 / c as f64);
            let phase = t as f64 * freq;
            data.push(0.1 * if i % 2 == 0 { phase.sin() } else { phase.cos() });
        }
    }
    Tensor::from_parts(vec![max_t + 1, c], data)
}

impl ToyDenoiser {
    pub fn new(shape: DenoiserShape, seed: u64) -> Result<Self> {
        if shape.channels == 0 || shape.dim == 0 || shape.layers == 0 {
            return Err(config_err!("denoiser dims must be non-zero: {shape:?}"));
        }
        let (c, d) = (shape.channels, shape.dim);
        let mut rng = SeededRng::derive(seed, "denoiser");
        let in_c = 1.0 / (c as f64).sqrt();
        let in_d = 1.0 / (d as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|l| {
                let attn = ProjectionWeights::seeded(c, d, crate::tensor::derive_seed(seed, &format!("layer{l}:qkv")));
                Layer {
                    attn,
                    attn_out: gaussian(&mut rng, d, c, in_d),
                    cross_q: gaussian(&mut rng, c, d, in_c),
                    cross_k: gaussian(&mut rng, d, d, in_d),
                    cross_v: gaussian(&mut rng, d, d, in_d),
                    cross_out: gaussian(&mut rng, d, c, in_d),
                }
            })
            .collect();
        let eps_w = gaussian(&mut rng, c, c, in_c);
        let eps_b = rng.normal_vec(c).into_iter().map(|v| 0.1 * v).collect();
        Ok(Self {
            shape,
            seed,
            layers,
            temb: timestep_table(shape.max_timestep, c),
            eps_w,
            eps_b,
        })
    }

    pub fn shape(&self) -> DenoiserShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, z: &LatentVideo, t: usize, emb: &EmbeddingMatrix) -> Result<()> {
        if z.channels() != self.shape.channels {
            return Err(shape_err!(
                "latent has {} channels, denoiser expects {}",
                z.channels(),
                self.shape.channels
            ));
        }
        if emb.dim() != self.shape.dim {
            return Err(shape_err!(
                "prompt dim {} vs denoiser dim {}",
                emb.dim(),
                self.shape.dim
            ));
        }
        if t > self.shape.max_timestep {
            return Err(config_err!("timestep {t} beyond {}", self.shape.max_timestep));
        }
        Ok(())
    }

    fn embed(&self, z: &LatentVideo, t: usize, frame: usize) -> Tensor {
        let temb = self.temb.row(t);
        let x = z.frame_matrix(frame);
        let c = self.shape.channels;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + temb[i % c])
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn readout(&self, h: &Tensor) -> Result<Tensor> {
        let out = matmul(h, &self.eps_w)?;
        let c = self.shape.channels;
        let data = out
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.eps_b[i % c])
            .collect();
        Ok(Tensor::from_parts(out.shape().to_vec(), data))
    }

    /// Noise prediction with fair attention. When `record` is given, every
    /// self and cross map is stored under `(t, layer, frame, kind)`.
    pub fn predict(
        &self,
        z: &LatentVideo,
        t: usize,
        emb: &EmbeddingMatrix,
        ctrl: &AttentionControl<'_>,
        mut record: Option<&mut AttentionCache>,
    ) -> Result<Tensor> {
        self.check(z, t, emb)?;
        ctrl.self_attn.validate()?;
        ctrl.cross_attn.validate()?;
        if ctrl.regions.size() != z.cells() {
            return Err(shape_err!(
                "region indicator covers {} cells, latent has {}",
                ctrl.regions.size(),
                z.cells()
            ));
        }
        let d = self.shape.dim;
        let e = emb.values();
        let mut frames = Vec::with_capacity(z.frames());
        for f in 0..z.frames() {
            let mut h = self.embed(z, t, f);
            for (li, layer) in self.layers.iter().enumerate() {
                let (q, k, v) = project_rows(&h, &layer.attn)?;
                let key = CacheKey::new(t, li, f, AttnKind::SelfAttn);
                let mut raw = matmul_transposed(&q, &k)?;
                if let Some(b) = ctrl.blend {
                    raw = blend_raw(&b.cache.require(&key)?.raw, &raw, b.rho)?;
                }
                let logits = fair_logits_from_raw(&raw, ctrl.regions, ctrl.similarity, &ctrl.self_attn, d)?;
                let map = softmax_rows(&logits)?;
                h = h.add(&matmul(&matmul(&map, &v)?, &layer.attn_out)?)?;
                if let Some(c) = record.as_deref_mut() {
                    c.insert(key, CacheRecord { raw, map })?;
                }

                let qc = matmul(&h, &layer.cross_q)?;
                let kc = matmul(e, &layer.cross_k)?;
                let vc = matmul(e, &layer.cross_v)?;
                let key = CacheKey::new(t, li, f, AttnKind::Cross);
                let mut raw = matmul_transposed(&qc, &kc)?;
                if let Some(b) = ctrl.blend {
                    let cached = &b.cache.require(&key)?.raw;
                    // Token counts differ when the edit prompt changes length;
                    // only matching layouts can be mixed token for token.
                    if cached.shape() == raw.shape() {
                        raw = blend_raw(cached, &raw, b.rho)?;
                    }
                }
                let mask = cosine_region_mask(&qc, ctrl.groups, emb.rows(), ctrl.cross_attn.clamp_negative)?;
                let logits = fair_cross_logits_from_raw(&raw, &mask, &ctrl.cross_attn, d)?;
                let map = softmax_rows(&logits)?;
                h = h.add(&matmul(&matmul(&map, &vc)?, &layer.cross_out)?)?;
                if let Some(c) = record.as_deref_mut() {
                    c.insert(key, CacheRecord { raw, map })?;
                }
            }
            frames.push(self.readout(&h)?);
        }
        let eps = LatentVideo::from_frames(z.height(), z.width(), &frames, t)?.into_tensor();
        eps.ensure_finite("predicted noise")?;
        Ok(eps)
    }

    /// The same network with plain scaled dot-product attention everywhere.
    pub fn predict_plain(&self, z: &LatentVideo, t: usize, emb: &EmbeddingMatrix) -> Result<Tensor> {
        self.check(z, t, emb)?;
        let e = emb.values();
        let mut frames = Vec::with_capacity(z.frames());
        for f in 0..z.frames() {
            let mut h = self.embed(z, t, f);
            for layer in &self.layers {
                let (q, k, v) = project_rows(&h, &layer.attn)?;
                h = h.add(&matmul(&scaled_dot_product_attention(&q, &k, &v)?, &layer.attn_out)?)?;
                let qc = matmul(&h, &layer.cross_q)?;
                let kc = matmul(e, &layer.cross_k)?;
                let vc = matmul(e, &layer.cross_v)?;
                h = h.add(&matmul(&scaled_dot_product_attention(&qc, &kc, &vc)?, &layer.cross_out)?)?;
            }
            frames.push(self.readout(&h)?);
        }
        Ok(LatentVideo::from_frames(z.height(), z.width(), &frames, t)?.into_tensor())
    }
}
