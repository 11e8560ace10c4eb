//! Fairness-modulated self-attention over the spatial cells of each frame.
//!
//! Logits are
//!
//! ```text
//! f(Q, K) = (Q Kᵀ + λ·M_fair + μ·S) / √d
//! M_fair  = R ⊙ M_pos − (1 − R) ⊙ M_neg
//! M_pos   = max(Q Kᵀ) − Q Kᵀ,   M_neg = Q Kᵀ − min(Q Kᵀ)
//! ```
//!
//! with `max`/`min` taken over the whole raw matrix. The attention matrix is
//! `(h·w) × (h·w)` per frame, frames form a batch axis, and the region
//! indicator `R` and similarity mask `S` are shared by all frames.

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentVideo;
use crate::error::{config_err, shape_err, Result};
use crate::region::{RegionIndicator, SimilarityMask};
use crate::tensor::{matmul, matmul_transposed, softmax_rows, SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub seed: u64,
}

impl ProjectionWeights {
    /// Gaussian `c × d` projections scaled by `1/√c`.
    pub fn seeded(c: usize, d: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let scale = 1.0 / (c as f64).sqrt();
        let mut draw = || Tensor::from_parts(vec![c, d], rng.normal_vec(c * d)).scale(scale);
        let query = draw();
        let key = draw();
        let value = draw();
        Self {
            query,
            key,
            value,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.query.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnConfig {
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
}

impl Default for SelfAttnConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            mu: 0.2,
            tau: 1.0,
        }
    }
}

impl SelfAttnConfig {
    /// No modulation: plain scaled dot-product attention.
    pub fn vanilla() -> Self {
        Self {
            lambda: 0.0,
            mu: 0.0,
            tau: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("self-attention lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(config_err!("self-attention mu must be ≥ 0, got {}", self.mu));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err!("similarity tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }
}

/// `h × w × ℓ × c` → `(h·w) × ℓ × c`.
pub fn temporal_flatten(z: &LatentVideo) -> Tensor {
    Tensor::from_parts(
        vec![z.cells(), z.frames(), z.channels()],
        z.tensor().data().to_vec(),
    )
}

/// Inverse of [`temporal_flatten`].
pub fn temporal_unflatten(flat: &Tensor, h: usize, w: usize, timestep: usize) -> Result<LatentVideo> {
    match flat.shape() {
        [n, l, c] if *n == h * w => LatentVideo::new(flat.reshape(&[h, w, *l, *c])?, timestep),
        other => Err(shape_err!("cannot unflatten {:?} into {h}×{w} cells", other)),
    }
}

/// `(h·w) × c` slice of one frame from a flattened clip.
pub fn frame_slice(flat: &Tensor, frame: usize) -> Result<Tensor> {
    let [n, l, c] = *flat.shape() else {
        return Err(shape_err!("expected (h·w)×ℓ×c, got {:?}", flat.shape()));
    };
    if frame >= l {
        return Err(shape_err!("frame {frame} out of {l}"));
    }
    let mut out = Vec::with_capacity(n * c);
    for q in 0..n {
        let start = (q * l + frame) * c;
        out.extend_from_slice(&flat.data()[start..start + c]);
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn project_qkv(
    flat: &Tensor,
    weights: &ProjectionWeights,
    frame: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let x = frame_slice(flat, frame)?;
    project_rows(&x, weights)
}

pub(crate) fn project_rows(x: &Tensor, w: &ProjectionWeights) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((matmul(x, &w.query)?, matmul(x, &w.key)?, matmul(x, &w.value)?))
}

/// `(max − raw, raw − min)` with scalar extremes over the whole matrix.
pub fn pos_neg_maps(raw: &Tensor) -> Result<(Tensor, Tensor)> {
    if raw.is_empty() {
        return Err(shape_err!("empty attention matrix"));
    }
    raw.ensure_finite("raw attention")?;
    let (hi, lo) = (raw.max(), raw.min());
    Ok((raw.map(|v| hi - v), raw.map(|v| v - lo)))
}

/// `gate ⊙ M_pos − (1 − gate) ⊙ M_neg`; `gate` may be binary or soft.
pub fn fairness_modulation(raw: &Tensor, gate: &Tensor) -> Result<Tensor> {
    if raw.shape() != gate.shape() {
        return Err(shape_err!(
            "mask {:?} does not match attention {:?}",
            gate.shape(),
            raw.shape()
        ));
    }
    let (pos, neg) = pos_neg_maps(raw)?;
    let data = gate
        .data()
        .iter()
        .zip(pos.data().iter().zip(neg.data()))
        .map(|(&g, (&p, &n))| g * p - (1.0 - g) * n)
        .collect();
    Ok(Tensor::from_parts(raw.shape().to_vec(), data))
}

/// Modulated logits from an already computed `Q Kᵀ`.
pub fn fair_logits_from_raw(
    raw: &Tensor,
    regions: &RegionIndicator,
    similarity: &SimilarityMask,
    cfg: &SelfAttnConfig,
    head_dim: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, m) = raw.dims2()?;
    if n != m || regions.size() != n || similarity.matrix().shape() != raw.shape() {
        return Err(shape_err!(
            "self-attention {}×{} with R {} and S {:?}",
            n,
            m,
            regions.size(),
            similarity.matrix().shape()
        ));
    }
    let modulation = fairness_modulation(raw, regions.matrix())?;
    let scale = (head_dim as f64).sqrt();
    let data = raw
        .data()
        .iter()
        .zip(modulation.data().iter().zip(similarity.matrix().data()))
        .map(|(&r, (&mf, &s))| (r + cfg.lambda * mf + cfg.mu * s) / scale)
        .collect();
    Ok(Tensor::from_parts(vec![n, m], data))
}

pub fn fair_logits(
    q: &Tensor,
    k: &Tensor,
    regions: &RegionIndicator,
    similarity: &SimilarityMask,
    cfg: &SelfAttnConfig,
) -> Result<Tensor> {
    let raw = matmul_transposed(q, k)?;
    fair_logits_from_raw(&raw, regions, similarity, cfg, q.dims2()?.1)
}

pub fn fair_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    regions: &RegionIndicator,
    similarity: &SimilarityMask,
    cfg: &SelfAttnConfig,
) -> Result<Tensor> {
    let probs = softmax_rows(&fair_logits(q, k, regions, similarity, cfg)?)?;
    matmul(&probs, v)
}

/// Unmodulated `softmax(Q Kᵀ / √d) · V`.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let scale = (q.dims2()?.1 as f64).sqrt();
    let logits = matmul_transposed(q, k)?.map(|v| v / scale);
    matmul(&softmax_rows(&logits)?, v)
}

/// Whole-clip fair attention: every frame is projected and attended
/// independently with shared masks, and the outputs are reassembled into a
/// `(h·w) × ℓ × d` tensor.
pub fn fair_attention_clip(
    flat: &Tensor,
    weights: &ProjectionWeights,
    regions: &RegionIndicator,
    similarity: &SimilarityMask,
    cfg: &SelfAttnConfig,
) -> Result<Tensor> {
    let [n, l, c] = *flat.shape() else {
        return Err(shape_err!("expected (h·w)×ℓ×c, got {:?}", flat.shape()));
    };
    if c != weights.input_dim() {
        return Err(shape_err!("{c} channels vs projection input {}", weights.input_dim()));
    }
    let d = weights.head_dim();
    let mut out = vec![0.0; n * l * d];
    for f in 0..l {
        let (q, k, v) = project_qkv(flat, weights, f)?;
        let a = fair_attention(&q, &k, &v, regions, similarity, cfg)?;
        for qi in 0..n {
            let dst = (qi * l + f) * d;
            out[dst..dst + d].copy_from_slice(a.row(qi));
        }
    }
    Ok(Tensor::from_parts(vec![n, l, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{build_region_indicator, build_similarity_mask, RegionMap};

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn flatten_round_trip_and_order() {
        let z = LatentVideo::new(
            Tensor::new(vec![2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            3,
        )
        .unwrap();
        let flat = temporal_flatten(&z);
        assert_eq!(flat.shape(), &[4, 1, 1]);
        assert_eq!(flat.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(temporal_unflatten(&flat, 2, 2, 3).unwrap(), z);

        let mut rng = SeededRng::new(1);
        let z = LatentVideo::new(Tensor::new(vec![1, 1, 3, 2], rng.normal_vec(6)).unwrap(), 0).unwrap();
        let flat = temporal_flatten(&z);
        assert_eq!(flat.shape(), &[1, 3, 2]);
        assert_eq!(flat.data(), z.tensor().data());
        assert!(temporal_unflatten(&flat, 2, 1, 0).is_err());
    }

    #[test]
    fn projection_examples() {
        let flat = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = ProjectionWeights {
            query: mat(&[&[1.0], &[1.0]]),
            key: mat(&[&[1.0], &[0.0]]),
            value: mat(&[&[0.0], &[1.0]]),
            seed: 0,
        };
        let (q, k, v) = project_qkv(&flat, &w, 0).unwrap();
        assert_eq!(q.data(), &[3.0]);
        assert_eq!(k.data(), &[1.0]);
        assert_eq!(v.data(), &[2.0]);

        let id = ProjectionWeights {
            query: Tensor::identity(2),
            key: Tensor::identity(2),
            value: Tensor::identity(2),
            seed: 0,
        };
        let flat = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (q, _, _) = project_qkv(&flat, &id, 0).unwrap();
        assert_eq!(q.data(), flat.data());

        let zeros = Tensor::zeros(&[3, 2, 4]);
        let w = ProjectionWeights::seeded(4, 4, 9);
        let (q, k, v) = project_qkv(&zeros, &w, 1).unwrap();
        assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&x| x == 0.0));
        assert!(project_qkv(&zeros, &ProjectionWeights::seeded(3, 4, 9), 0).is_err());
    }

    #[test]
    fn pos_neg_examples() {
        let (p, n) = pos_neg_maps(&mat(&[&[1.0, 3.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(p.data(), &[2.0, 0.0, 1.0, 3.0]);
        assert_eq!(n.data(), &[1.0, 3.0, 2.0, 0.0]);
        let (p, n) = pos_neg_maps(&Tensor::filled(&[2, 3], 4.2)).unwrap();
        assert!(p.data().iter().chain(n.data()).all(|&v| v == 0.0));
    }

    fn masks(n_side: usize) -> (RegionIndicator, SimilarityMask) {
        let map = RegionMap::new(n_side, 1, (0..n_side).map(|i| usize::from(i >= n_side / 2)).collect()).unwrap();
        let mut rng = SeededRng::new(4);
        let f = Tensor::new(vec![n_side, 3], rng.normal_vec(n_side * 3)).unwrap();
        (build_region_indicator(&map), build_similarity_mask(&f, 1.0).unwrap())
    }

    #[test]
    fn vanilla_reduction_is_exact() {
        let mut rng = SeededRng::new(2);
        let q = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let k = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let v = Tensor::new(vec![4, 5], rng.normal_vec(20)).unwrap();
        let (r, s) = masks(4);
        let logits = fair_logits(&q, &k, &r, &s, &SelfAttnConfig::vanilla()).unwrap();
        let plain = matmul_transposed(&q, &k).unwrap().map(|v| v / 3f64.sqrt());
        assert!(logits.max_abs_diff(&plain).unwrap() == 0.0);
        let a = fair_attention(&q, &k, &v, &r, &s, &SelfAttnConfig::vanilla()).unwrap();
        let b = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn all_ones_region_lifts_toward_max() {
        let mut rng = SeededRng::new(3);
        let q = Tensor::new(vec![4, 2], rng.normal_vec(8)).unwrap();
        let k = Tensor::new(vec![4, 2], rng.normal_vec(8)).unwrap();
        let (_, s) = masks(4);
        let cfg = SelfAttnConfig { lambda: 1.0, mu: 0.0, tau: 1.0 };
        let logits = fair_logits(&q, &k, &RegionIndicator::all_ones(4), &s, &cfg).unwrap();
        // λ = 1, R ≡ 1: raw + (max − raw) = max everywhere.
        let raw = matmul_transposed(&q, &k).unwrap();
        let expected = raw.max() / 2f64.sqrt();
        assert!(logits.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn modulation_signs_follow_regions() {
        let mut rng = SeededRng::new(5);
        let q = Tensor::new(vec![6, 3], rng.normal_vec(18)).unwrap();
        let k = Tensor::new(vec![6, 3], rng.normal_vec(18)).unwrap();
        let (r, s) = masks(6);
        let base = fair_logits(&q, &k, &r, &s, &SelfAttnConfig { lambda: 0.0, mu: 0.0, tau: 1.0 }).unwrap();
        let moved = fair_logits(&q, &k, &r, &s, &SelfAttnConfig { lambda: 0.7, mu: 0.0, tau: 1.0 }).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let delta = moved.data()[i * 6 + j] - base.data()[i * 6 + j];
                if r.get(i, j) == 1.0 {
                    assert!(delta >= -1e-15);
                } else {
                    assert!(delta <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_values_read_out_weights() {
        let mut rng = SeededRng::new(6);
        let q = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let k = Tensor::new(vec![4, 3], rng.normal_vec(12)).unwrap();
        let (r, s) = masks(4);
        let cfg = SelfAttnConfig::default();
        let out = fair_attention(&q, &k, &Tensor::identity(4), &r, &s, &cfg).unwrap();
        let probs = softmax_rows(&fair_logits(&q, &k, &r, &s, &cfg).unwrap()).unwrap();
        assert!(out.max_abs_diff(&probs).unwrap() == 0.0);
    }

    #[test]
    fn clip_output_shape() {
        let mut rng = SeededRng::new(8);
        let z = LatentVideo::new(Tensor::new(vec![2, 2, 3, 4], rng.normal_vec(48)).unwrap(), 0).unwrap();
        let (r, s) = masks(4);
        let w = ProjectionWeights::seeded(4, 6, 1);
        let out = fair_attention_clip(&temporal_flatten(&z), &w, &r, &s, &SelfAttnConfig::default()).unwrap();
        assert_eq!(out.shape(), &[4, 3, 6]);
    }

    #[test]
    fn config_validation() {
        let (r, s) = masks(2);
        let q = Tensor::identity(2);
        for cfg in [
            SelfAttnConfig { lambda: -0.1, mu: 0.0, tau: 1.0 },
            SelfAttnConfig { lambda: 0.0, mu: -1.0, tau: 1.0 },
            SelfAttnConfig { lambda: 0.0, mu: 0.0, tau: 0.0 },
        ] {
            assert!(fair_logits(&q, &q, &r, &s, &cfg).is_err());
        }
        let wrong = RegionIndicator::all_ones(3);
        assert!(fair_logits(&q, &q, &wrong, &s, &SelfAttnConfig::default()).is_err());
    }
}
