//! Prompt-to-region cross-attention with fairness token reweighting.
//!
//! Each fairness concept `k` owns an embedding `e_k` and a set of key indices.
//! The soft mask `R_t[q, j] = cos(Q_t[q], e_k)` for keys `j` owned by concept
//! `k` and zero elsewhere. Logits are modulated exactly as in self-attention,
//! with `R_t` as the gate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::prompt::EmbeddingMatrix;
use crate::self_attention::fairness_modulation;
use crate::tensor::{cosine, matmul, matmul_transposed, softmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FairConcept {
    pub embedding: Vec<f64>,
    pub keys: Vec<usize>,
}

/// Disjoint key groups, each governed by one concept embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FairTokenGroups {
    concepts: Vec<FairConcept>,
}

impl FairTokenGroups {
    pub fn new(concepts: Vec<FairConcept>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, c) in concepts.iter().enumerate() {
            if c.embedding.iter().any(|v| !v.is_finite()) {
                return Err(config_err!("concept {i} has a non-finite embedding"));
            }
            if let Some(dim) = concepts.first().map(|f| f.embedding.len()) {
                if c.embedding.len() != dim {
                    return Err(shape_err!("concept {i} embedding dim differs from concept 0"));
                }
            }
            for &k in &c.keys {
                if !seen.insert(k) {
                    return Err(config_err!("key {k} belongs to more than one concept"));
                }
            }
        }
        Ok(Self { concepts })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn concepts(&self) -> &[FairConcept] {
        &self.concepts
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.iter().all(|c| c.keys.is_empty())
    }

    /// Governing concept for every key in `0..len`.
    fn owners(&self, len: usize) -> Result<Vec<Option<usize>>> {
        let mut owner = vec![None; len];
        for (ci, c) in self.concepts.iter().enumerate() {
            for &k in &c.keys {
                let slot = owner
                    .get_mut(k)
                    .ok_or_else(|| shape_err!("group key {k} outside {len} prompt tokens"))?;
                *slot = Some(ci);
            }
        }
        Ok(owner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnConfig {
    pub lambda: f64,
    pub clamp_negative: bool,
}

impl Default for CrossAttnConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            clamp_negative: true,
        }
    }
}

impl CrossAttnConfig {
    pub fn vanilla() -> Self {
        Self {
            lambda: 0.0,
            clamp_negative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(config_err!("cross-attention lambda must be ≥ 0, got {}", self.lambda))
        }
    }
}

/// `(h·w) × L` soft mask over `num_keys` prompt tokens.
pub fn cosine_region_mask(
    q: &Tensor,
    groups: &FairTokenGroups,
    num_keys: usize,
    clamp_negative: bool,
) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    if let Some(c) = groups.concepts().iter().find(|c| c.embedding.len() != d) {
        return Err(shape_err!("concept dim {} vs query dim {d}", c.embedding.len()));
    }
    let owners = groups.owners(num_keys)?;
    let mut out = vec![0.0; n * num_keys];
    for qi in 0..n {
        let row = q.row(qi);
        let sims: Vec<f64> = groups
            .concepts()
            .iter()
            .map(|c| cosine(row, &c.embedding))
            .collect::<Result<_>>()?;
        for (k, owner) in owners.iter().enumerate() {
            if let Some(ci) = owner {
                let s = sims[*ci];
                out[qi * num_keys + k] = if clamp_negative { s.max(0.0) } else { s };
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, num_keys], out))
}

/// Modulated logits from an already computed `Q Kᵀ`.
pub fn fair_cross_logits_from_raw(
    raw: &Tensor,
    mask: &Tensor,
    cfg: &CrossAttnConfig,
    head_dim: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    let modulation = fairness_modulation(raw, mask)?;
    let scale = (head_dim as f64).sqrt();
    let data = raw
        .data()
        .iter()
        .zip(modulation.data())
        .map(|(&r, &m)| (r + cfg.lambda * m) / scale)
        .collect();
    Ok(Tensor::from_parts(raw.shape().to_vec(), data))
}

pub fn fair_cross_logits(q: &Tensor, k: &Tensor, mask: &Tensor, cfg: &CrossAttnConfig) -> Result<Tensor> {
    let raw = matmul_transposed(q, k)?;
    fair_cross_logits_from_raw(&raw, mask, cfg, q.dims2()?.1)
}

pub fn fair_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: &FairTokenGroups,
    cfg: &CrossAttnConfig,
) -> Result<Tensor> {
    let (l, _) = k.dims2()?;
    if v.dims2()?.0 != l {
        return Err(shape_err!("{} value rows for {l} keys", v.dims2()?.0));
    }
    let mask = cosine_region_mask(q, groups, l, cfg.clamp_negative)?;
    let probs = softmax_rows(&fair_cross_logits(q, k, &mask, cfg)?)?;
    matmul(&probs, v)
}

/// JSON token-group file: `{"concepts": [{"token": "woman", "keys": [2, 3]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroupSpec {
    pub concepts: Vec<ConceptSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub token: String,
    pub keys: Vec<usize>,
}

impl TokenGroupSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Resolves each `token` against the rows of an encoded fairness prompt.
    pub fn resolve(&self, fairness_words: &[String], fairness: &EmbeddingMatrix) -> Result<FairTokenGroups> {
        let concepts = self
            .concepts
            .iter()
            .map(|c| {
                let row = fairness_words
                    .iter()
                    .position(|w| *w == c.token)
                    .ok_or_else(|| config_err!("concept token {:?} is not in the fairness prompt", c.token))?;
                Ok(FairConcept {
                    embedding: fairness.row(row).to_vec(),
                    keys: c.keys.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FairTokenGroups::new(concepts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], rng.normal_vec(r * c)).unwrap()
    }

    fn concept(e: Vec<f64>, keys: Vec<usize>) -> FairConcept {
        FairConcept { embedding: e, keys }
    }

    #[test]
    fn mask_examples() {
        let e = vec![1.0, 0.0, 0.0];
        let groups = FairTokenGroups::new(vec![concept(e.clone(), vec![1])]).unwrap();
        let q = Tensor::from_rows(&[e.clone(), vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
        let m = cosine_region_mask(&q, &groups, 3, true).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert!((m.get(&[0, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(m.get(&[1, 1]), 0.0);
        assert_eq!(m.get(&[2, 1]), 0.0);
        for q in 0..3 {
            assert_eq!(m.get(&[q, 0]), 0.0);
            assert_eq!(m.get(&[q, 2]), 0.0);
        }
        let raw = cosine_region_mask(&q, &groups, 3, false).unwrap();
        assert!((raw.get(&[2, 1]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let e = vec![1.0; 4];
        let bad = FairTokenGroups::new(vec![concept(e.clone(), vec![0, 1]), concept(e, vec![1])]);
        assert!(bad.is_err());
        let nan = FairTokenGroups::new(vec![concept(vec![f64::NAN], vec![0])]);
        assert!(nan.is_err());
        let out_of_range = FairTokenGroups::new(vec![concept(vec![1.0, 0.0], vec![5])]).unwrap();
        assert!(cosine_region_mask(&Tensor::identity(2), &out_of_range, 3, true).is_err());
    }

    #[test]
    fn logit_examples() {
        let mut rng = SeededRng::new(2);
        let q = random(&mut rng, 5, 4);
        let k = random(&mut rng, 3, 4);
        let raw = matmul_transposed(&q, &k).unwrap();
        let plain = raw.scale(0.5);
        let cfg = CrossAttnConfig { lambda: 0.8, clamp_negative: true };

        let vanilla = fair_cross_logits(&q, &k, &Tensor::zeros(&[5, 3]), &CrossAttnConfig::vanilla()).unwrap();
        assert_eq!(vanilla.max_abs_diff(&plain).unwrap(), 0.0);

        let zero = fair_cross_logits(&q, &k, &Tensor::zeros(&[5, 3]), &cfg).unwrap();
        let ones = fair_cross_logits(&q, &k, &Tensor::filled(&[5, 3], 1.0), &cfg).unwrap();
        let (lo, hi) = (raw.min(), raw.max());
        for i in 0..15 {
            let r = raw.data()[i];
            assert!((zero.data()[i] - (r - 0.8 * (r - lo)) / 2.0).abs() < 1e-12);
            assert!((ones.data()[i] - (r + 0.8 * (hi - r)) / 2.0).abs() < 1e-12);
            assert!(zero.data()[i] <= plain.data()[i] + 1e-15);
            assert!(ones.data()[i] >= plain.data()[i] - 1e-15);
        }
        assert!(fair_cross_logits(&q, &k, &Tensor::zeros(&[5, 2]), &cfg).is_err());
        let neg = CrossAttnConfig { lambda: -1.0, clamp_negative: true };
        assert!(fair_cross_logits(&q, &k, &Tensor::zeros(&[5, 3]), &neg).is_err());
    }

    #[test]
    fn attention_reductions() {
        let mut rng = SeededRng::new(3);
        let q = random(&mut rng, 6, 4);
        let k = random(&mut rng, 4, 4);
        let v = random(&mut rng, 4, 5);
        let groups = FairTokenGroups::new(vec![concept(rng.normal_vec(4), vec![1, 2])]).unwrap();
        let a = fair_cross_attention(&q, &k, &v, &groups, &CrossAttnConfig::vanilla()).unwrap();
        let probs = softmax_rows(&matmul_transposed(&q, &k).unwrap().scale(0.5)).unwrap();
        assert!(a.max_abs_diff(&matmul(&probs, &v).unwrap()).unwrap() <= 1e-12);

        let k1 = random(&mut rng, 1, 4);
        let v1 = random(&mut rng, 1, 5);
        let g1 = FairTokenGroups::new(vec![concept(rng.normal_vec(4), vec![0])]).unwrap();
        for lambda in [0.0, 0.5, 3.0] {
            let out = fair_cross_attention(&q, &k1, &v1, &g1, &CrossAttnConfig { lambda, clamp_negative: true }).unwrap();
            for r in 0..6 {
                for (a, b) in out.row(r).iter().zip(v1.row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(fair_cross_attention(&q, &k, &v1, &groups, &CrossAttnConfig::default()).is_err());
    }

    #[test]
    fn token_group_spec_resolves_tokens() {
        let spec = TokenGroupSpec::from_json(r#"{"concepts":[{"token":"woman","keys":[2,3]}]}"#).unwrap();
        let words: Vec<String> = ["a", "woman"].iter().map(|s| s.to_string()).collect();
        let tokens = crate::prompt::PromptTokens::parse("a woman");
        let e = crate::prompt::encode(&tokens, 8, 1).unwrap();
        let groups = spec.resolve(&words, &e).unwrap();
        assert_eq!(groups.concepts()[0].keys, vec![2, 3]);
        assert_eq!(groups.concepts()[0].embedding, e.row(1));
        let missing = TokenGroupSpec::from_json(r#"{"concepts":[{"token":"man","keys":[0]}]}"#).unwrap();
        assert!(missing.resolve(&words, &e).is_err());
        assert!(TokenGroupSpec::from_json("{}").is_err());
    }
}
