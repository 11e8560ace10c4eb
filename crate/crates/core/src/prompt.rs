//! Synthetic prompt encoder and soft debiasing prompt fusion.
//!
//! The encoder is a deterministic stand-in for a pretrained text encoder. Each
//! ordinary token row is a unit vector built from a hash of the token string,
//! its position and the encoder seed. The final end-of-sequence row pools the
//! whole prompt: it is the normalized mean of every preceding row plus a fixed
//! seeded EOS basis vector, renormalized, so it depends on every token.
//!
//! Debiasing runs in two steps:
//!
//! 1. [`soft_fuse`] convexly mixes selected target rows with paired fairness
//!    rows: `ẽ_k = λ_k·e_tar,k + (1 − λ_k)·e_fair,pair(k)` for `k ∈ P`.
//! 2. [`eos_inject`] moves only the EOS row toward the fairness EOS row by a
//!    fraction `α`: `g = ẽ + α·M ⊗ (e_fair − ẽ)` with `M` active on EOS alone.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{cosine, derive_seed, normalize, SeededRng, Tensor};

pub const EOS_TOKEN: &str = "<eos>";

/// Weight of the positional component mixed into each token row.
pub const POSITION_WEIGHT: f64 = 0.25;

/// Smallest supported embedding dimension.
pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    tokens: Vec<String>,
}

impl PromptTokens {
    /// Whitespace tokenization with lowercasing and punctuation stripping; the
    /// EOS token is appended, so the empty string yields `["<eos>"]`.
    pub fn parse(text: &str) -> Self {
        let mut tokens: Vec<String> = text
            .split_whitespace()
            .map(normalize_token)
            .filter(|t| !t.is_empty())
            .collect();
        tokens.push(EOS_TOKEN.to_string());
        Self { tokens }
    }

    /// Takes an explicit token list, which must be non-empty and end in EOS.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        match tokens.last() {
            None => Err(config_err!("empty prompt")),
            Some(last) if last != EOS_TOKEN => {
                Err(config_err!("prompt must end with the {EOS_TOKEN} token"))
            }
            Some(_) => {
                let tokens = tokens
                    .into_iter()
                    .map(|t| if t == EOS_TOKEN { t } else { normalize_token(&t) })
                    .collect();
                Ok(Self { tokens })
            }
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos_index(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Tokens before EOS.
    pub fn words(&self) -> &[String] {
        &self.tokens[..self.eos_index()]
    }
}

fn normalize_token(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '-')
        .flat_map(char::to_lowercase)
        .collect()
}

/// `L × d` token embedding matrix whose last row is the EOS row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (rows, _) = values.dims2()?;
        if rows == 0 {
            return Err(shape_err!("embedding needs at least the EOS row"));
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn eos_index(&self) -> usize {
        self.rows() - 1
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    pub fn eos(&self) -> &[f64] {
        self.row(self.eos_index())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    fn with_rows(&self, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(Tensor::from_rows(&rows)?)
    }

    fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|k| self.row(k).to_vec()).collect()
    }
}

/// Unit vector for a token string, before any positional component.
pub fn token_vector(token: &str, dim: usize, encoder_seed: u64) -> Vec<f64> {
    SeededRng::derive(encoder_seed, &format!("token:{token}")).unit_vec(dim)
}

fn position_vector(position: usize, dim: usize, encoder_seed: u64) -> Vec<f64> {
    SeededRng::derive(encoder_seed, &format!("position:{position}")).unit_vec(dim)
}

/// The fixed basis vector folded into every EOS row.
pub fn eos_basis(dim: usize, encoder_seed: u64) -> Vec<f64> {
    SeededRng::derive(encoder_seed, "eos-basis").unit_vec(dim)
}

/// 64-bit identity of a token under an encoder seed. Used to audit the
/// fixture vocabulary for collisions.
pub fn token_hash(token: &str, encoder_seed: u64) -> u64 {
    derive_seed(encoder_seed, &format!("token:{token}"))
}

pub fn encode(prompt: &PromptTokens, dim: usize, encoder_seed: u64) -> Result<EmbeddingMatrix> {
    if dim < MIN_DIM {
        return Err(config_err!("embedding dim {dim} is below {MIN_DIM}"));
    }
    let mut rows: Vec<Vec<f64>> = prompt
        .words()
        .iter()
        .enumerate()
        .map(|(k, tok)| {
            let t = token_vector(tok, dim, encoder_seed);
            let p = position_vector(k, dim, encoder_seed);
            let mixed: Vec<f64> = t.iter().zip(&p).map(|(a, b)| a + POSITION_WEIGHT * b).collect();
            normalize(&mixed)
        })
        .collect();

    let mut mean = vec![0.0; dim];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    let pooled = normalize(&mean);
    let basis = eos_basis(dim, encoder_seed);
    let eos: Vec<f64> = pooled.iter().zip(&basis).map(|(a, b)| a + b).collect();
    rows.push(normalize(&eos));

    EmbeddingMatrix::new(Tensor::from_rows(&rows)?)
}

/// Positions of target tokens whose best cosine against any non-EOS fairness
/// row reaches `theta`. Explicit `overrides` replace the scan.
pub fn select_fair_positions(
    target: &EmbeddingMatrix,
    fairness: &EmbeddingMatrix,
    theta: f64,
    overrides: Option<&[usize]>,
) -> Result<Vec<usize>> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(config_err!("position threshold {theta} outside [-1, 1]"));
    }
    if target.dim() != fairness.dim() {
        return Err(shape_err!(
            "target dim {} vs fairness dim {}",
            target.dim(),
            fairness.dim()
        ));
    }
    if let Some(list) = overrides {
        let mut p = list.to_vec();
        p.sort_unstable();
        p.dedup();
        if let Some(&bad) = p.iter().find(|&&k| k >= target.eos_index()) {
            return Err(config_err!(
                "override position {bad} is not a non-EOS target token (EOS at {})",
                target.eos_index()
            ));
        }
        return Ok(p);
    }
    let mut p = Vec::new();
    for k in 0..target.eos_index() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..fairness.eos_index() {
            best = best.max(cosine(target.row(k), fairness.row(j))?);
        }
        if best >= theta {
            p.push(k);
        }
    }
    Ok(p)
}

/// Fairness row paired with each fused position: sorted positions take the
/// non-EOS fairness rows in order, cycling when there are more positions.
pub fn pair_positions(positions: &[usize], fairness: &EmbeddingMatrix) -> Result<Vec<usize>> {
    let available = fairness.eos_index();
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    if available == 0 {
        return Err(config_err!(
            "cannot pair {} fused positions with an empty fairness prompt",
            positions.len()
        ));
    }
    Ok((0..positions.len()).map(|i| i % available).collect())
}

/// Where and how strongly to fuse.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSpec {
    /// Sorted target positions, excluding EOS.
    pub positions: Vec<usize>,
    /// Mixing coefficient per entry of `positions`.
    pub lambdas: Vec<f64>,
    pub alpha: f64,
}

impl FusionSpec {
    pub fn uniform(positions: Vec<usize>, lambda: f64, alpha: f64) -> Self {
        let lambdas = vec![lambda; positions.len()];
        Self {
            positions,
            lambdas,
            alpha,
        }
    }

    pub fn validate(&self, target_rows: usize) -> Result<()> {
        if self.positions.len() != self.lambdas.len() {
            return Err(config_err!("one mixing coefficient per fused position"));
        }
        if !self.positions.windows(2).all(|w| w[0] < w[1]) {
            return Err(config_err!("fused positions must be sorted and distinct"));
        }
        if let Some(&k) = self.positions.iter().find(|&&k| k + 1 >= target_rows) {
            return Err(config_err!("fused position {k} is EOS or out of range"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(config_err!("mixing coefficient {l} outside [0, 1]"));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(config_err!("EOS injection strength {alpha} outside [0, 1]"))
    }
}

/// Convex mixing of the rows in `spec.positions`; all other rows are copied.
/// Fused rows are not renormalized.
pub fn soft_fuse(
    target: &EmbeddingMatrix,
    fairness: &EmbeddingMatrix,
    spec: &FusionSpec,
) -> Result<EmbeddingMatrix> {
    spec.validate(target.rows())?;
    if target.dim() != fairness.dim() {
        return Err(shape_err!("fusion across dims {} and {}", target.dim(), fairness.dim()));
    }
    let pairing = pair_positions(&spec.positions, fairness)?;
    let mut rows = target.row_vecs();
    for ((&k, &lambda), &j) in spec.positions.iter().zip(&spec.lambdas).zip(&pairing) {
        let fair = fairness.row(j);
        for (v, &f) in rows[k].iter_mut().zip(fair) {
            *v = lambda * *v + (1.0 - lambda) * f;
        }
    }
    target.with_rows(rows)
}

/// Moves the EOS row a fraction `alpha` of the way to the fairness EOS row.
pub fn eos_inject(
    fused: &EmbeddingMatrix,
    fairness: &EmbeddingMatrix,
    alpha: f64,
) -> Result<EmbeddingMatrix> {
    check_alpha(alpha)?;
    if fused.dim() != fairness.dim() {
        return Err(shape_err!("injection across dims {} and {}", fused.dim(), fairness.dim()));
    }
    let mut rows = fused.row_vecs();
    let eos = fused.eos_index();
    for (v, &f) in rows[eos].iter_mut().zip(fairness.eos()) {
        *v = (1.0 - alpha) * *v + alpha * f;
    }
    fused.with_rows(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub dim: usize,
    pub encoder_seed: u64,
    /// Cosine cutoff for automatic position selection.
    pub theta_p: f64,
    /// Fixed mixing coefficient applied at every selected position.
    pub lambda: f64,
    pub alpha: f64,
    /// Explicit positions; bypasses the cosine scan when present.
    pub overrides: Option<Vec<usize>>,
}

impl DebiasConfig {
    pub fn new(dim: usize, encoder_seed: u64) -> Self {
        Self {
            dim,
            encoder_seed,
            theta_p: 0.35,
            lambda: 0.5,
            alpha: 0.5,
            overrides: None,
        }
    }
}

/// Every intermediate of a debiasing run.
#[derive(Debug, Clone)]
pub struct DebiasTrace {
    pub target: EmbeddingMatrix,
    pub fairness: EmbeddingMatrix,
    pub positions: Vec<usize>,
    /// Fairness row index paired with each entry of `positions`.
    pub pairing: Vec<usize>,
    pub fused: EmbeddingMatrix,
    pub output: EmbeddingMatrix,
}

pub fn debias_trace(target: &str, fairness: &str, cfg: &DebiasConfig) -> Result<DebiasTrace> {
    let e_tar = encode(&PromptTokens::parse(target), cfg.dim, cfg.encoder_seed)?;
    let e_fair = encode(&PromptTokens::parse(fairness), cfg.dim, cfg.encoder_seed)?;
    let positions = select_fair_positions(&e_tar, &e_fair, cfg.theta_p, cfg.overrides.as_deref())?;
    let pairing = pair_positions(&positions, &e_fair)?;
    let spec = FusionSpec::uniform(positions.clone(), cfg.lambda, cfg.alpha);
    let fused = soft_fuse(&e_tar, &e_fair, &spec)?;
    let output = eos_inject(&fused, &e_fair, cfg.alpha)?;
    Ok(DebiasTrace {
        target: e_tar,
        fairness: e_fair,
        positions,
        pairing,
        fused,
        output,
    })
}

/// encode → select positions → soft fuse → EOS injection.
pub fn debias_prompt(target: &str, fairness: &str, cfg: &DebiasConfig) -> Result<EmbeddingMatrix> {
    Ok(debias_trace(target, fairness, cfg)?.output)
}
