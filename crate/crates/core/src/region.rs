//! Region label maps and the masks derived from them: the binary same-region
//! indicator `R`, temporal mean features, the Gaussian similarity mask `S`,
//! and per-region attention masses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentVideo;
use crate::error::{config_err, shape_err, FameError, Result};
use crate::ften;
use crate::tensor::{SeededRng, Tensor};

/// Static `h × w` label map, labels contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    regions: usize,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(shape_err!(
                "{} labels for a {height}×{width} map",
                labels.len()
            ));
        }
        let regions = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; regions];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(config_err!("region labels are not contiguous: {missing} unused"));
        }
        Ok(Self {
            height,
            width,
            labels,
            regions,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.labels.len()
    }

    pub fn num_regions(&self) -> usize {
        self.regions
    }

    /// Labels in row-major order.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.width + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(config_err!("region label {v} is not a non-negative integer"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, labels)
    }

    /// Writes the label FTEN plus a `{ "labels": K }` JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        ften::write(path, &self.to_tensor())?;
        let sidecar = RegionSidecar {
            labels: self.regions,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Reads a label FTEN; when the sidecar exists its count must agree.
    pub fn load(path: &Path) -> Result<Self> {
        let map = Self::from_tensor(&ften::read(path)?)?;
        let side = sidecar_path(path);
        if side.exists() {
            let sidecar: RegionSidecar = serde_json::from_slice(&std::fs::read(side)?)?;
            if sidecar.labels != map.regions {
                return Err(config_err!(
                    "sidecar declares {} regions, map has {}",
                    sidecar.labels,
                    map.regions
                ));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionSidecar {
    labels: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Binary `(h·w) × (h·w)` same-region matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIndicator {
    values: Tensor,
}

impl RegionIndicator {
    pub fn matrix(&self) -> &Tensor {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values.data()[x * self.size() + y]
    }

    /// All-ones indicator of size `n` (every cell in one region).
    pub fn all_ones(n: usize) -> Self {
        Self {
            values: Tensor::filled(&[n, n], 1.0),
        }
    }
}

pub fn build_region_indicator(map: &RegionMap) -> RegionIndicator {
    let n = map.cells();
    let labels = map.labels();
    let mut data = Vec::with_capacity(n * n);
    for &a in labels {
        for &b in labels {
            data.push(if a == b { 1.0 } else { 0.0 });
        }
    }
    RegionIndicator {
        values: Tensor::from_parts(vec![n, n], data),
    }
}

/// `(h·w) × c` matrix of per-cell means over frames.
pub fn temporal_mean_features(z: &LatentVideo) -> Tensor {
    let (n, l, c) = (z.cells(), z.frames(), z.channels());
    let mut out = vec![0.0; n * c];
    for q in 0..n {
        let dst = &mut out[q * c..(q + 1) * c];
        for f in 0..l {
            for (d, v) in dst.iter_mut().zip(z.cell(q, f)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= l as f64);
    }
    Tensor::from_parts(vec![n, c], out)
}

/// Per-column zero-mean, unit-variance rescaling. Constant columns are only
/// centered.
pub fn standardize_features(features: &Tensor) -> Result<Tensor> {
    let (n, c) = features.dims2()?;
    let mut out = features.data().to_vec();
    for ch in 0..c {
        let col = (0..n).map(|q| features.data()[q * c + ch]);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for q in 0..n {
            out[q * c + ch] = (out[q * c + ch] - mean) / sd;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Gaussian kernel `exp(−‖f_a − f_b‖² / τ²)` over feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMask {
    values: Tensor,
    tau: f64,
}

impl SimilarityMask {
    pub fn matrix(&self) -> &Tensor {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values.data()[a * self.values.shape()[0] + b]
    }
}

pub fn build_similarity_mask(features: &Tensor, tau: f64) -> Result<SimilarityMask> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(config_err!("similarity temperature must be positive, got {tau}"));
    }
    let (n, _) = features.dims2()?;
    let tau2 = tau * tau;
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        data[a * n + a] = 1.0;
        for b in a + 1..n {
            let d2: f64 = features
                .row(a)
                .iter()
                .zip(features.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            // Clamp keeps entries strictly positive when the kernel underflows.
            let s = (-d2 / tau2).exp().max(f64::MIN_POSITIVE);
            data[a * n + b] = s;
            data[b * n + a] = s;
        }
    }
    Ok(SimilarityMask {
        values: Tensor::from_parts(vec![n, n], data),
        tau,
    })
}

/// Per-region attention mass maps `a_k`, each `h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAttentionMap {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Tensor>,
}

/// `a_k[x]` = attention that query `x` places on keys inside region `k`.
#[allow(clippy::needless_range_loop)]
pub fn export_region_attention(attn: &Tensor, map: &RegionMap) -> Result<RegionAttentionMap> {
    let (rows, cols) = attn.dims2()?;
    let n = map.cells();
    if rows != n || cols != n {
        return Err(shape_err!(
            "attention {rows}×{cols} does not match {n} region cells"
        ));
    }
    for x in 0..rows {
        let total: f64 = attn.row(x).iter().sum();
        if (total - 1.0).abs() > 1e-9 || attn.row(x).iter().any(|&v| v < 0.0) {
            return Err(FameError::Numeric(format!(
                "attention row {x} is not normalized (sums to {total})"
            )));
        }
    }
    let k = map.num_regions();
    let mut maps = vec![vec![0.0; n]; k];
    for x in 0..n {
        for (y, &mass) in attn.row(x).iter().enumerate() {
            maps[map.labels()[y]][x] += mass;
        }
    }
    Ok(RegionAttentionMap {
        height: map.height(),
        width: map.width(),
        maps: maps
            .into_iter()
            .map(|m| Tensor::from_parts(vec![map.height(), map.width()], m))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Left columns label 0, right columns label 1.
    Halves,
    /// Central disk label 1 on background 0.
    Disk,
    /// Horizontal bands with seeded boundaries, labelled top to bottom.
    Stripes,
}

impl std::str::FromStr for Layout {
    type Err = FameError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halves" => Ok(Layout::Halves),
            "disk" => Ok(Layout::Disk),
            "stripes" => Ok(Layout::Stripes),
            other => Err(config_err!("unknown region layout {other:?}")),
        }
    }
}

pub fn synth_region_map(h: usize, w: usize, layout: Layout, seed: u64) -> Result<RegionMap> {
    if h < 2 || w < 2 {
        return Err(config_err!("synthetic region maps need h, w ≥ 2, got {h}×{w}"));
    }
    let labels = match layout {
        Layout::Halves => (0..h)
            .flat_map(|_| (0..w).map(move |j| usize::from(j >= w / 2)))
            .collect(),
        Layout::Disk => {
            let (ci, cj) = (h as f64 / 2.0, w as f64 / 2.0);
            let radius = 0.35 * h.min(w) as f64;
            (0..h)
                .flat_map(|i| {
                    (0..w).map(move |j| {
                        let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                        usize::from((di * di + dj * dj).sqrt() <= radius)
                    })
                })
                .collect()
        }
        Layout::Stripes => {
            let mut rng = SeededRng::derive(seed, "stripes");
            let bands = 2 + rng.below(h.min(3) - 1);
            // Distinct cut rows in 1..h, one fewer than the band count.
            let mut cuts: Vec<usize> = (1..h).collect();
            for i in (1..cuts.len()).rev() {
                let j = rng.below(i + 1);
                cuts.swap(i, j);
            }
            cuts.truncate(bands - 1);
            cuts.sort_unstable();
            (0..h)
                .flat_map(|i| {
                    let band = cuts.iter().filter(|&&c| i >= c).count();
                    std::iter::repeat_n(band, w)
                })
                .collect()
        }
    };
    RegionMap::new(h, w, labels)
}
