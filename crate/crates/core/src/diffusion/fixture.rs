//! Synthetic clips for tests and demos: every region gets a base colour in
//! latent space that drifts slowly over frames, plus small per-cell noise.

use crate::error::Result;
use crate::region::{synth_region_map, Layout, RegionMap};
use crate::tensor::{SeededRng, Tensor};

use super::LatentVideo;

pub const FIXTURE_DIMS: [usize; 4] = [8, 8, 4, 16];

/// Reference prompt of the bundled fixture.
pub const FIXTURE_REF: &str = "a man is playing tennis";
pub const FIXTURE_TAR: &str = "a teacher is playing tennis";
pub const FIXTURE_TAR_EXPLICIT: &str = "a male teacher is playing tennis";
pub const FIXTURE_FAIR: &str = "male";

pub fn synth_video(map: &RegionMap, frames: usize, channels: usize, seed: u64) -> Result<LatentVideo> {
    let mut rng = SeededRng::derive(seed, "video");
    let k = map.num_regions();
    let bases: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(channels)).collect();
    let drifts: Vec<Vec<f64>> = (0..k)
        .map(|_| rng.normal_vec(channels).into_iter().map(|v| 0.05 * v).collect())
        .collect();
    let (h, w) = (map.height(), map.width());
    let mut data = Vec::with_capacity(h * w * frames * channels);
    for q in 0..h * w {
        let r = map.labels()[q];
        for f in 0..frames {
            for ch in 0..channels {
                data.push(bases[r][ch] + f as f64 * drifts[r][ch] + 0.05 * rng.normal());
            }
        }
    }
    LatentVideo::new(Tensor::new(vec![h, w, frames, channels], data)?, 0)
}

/// Region map and clip with the given dims.
pub fn fixture_scene(dims: [usize; 4], layout: Layout, seed: u64) -> Result<(LatentVideo, RegionMap)> {
    let [h, w, l, c] = dims;
    let map = synth_region_map(h, w, layout, seed)?;
    let video = synth_video(&map, l, c, seed)?;
    Ok((video, map))
}
