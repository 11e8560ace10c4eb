use crate::error::{shape_err, Result};
use crate::tensor::{SeededRng, Tensor};

use super::LatentVideo;

const DECODER_SEED: u64 = 0x0DEC_0DE5;

/// The fixed `c × 3` channel map used by [`decode_frames`].
pub fn decoder_weights(channels: usize) -> Tensor {
    let mut rng = SeededRng::derive(DECODER_SEED, &format!("decoder:{channels}"));
    let scale = 0.5 / (channels as f64).sqrt();
    Tensor::from_parts(vec![channels, 3], rng.normal_vec(channels * 3)).scale(scale)
}

/// `0.5 + z·W` per cell without clipping.
pub fn decode_linear(z: &LatentVideo) -> Result<Tensor> {
    let c = z.channels();
    if c < 3 {
        return Err(shape_err!("decoding needs at least 3 channels, got {c}"));
    }
    let w = decoder_weights(c);
    let cells = z.cells() * z.frames();
    let mut out = Vec::with_capacity(cells * 3);
    for chunk in z.tensor().data().chunks_exact(c) {
        for j in 0..3 {
            let v: f64 = chunk.iter().enumerate().map(|(i, x)| x * w.data()[i * 3 + j]).sum();
            out.push(0.5 + v);
        }
    }
    Ok(Tensor::from_parts(
        vec![z.height(), z.width(), z.frames(), 3],
        out,
    ))
}

/// Stand-in decoder: fixed linear map to 3 channels, clipped to `[0, 1]`.
pub fn decode_frames(z: &LatentVideo) -> Result<Tensor> {
    Ok(decode_linear(z)?.map(|v| v.clamp(0.0, 1.0)))
}
