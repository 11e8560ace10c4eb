use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// `h × w × ℓ × c` latent clip tagged with its diffusion timestep.
///
/// Spatial cells are flattened row-major (`q = i·w + j`) everywhere in the
/// crate, and the memory layout already groups a cell's frames together, so
/// the `(h·w) × ℓ × c` view is a pure reshape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
    timestep: usize,
}

impl LatentVideo {
    pub fn new(tensor: Tensor, timestep: usize) -> Result<Self> {
        if tensor.rank() != 4 || tensor.shape().contains(&0) {
            return Err(shape_err!(
                "latent video must be h×w×frames×channels with non-zero dims, got {:?}",
                tensor.shape()
            ));
        }
        Ok(Self { tensor, timestep })
    }

    pub fn zeros(h: usize, w: usize, frames: usize, channels: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[h, w, frames, channels]),
            timestep: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn with_timestep(mut self, t: usize) -> Self {
        self.timestep = t;
        self
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Channel vector of spatial cell `q` in `frame`.
    pub fn cell(&self, q: usize, frame: usize) -> &[f64] {
        let (l, c) = (self.frames(), self.channels());
        let start = (q * l + frame) * c;
        &self.tensor.data()[start..start + c]
    }

    /// `(h·w) × c` matrix of one frame.
    pub fn frame_matrix(&self, frame: usize) -> Tensor {
        let (n, c) = (self.cells(), self.channels());
        let mut out = Vec::with_capacity(n * c);
        for q in 0..n {
            out.extend_from_slice(self.cell(q, frame));
        }
        Tensor::from_parts(vec![n, c], out)
    }

    /// Reassembles per-frame `(h·w) × c` matrices into a video.
    pub fn from_frames(h: usize, w: usize, frames: &[Tensor], timestep: usize) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| shape_err!("no frames to assemble"))?;
        let (n, c) = first.dims2()?;
        if n != h * w {
            return Err(shape_err!("frame has {n} cells, expected {}", h * w));
        }
        if frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(shape_err!("frames disagree in shape"));
        }
        let l = frames.len();
        let mut data = vec![0.0; n * l * c];
        for (f, m) in frames.iter().enumerate() {
            for q in 0..n {
                let dst = (q * l + f) * c;
                data[dst..dst + c].copy_from_slice(m.row(q));
            }
        }
        Self::new(Tensor::from_parts(vec![h, w, l, c], data), timestep)
    }
}
