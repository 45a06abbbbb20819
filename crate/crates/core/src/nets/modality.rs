//! Modality encoding: a strided 3D encoder compresses the half-resolution
//! volume into a small feature grid which is flattened into a non-spatial
//! vector, so appearance information survives but anatomy does not.

use rand_chacha::ChaCha8Rng;

use super::{halved, volume_to_tensor, Conv3dLayer, NetConfig, NetError};
use crate::autodiff::{Element, ParameterSet, Tape, Tensor};
use crate::vol::{downsample_trilinear, Volume};

/// Three halving blocks from the downsampled volume to a `c x d x h x w`
/// grid, flattened to a vector of length `m = c*d*h*w`.
pub struct ModalityEncoder<E: Element> {
    b1: Conv3dLayer<E>,
    b2: Conv3dLayer<E>,
    b3: Conv3dLayer<E>,
    slope: E,
    vector_len: usize,
}

impl<E: Element> ModalityEncoder<E> {
    /// Build for full-resolution volumes of extent `dims` (divisible by 2).
    pub fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        dims: (usize, usize, usize),
    ) -> Self {
        let c = cfg.modality_channels;
        let half = (dims.0 / 2, dims.1 / 2, dims.2 / 2);
        let s1 = (halved(half.0), halved(half.1), halved(half.2));
        let s2 = (halved(s1.0), halved(s1.1), halved(s1.2));
        let s3 = (halved(s2.0), halved(s2.1), halved(s2.2));
        // anisotropic parity would need per-axis kernels; keep extents cubic
        debug_assert!(half.0 % 2 == half.1 % 2 && half.1 % 2 == half.2 % 2);
        Self {
            b1: Conv3dLayer::strided(params, rng, "em.b1", 1, c / 4, half.0),
            b2: Conv3dLayer::strided(params, rng, "em.b2", c / 4, c / 2, s1.0),
            b3: Conv3dLayer::strided(params, rng, "em.b3", c / 2, c, s2.0),
            slope: E::from_f64(cfg.leaky_slope),
            vector_len: c * s3.0 * s3.1 * s3.2,
        }
    }

    /// Length m of the flattened modality vector.
    pub fn vector_len(&self) -> usize {
        self.vector_len
    }

    /// Encode an already-downsampled `[1,1,D/2,H/2,W/2]` tensor to `[1, m]`.
    pub fn forward(&self, tape: &Tape<E>, half: &Tensor<E>) -> Result<Tensor<E>, NetError> {
        let s = self.slope;
        let f1 = self.b1.forward(tape, half)?.leaky_relu(s);
        let f2 = self.b2.forward(tape, &f1)?.leaky_relu(s);
        let f3 = self.b3.forward(tape, &f2)?.leaky_relu(s);
        Ok(f3.reshape(&[1, f3.numel()])?)
    }
}

/// Extract the modality vector from a full-resolution volume; the half-scale
/// input is formed internally by factor-2 trilinear downsampling.
pub fn extract_modality<E: Element>(
    net: &ModalityEncoder<E>,
    tape: &Tape<E>,
    x: &Volume,
) -> Result<Tensor<E>, NetError> {
    let half = downsample_trilinear(x, 2)?;
    net.forward(tape, &volume_to_tensor(tape, &half))
}
