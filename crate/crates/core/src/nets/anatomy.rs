//! Anatomy disentanglement: a small encoder-decoder extracts per-voxel class
//! logits, a straight-through one-hot binarizes them, and weighted channel
//! merging collapses the channels into a single multi-class map with values
//! in {0, 1/C, ..., 1} inside the brain mask and exactly 0 outside.

use rand_chacha::ChaCha8Rng;

use super::{volume_to_tensor, Conv3dLayer, NetConfig, NetError};
use crate::autodiff::{Element, ParameterSet, ReduceKind, Tape, Tensor};
use crate::vol::{MaskVolume, Volume};

/// Encoder-decoder with one skip connection mapping a volume to C class logits.
pub struct AnatomyExtractor<E: Element> {
    enc1: Conv3dLayer<E>,
    down: Conv3dLayer<E>,
    mid: Conv3dLayer<E>,
    reduce: Conv3dLayer<E>,
    fuse: Conv3dLayer<E>,
    head: Conv3dLayer<E>,
    slope: E,
    classes: usize,
}

impl<E: Element> AnatomyExtractor<E> {
    /// Build for volumes of extent `dims` (each axis divisible by 2).
    pub fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        dims: (usize, usize, usize),
    ) -> Self {
        let b = cfg.ea_base_channels;
        let c = cfg.anatomy_classes;
        Self {
            enc1: Conv3dLayer::new(params, rng, "ea.enc1", 1, b, 3, 1, 1),
            down: Conv3dLayer::strided(params, rng, "ea.down", b, 2 * b, dims.0),
            mid: Conv3dLayer::new(params, rng, "ea.mid", 2 * b, 2 * b, 3, 1, 1),
            reduce: Conv3dLayer::new(params, rng, "ea.reduce", 2 * b, b, 3, 1, 1),
            fuse: Conv3dLayer::new(params, rng, "ea.fuse", 2 * b, b, 3, 1, 1),
            head: Conv3dLayer::new(params, rng, "ea.head", b, c, 1, 1, 0),
            slope: E::from_f64(cfg.leaky_slope),
            classes: c,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class logits `[1, C, D, H, W]` for a `[1,1,D,H,W]` input.
    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>, NetError> {
        let s = self.slope;
        let e1 = self.enc1.forward(tape, x)?.leaky_relu(s);
        let d = self.down.forward(tape, &e1)?.leaky_relu(s);
        let m = self.mid.forward(tape, &d)?.leaky_relu(s);
        let r = self.reduce.forward(tape, &m)?.leaky_relu(s);
        let up = r.upsample_nearest(2)?;
        let cat = up.concat(&e1, 1)?;
        let f = self.fuse.forward(tape, &cat)?.leaky_relu(s);
        Ok(self.head.forward(tape, &f)?)
    }
}

/// Extract continuous class logits from a volume.
pub fn extract_anatomy<E: Element>(
    net: &AnatomyExtractor<E>,
    tape: &Tape<E>,
    x: &Volume,
) -> Result<Tensor<E>, NetError> {
    net.forward(tape, &volume_to_tensor(tape, x))
}

/// Straight-through one-hot over the channel axis.
///
/// Forward values are exactly the hard one-hot of the softmax argmax (ties to
/// the lowest channel); the backward Jacobian equals softmax's, so gradients
/// reach the logits as if the output were the soft distribution.
pub fn differentiable_one_hot<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>, NetError> {
    Ok(logits.softmax(1)?.hard_one_hot_st(1)?)
}

/// Collapse one-hot channels into a single map: channel i contributes value
/// i/C, then the brain mask zeroes the background. Differentiable through the
/// one-hot input.
pub fn merge_channels<E: Element>(
    one_hot: &Tensor<E>,
    mask: &MaskVolume,
) -> Result<Tensor<E>, NetError> {
    let shape = one_hot.shape().to_vec();
    if shape.len() != 5 {
        return Err(NetError::Config(format!("merge expects [N,C,D,H,W], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let (md, mh, mw) = mask.dims();
    if (shape[2], shape[3], shape[4]) != (md, mh, mw) {
        return Err(NetError::Config(format!(
            "mask dims {:?} vs channels {:?}",
            mask.dims(),
            &shape[2..]
        )));
    }
    let tape = one_hot.tape_handle();
    let weights: Vec<E> = (1..=c)
        .map(|i| E::from_f64(i as f64 / c as f64))
        .collect::<Vec<_>>()
        .repeat(n);
    let wt = tape.constant(&[n, c], weights);
    let weighted = one_hot.mul(&wt)?;
    let merged = weighted.reduce(ReduceKind::Sum, &[1])?.reshape(&[n, 1, md, mh, mw])?;
    let mask_t = volume_to_tensor(&tape, &mask.to_volume());
    Ok(merged.mul(&mask_t)?)
}

/// Full anatomy path: logits -> straight-through one-hot -> merged map, with
/// the mask taken from the input volume (`x > 0`).
pub fn anatomy_map<E: Element>(
    net: &AnatomyExtractor<E>,
    tape: &Tape<E>,
    x: &Volume,
) -> Result<Tensor<E>, NetError> {
    let logits = extract_anatomy(net, tape, x)?;
    let one_hot = differentiable_one_hot(&logits)?;
    merge_channels(&one_hot, &crate::vol::brain_mask(x))
}
