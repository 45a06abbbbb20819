//! The five small 3D networks behind the pipeline: an anatomy extractor and a
//! modality encoder that disentangle a volume, an anatomy encoder and an edge
//! restorer that map class maps / edge maps into a shared code space, and a
//! combiner that decodes a code plus modality vector back into a volume.
//!
//! Architectures are deliberately compact and fully configurable; strided
//! blocks pick a 4^3 kernel on even extents and 3^3 on odd ones so every
//! stage halves exactly (rounding up) and shapes stay integral.

pub mod anatomy;
pub mod modality;
pub mod restore;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::param::ParamRef;
use crate::autodiff::{Element, ParameterSet, Tape, Tensor, TensorError};
use crate::vol::{VolError, Volume};

#[derive(Error, Debug)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error("bad network configuration: {0}")]
    Config(String),
}

/// Hyperparameters of all five networks.
///
/// Defaults are desk-scale; `modality_channels = 256` restores the
/// paper-scale modality width.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Tissue-class count C of the anatomy map.
    pub anatomy_classes: usize,
    /// Base channel width of the anatomy extractor's encoder-decoder.
    pub ea_base_channels: usize,
    /// Channel width c of the modality code before flattening (divisible by 4).
    pub modality_channels: usize,
    /// Channel width of the shared anatomical code space.
    pub code_channels: usize,
    /// Mid width of the two-block anatomy/edge encoders.
    pub encoder_mid_channels: usize,
    /// Combiner widths: [entry projection, first block, second block].
    pub decoder_channels: [usize; 3],
    /// Negative slope of every leaky ReLU.
    pub leaky_slope: f64,
    /// Variance floor inside the adaptation layers.
    pub lal_epsilon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            anatomy_classes: 3,
            ea_base_channels: 8,
            modality_channels: 32,
            code_channels: 64,
            encoder_mid_channels: 16,
            decoder_channels: [16, 8, 8],
            leaky_slope: 0.01,
            lal_epsilon: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.anatomy_classes < 2 {
            return Err(NetError::Config("anatomy_classes must be at least 2".into()));
        }
        if self.modality_channels % 4 != 0 || self.modality_channels == 0 {
            return Err(NetError::Config("modality_channels must be a positive multiple of 4".into()));
        }
        if self.ea_base_channels == 0 || self.code_channels == 0 || self.encoder_mid_channels == 0 {
            return Err(NetError::Config("channel widths must be positive".into()));
        }
        if self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(NetError::Config("decoder channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform init in [-sqrt(1/fan_in), sqrt(1/fan_in)].
fn init_values<E: Element>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<E> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect()
}

/// One 3D convolution with owned weight and bias parameters.
pub(crate) struct Conv3dLayer<E: Element> {
    w: ParamRef<E>,
    b: ParamRef<E>,
    stride: usize,
    padding: usize,
}

impl<E: Element> Conv3dLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let w = params.register(
            format!("{name}.w"),
            vec![cout, cin, k, k, k],
            init_values(rng, cout * fan_in, fan_in),
        );
        let b = params.register(format!("{name}.b"), vec![cout], vec![E::ZERO; cout]);
        Self { w, b, stride, padding }
    }

    /// Halving block: kernel 4 on even input extent, 3 on odd, padding 1.
    pub(crate) fn strided(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        in_spatial: usize,
    ) -> Self {
        let k = if in_spatial % 2 == 0 { 4 } else { 3 };
        Self::new(params, rng, name, cin, cout, k, 2, 1)
    }

    pub(crate) fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        x.conv3d(&tape.param(&self.w), &tape.param(&self.b), self.stride, self.padding)
    }
}

/// Fully connected layer.
pub(crate) struct LinearLayer<E: Element> {
    w: ParamRef<E>,
    b: ParamRef<E>,
}

impl<E: Element> LinearLayer<E> {
    pub(crate) fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            vec![out_features, in_features],
            init_values(rng, out_features * in_features, in_features),
        );
        let b = params.register(format!("{name}.b"), vec![out_features], vec![E::ZERO; out_features]);
        Self { w, b }
    }

    pub(crate) fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        x.linear(&tape.param(&self.w), &tape.param(&self.b))
    }
}

/// Halved spatial extent of a strided block (exact for even, rounds up for odd).
pub(crate) fn halved(s: usize) -> usize {
    s.div_ceil(2)
}

/// The five jointly trained networks plus their shared parameter registry.
///
/// Construction order (and therefore parameter/checkpoint order) is fixed:
/// anatomy extractor, modality encoder, map encoder, edge restorer, combiner.
pub struct Models<E: Element> {
    pub params: ParameterSet<E>,
    pub anatomy: anatomy::AnatomyExtractor<E>,
    pub modality: modality::ModalityEncoder<E>,
    pub map_encoder: restore::CodeEncoder<E>,
    pub edge_restorer: restore::CodeEncoder<E>,
    pub combiner: restore::Combiner<E>,
    pub config: NetConfig,
    pub dims: (usize, usize, usize),
}

impl<E: Element> Models<E> {
    /// Build freshly initialized models for volumes of extent `dims`
    /// (every axis divisible by 4); `seed` fixes the initialization.
    pub fn new(cfg: &NetConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self, NetError> {
        use rand::SeedableRng;
        cfg.validate()?;
        if dims.0 % 4 != 0 || dims.1 % 4 != 0 || dims.2 % 4 != 0 {
            return Err(NetError::Config(format!("dims {dims:?} must be divisible by 4")));
        }
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anatomy = anatomy::AnatomyExtractor::new(&mut params, &mut rng, cfg, dims);
        let modality = modality::ModalityEncoder::new(&mut params, &mut rng, cfg, dims);
        let map_encoder = restore::CodeEncoder::new(&mut params, &mut rng, "ra", cfg, dims);
        let edge_restorer = restore::CodeEncoder::new(&mut params, &mut rng, "re", cfg, dims);
        let combiner = restore::Combiner::new(&mut params, &mut rng, cfg, modality.vector_len());
        Ok(Self {
            params,
            anatomy,
            modality,
            map_encoder,
            edge_restorer,
            combiner,
            config: cfg.clone(),
            dims,
        })
    }

    /// Length m of the modality vector for this configuration.
    pub fn modality_len(&self) -> usize {
        self.modality.vector_len()
    }

    /// A zero modality vector (the modality-reuse ablation).
    pub fn zero_modality(&self, tape: &Tape<E>) -> Tensor<E> {
        tape.zeros(&[1, self.modality_len()])
    }
}

/// Lift a volume onto the tape as a constant `[1,1,D,H,W]` tensor.
pub fn volume_to_tensor<E: Element>(tape: &Tape<E>, v: &Volume) -> Tensor<E> {
    let (d, h, w) = v.dims();
    let values = v.voxels().iter().map(|&x| E::from_f64(x as f64)).collect();
    tape.constant(&[1, 1, d, h, w], values)
}

/// Read a `[1,1,D,H,W]` tensor back into a volume.
pub fn tensor_to_volume<E: Element>(t: &Tensor<E>) -> Result<Volume, NetError> {
    let s = t.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(NetError::Config(format!("tensor shape {s:?} is not a [1,1,D,H,W] volume")));
    }
    let values: Vec<f32> = t.values().iter().map(|&x| x.to_f64() as f32).collect();
    Ok(Volume::new((s[2], s[3], s[4]), values)?)
}
