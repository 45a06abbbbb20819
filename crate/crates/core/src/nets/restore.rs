//! Edge-to-volume restoration machinery: two strided encoders map class maps
//! and edge maps into one shared code space, and a decoder recombines a code
//! with the modality vector through learnable adaptation layers (instance
//! normalization followed by a modality-conditioned channel affine).

use rand_chacha::ChaCha8Rng;

use super::{halved, volume_to_tensor, Conv3dLayer, LinearLayer, NetConfig, NetError};
use crate::autodiff::{Element, ParameterSet, Tape, Tensor};
use crate::vol::Volume;

/// Two halving conv blocks from a single-channel volume to the code grid
/// `[1, code_channels, D/4, H/4, W/4]`; the final layer is linear so codes
/// live in an unconstrained feature space.
pub struct CodeEncoder<E: Element> {
    c1: Conv3dLayer<E>,
    c2: Conv3dLayer<E>,
    slope: E,
}

impl<E: Element> CodeEncoder<E> {
    pub fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &NetConfig,
        dims: (usize, usize, usize),
    ) -> Self {
        let mid = cfg.encoder_mid_channels;
        Self {
            c1: Conv3dLayer::strided(params, rng, &format!("{prefix}.c1"), 1, mid, dims.0),
            c2: Conv3dLayer::strided(
                params,
                rng,
                &format!("{prefix}.c2"),
                mid,
                cfg.code_channels,
                halved(dims.0),
            ),
            slope: E::from_f64(cfg.leaky_slope),
        }
    }

    pub fn forward(&self, tape: &Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>, NetError> {
        let f = self.c1.forward(tape, x)?.leaky_relu(self.slope);
        Ok(self.c2.forward(tape, &f)?)
    }

    pub fn encode_volume(&self, tape: &Tape<E>, v: &Volume) -> Result<Tensor<E>, NetError> {
        self.forward(tape, &volume_to_tensor(tape, v))
    }
}

/// Instance normalization plus a modality-conditioned channel-wise affine:
/// `(1 + fc_gamma(M)) * (F - mean) / sqrt(var + eps) + fc_beta(M)`.
pub struct AdaptationLayer<E: Element> {
    fc_gamma: LinearLayer<E>,
    fc_beta: LinearLayer<E>,
    eps: E,
}

impl<E: Element> AdaptationLayer<E> {
    pub fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        modality_len: usize,
        channels: usize,
        eps: f64,
    ) -> Self {
        Self {
            fc_gamma: LinearLayer::new(params, rng, &format!("{name}.gamma"), modality_len, channels),
            fc_beta: LinearLayer::new(params, rng, &format!("{name}.beta"), modality_len, channels),
            eps: E::from_f64(eps),
        }
    }

    /// Channel-affine coefficients `(1 + gamma, beta)` for a modality vector.
    pub fn coefficients(
        &self,
        tape: &Tape<E>,
        modality: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>), NetError> {
        let gamma = self.fc_gamma.forward(tape, modality)?;
        let beta = self.fc_beta.forward(tape, modality)?;
        Ok((gamma.add_scalar(E::ONE), beta))
    }

    /// Normalize `features` per (sample, channel) and apply the affine.
    pub fn apply(
        &self,
        tape: &Tape<E>,
        features: &Tensor<E>,
        modality: &Tensor<E>,
    ) -> Result<Tensor<E>, NetError> {
        let normed = instance_normalize(features, self.eps)?;
        let (scale, shift) = self.coefficients(tape, modality)?;
        Ok(normed.mul(&scale)?.add(&shift)?)
    }
}

/// `(F - mean) / sqrt(var + eps)` with per-(sample, channel) statistics.
pub fn instance_normalize<E: Element>(features: &Tensor<E>, eps: E) -> Result<Tensor<E>, NetError> {
    let (mean, var) = features.instance_stats()?;
    let denom = var.add_scalar(eps).sqrt();
    Ok(features.sub(&mean)?.div(&denom)?)
}

/// Decoder from the code grid back to a `[1,1,D,H,W]` volume in [0,1]:
/// an adaptation layer on the code, a 1^3 projection, two upsample+conv
/// blocks each followed by an adaptation layer, and a sigmoid head.
pub struct Combiner<E: Element> {
    lal_code: AdaptationLayer<E>,
    proj: Conv3dLayer<E>,
    conv1: Conv3dLayer<E>,
    lal1: AdaptationLayer<E>,
    conv2: Conv3dLayer<E>,
    lal2: AdaptationLayer<E>,
    head: Conv3dLayer<E>,
    slope: E,
}

impl<E: Element> Combiner<E> {
    pub fn new(
        params: &mut ParameterSet<E>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        modality_len: usize,
    ) -> Self {
        let code = cfg.code_channels;
        let [c0, c1, c2] = cfg.decoder_channels;
        let eps = cfg.lal_epsilon;
        Self {
            lal_code: AdaptationLayer::new(params, rng, "rd.lal_code", modality_len, code, eps),
            proj: Conv3dLayer::new(params, rng, "rd.proj", code, c0, 3, 1, 1),
            conv1: Conv3dLayer::new(params, rng, "rd.conv1", c0, c1, 3, 1, 1),
            lal1: AdaptationLayer::new(params, rng, "rd.lal1", modality_len, c1, eps),
            conv2: Conv3dLayer::new(params, rng, "rd.conv2", c1, c2, 3, 1, 1),
            lal2: AdaptationLayer::new(params, rng, "rd.lal2", modality_len, c2, eps),
            head: Conv3dLayer::new(params, rng, "rd.head", c2, 1, 1, 1, 0),
            slope: E::from_f64(cfg.leaky_slope),
        }
    }

    /// Decode `code [1,c_a,d,h,w]` with `modality [1,m]` into a volume tensor.
    pub fn forward(
        &self,
        tape: &Tape<E>,
        code: &Tensor<E>,
        modality: &Tensor<E>,
    ) -> Result<Tensor<E>, NetError> {
        let s = self.slope;
        let f = self.lal_code.apply(tape, code, modality)?;
        let f = self.proj.forward(tape, &f)?.leaky_relu(s);
        let f = self.conv1.forward(tape, &f.upsample_nearest(2)?)?;
        let f = self.lal1.apply(tape, &f, modality)?.leaky_relu(s);
        let f = self.conv2.forward(tape, &f.upsample_nearest(2)?)?;
        let f = self.lal2.apply(tape, &f, modality)?.leaky_relu(s);
        Ok(self.head.forward(tape, &f)?.sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> NetConfig {
        NetConfig {
            encoder_mid_channels: 4,
            code_channels: 6,
            decoder_channels: [4, 3, 2],
            ..NetConfig::default()
        }
    }

    #[test]
    fn encoder_shapes_match_between_class_and_edge_paths() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg();
        let ra = CodeEncoder::new(&mut params, &mut rng, "ra", &c, (8, 8, 8));
        let re = CodeEncoder::new(&mut params, &mut rng, "re", &c, (8, 8, 8));
        let v = Volume::from_fn((8, 8, 8), |d, h, w| ((d + h + w) % 4) as f32 * 0.25);
        let tape: Tape<f64> = Tape::new();
        let ca = ra.encode_volume(&tape, &v).unwrap();
        let ce = re.encode_volume(&tape, &v).unwrap();
        assert_eq!(ca.shape(), &[1, 6, 2, 2, 2]);
        assert_eq!(ca.shape(), ce.shape());
    }

    #[test]
    fn encoder_gradients_flow() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ra = CodeEncoder::new(&mut params, &mut rng, "ra", &cfg(), (8, 8, 8));
        let v = Volume::from_fn((8, 8, 8), |d, _, _| d as f32 * 0.1);
        let tape: Tape<f64> = Tape::new();
        let code = ra.encode_volume(&tape, &v).unwrap();
        code.mul(&code).unwrap().sum_all().backward().unwrap();
        for p in params.iter() {
            assert!(p.borrow().grad.iter().any(|&g| g != 0.0), "{} got no gradient", p.borrow().name);
        }
    }

    #[test]
    fn lal_with_zero_fc_is_pure_instance_norm() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lal = AdaptationLayer::new(&mut params, &mut rng, "t", 3, 1, 1e-5);
        // zero both FC layers
        for p in params.iter() {
            let mut pb = p.borrow_mut();
            for v in pb.values.iter_mut() {
                *v = 0.0;
            }
        }
        let tape: Tape<f64> = Tape::new();
        let f = tape.var(&[1, 1, 1, 1, 2], vec![1.0, 3.0]);
        let m = tape.var(&[1, 3], vec![0.3, -0.2, 0.9]);
        let out = lal.apply(&tape, &f, &m).unwrap().values();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((out[0] + expected).abs() < 1e-12);
        assert!((out[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn lal_closed_form_with_unit_gamma_and_half_beta() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lal = AdaptationLayer::new(&mut params, &mut rng, "t", 2, 1, 1e-5);
        // weights zero, gamma bias 1.0, beta bias 0.5
        for p in params.iter() {
            let mut pb = p.borrow_mut();
            let fill = match pb.name.as_str() {
                "t.gamma.b" => 1.0,
                "t.beta.b" => 0.5,
                _ => 0.0,
            };
            for v in pb.values.iter_mut() {
                *v = fill;
            }
        }
        let tape: Tape<f64> = Tape::new();
        let f = tape.var(&[1, 1, 1, 1, 2], vec![1.0, 3.0]);
        let m = tape.var(&[1, 2], vec![0.0, 0.0]);
        let out = lal.apply(&tape, &f, &m).unwrap().values();
        let unit = 2.0 / (1.0 + 1e-5f64).sqrt();
        assert!((out[0] - (0.5 - unit)).abs() < 1e-12);
        assert!((out[1] - (0.5 + unit)).abs() < 1e-12);
    }

    #[test]
    fn lal_outputs_differ_by_channel_affine_across_modalities() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lal = AdaptationLayer::new(&mut params, &mut rng, "t", 4, 2, 1e-5);
        let tape: Tape<f64> = Tape::new();
        let f_vals: Vec<f64> = (0..2 * 8).map(|i| ((i * 37) % 11) as f64 * 0.13).collect();
        let f = tape.var(&[1, 2, 2, 2, 2], f_vals);
        let m1 = tape.var(&[1, 4], vec![0.1, -0.4, 0.8, 0.2]);
        let m2 = tape.var(&[1, 4], vec![-0.9, 0.3, 0.1, 0.5]);
        let o1 = lal.apply(&tape, &f, &m1).unwrap().values();
        let o2 = lal.apply(&tape, &f, &m2).unwrap().values();
        let (s1, b1) = lal.coefficients(&tape, &m1).unwrap();
        let (s2, b2) = lal.coefficients(&tape, &m2).unwrap();
        let (s1, b1, s2, b2) = (s1.values(), b1.values(), s2.values(), b2.values());
        // o1 = s1/s2 * (o2 - b2) + b1, per channel
        for c in 0..2 {
            let ratio = s1[c] / s2[c];
            for j in 0..8 {
                let i = c * 8 + j;
                let predicted = ratio * (o2[i] - b2[c]) + b1[c];
                assert!((o1[i] - predicted).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalized_core_argmax_ignores_modality() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let lal = AdaptationLayer::new(&mut params, &mut rng, "t", 4, 2, 1e-5);
        let tape: Tape<f64> = Tape::new();
        let mut vals = vec![0.0; 16];
        let mut r = ChaCha8Rng::seed_from_u64(44);
        for v in vals.iter_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let f = tape.var(&[1, 2, 2, 2, 2], vals);
        let m1 = tape.var(&[1, 4], vec![0.4, -0.1, 0.0, 2.0]);
        let m2 = tape.var(&[1, 4], vec![-1.4, 0.9, 0.3, -0.7]);
        let argmax = |out: &[f64], scale: &[f64], shift: &[f64], c: usize| -> usize {
            (0..8)
                .map(|j| (out[c * 8 + j] - shift[c]) / scale[c])
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0
        };
        let o1 = lal.apply(&tape, &f, &m1).unwrap().values();
        let o2 = lal.apply(&tape, &f, &m2).unwrap().values();
        let (s1, b1) = lal.coefficients(&tape, &m1).unwrap();
        let (s2, b2) = lal.coefficients(&tape, &m2).unwrap();
        for c in 0..2 {
            assert_eq!(
                argmax(&o1, &s1.values(), &b1.values(), c),
                argmax(&o2, &s2.values(), &b2.values(), c)
            );
        }
    }

    #[test]
    fn combiner_output_shape_and_range() {
        let mut params: ParameterSet<f64> = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg();
        let rd = Combiner::new(&mut params, &mut rng, &c, 5);
        let tape: Tape<f64> = Tape::new();
        let code = tape.var(&[1, 6, 2, 2, 2], (0..48).map(|i| (i as f64 * 0.37).sin()).collect());
        let m = tape.var(&[1, 5], vec![0.1, 0.2, -0.3, 0.4, 0.0]);
        let out = rd.forward(&tape, &code, &m).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 8, 8]);
        assert!(out.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let out2 = rd.forward(&tape, &code, &m).unwrap();
        assert_eq!(out.values(), out2.values());
    }
}
