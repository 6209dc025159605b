//! The disentangling network: a 3-D convolutional encoder whose bottleneck is
//! split into foreground, background and motion channels, a motion-driven
//! cross-convolution that carries first-frame foreground features to the last
//! frame, and two frame decoders (the foreground one shared by the first and
//! predicted-last reconstructions).

use super::config::ModelConfig;
use super::params::{Bound, Groups, Parameters, BG_DECODER, ENCODER, FG_DECODER, MOTION};
use crate::autograd::{cross_conv_forward, Tape, Var};
use crate::data::{ClipTensor, MaskVolume};
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, LossReport, LossVars, Reconstructions};
use crate::tensor::{Real, Tensor};

/// Bottleneck splits, each channel-first `[n, T', H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledFeatures<F> {
    pub fg: Tensor<F>,
    pub bg: Tensor<F>,
    pub motion: Tensor<F>,
}

impl<F: Real> DisentangledFeatures<F> {
    /// Channel concatenation of the three splits: the raw bottleneck.
    pub fn concat(&self) -> Tensor<F> {
        Tensor::concat_channels(&[&self.fg, &self.bg, &self.motion]).expect("splits share extents")
    }
}

/// Which extreme bottleneck time slice to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    First,
    Last,
}

/// Per-frame feature slices `[n, 1, H', W']`. Background features are only
/// ever taken for the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<F> {
    pub fg: Tensor<F>,
    pub bg: Option<Tensor<F>>,
}

/// One `k × k` kernel per foreground channel, each of unit L1 mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionKernelSet<F> {
    pub kernels: Tensor<F>,
}

/// Tape handles of an encoding.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub bottleneck: Var,
    pub fg: Var,
    pub bg: Var,
    pub motion: Var,
}

/// Tape handles of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: FeatureVars,
    /// First-frame foreground features before the gradient block.
    pub first_fg: Var,
    pub first_bg: Var,
    pub kernels: Var,
    pub pred_fg_feats: Var,
    pub fg_first: Var,
    pub bg_first: Var,
    pub fg_last: Var,
}

fn conv_named<F: Real>(tape: &mut Tape<F>, bound: &Bound, prefix: &str, i: usize, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.{i}.weight"))?;
    let b = bound.var(&format!("{prefix}.{i}.bias"))?;
    tape.conv(x, w, b)
}

/// Runs the encoder stages on a channel-first clip and returns the raw
/// bottleneck. Every stage but the last is ReLU-activated; the bottleneck
/// itself is linear.
pub fn encoder_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: Var) -> Result<Var> {
    let [t, h, w, c] = cfg.input_dims;
    let got = tape.value(clip).shape().to_vec();
    if got != [c, t, h, w] {
        return Err(Error::Shape(format!(
            "encoder expects a clip of [T, H, W, C] = {:?}, got {:?}",
            cfg.input_dims,
            [got.get(1), got.get(2), got.get(3), got.first()]
        )));
    }
    let mut x = clip;
    let last = cfg.conv_stages.len() - 1;
    for (i, stage) in cfg.conv_stages.iter().enumerate() {
        x = conv_named(tape, bound, ENCODER, i, x)?;
        if i != last {
            x = tape.relu(x);
        }
        let pool = [stage.temporal_pool, stage.spatial_pool, stage.spatial_pool];
        if pool != [1, 1, 1] {
            x = tape.max_pool(x, pool)?;
        }
    }
    Ok(x)
}

pub fn encode_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: Var) -> Result<FeatureVars> {
    let bottleneck = encoder_on(tape, cfg, bound, clip)?;
    let [n_fg, n_bg, n_motion] = cfg.split_sizes;
    Ok(FeatureVars {
        bottleneck,
        fg: tape.channel_slice(bottleneck, 0, n_fg)?,
        bg: tape.channel_slice(bottleneck, n_fg, n_bg)?,
        motion: tape.channel_slice(bottleneck, n_fg + n_bg, n_motion)?,
    })
}

/// Upsample-and-convolve decoder from `[n, 1, H', W']` features to a
/// `[C, 1, H, W]` frame squashed into (-1, 1) by tanh.
pub fn decoder_on<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    bound: &Bound,
    prefix: &str,
    feats: Var,
) -> Result<Var> {
    let [_, hb, wb] = cfg.bottleneck_dims();
    let shape = tape.value(feats).shape().to_vec();
    let want_c = if prefix == BG_DECODER {
        cfg.split_sizes[1]
    } else {
        cfg.split_sizes[0]
    };
    if shape != [want_c, 1, hb, wb] {
        return Err(Error::Shape(format!(
            "{prefix} expects features [{want_c}, 1, {hb}, {wb}], got {shape:?}"
        )));
    }
    let mut x = feats;
    let last = cfg.decoder_channels.len() - 1;
    for i in 0..cfg.decoder_channels.len() {
        x = tape.upsample(x, [1, 2, 2])?;
        x = conv_named(tape, bound, prefix, i, x)?;
        x = if i == last { tape.tanh(x) } else { tape.relu(x) };
    }
    Ok(x)
}

/// Global average pool of the motion split, affine map to `n_fg · k · k`
/// values, reshape to `[n_fg, k, k]`, then unit L1 mass per kernel.
pub fn motion_kernels_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, motion: Var) -> Result<Var> {
    let n_motion = cfg.split_sizes[2];
    if tape.value(motion).shape().first() != Some(&n_motion) {
        return Err(Error::Shape(format!(
            "motion split has shape {:?}, expected {n_motion} channels",
            tape.value(motion).shape()
        )));
    }
    let pooled = tape.global_avg_pool(motion);
    let w = bound.var(&format!("{MOTION}.weight"))?;
    let b = bound.var(&format!("{MOTION}.bias"))?;
    let raw = tape.linear(pooled, w, b)?;
    let n_fg = cfg.split_sizes[0];
    let k = cfg.kernel_size;
    let shaped = tape.reshape(raw, &[n_fg, k, k])?;
    tape.l1_normalize_rows(shaped, n_fg)
}

fn first_last_index(t_prime: usize, which: Which) -> usize {
    match which {
        Which::First => 0,
        Which::Last => t_prime - 1,
    }
}

/// Full forward pass: both first-frame reconstructions plus the last-frame
/// foreground decoded from cross-convolved, gradient-blocked first-frame
/// features.
pub fn forward_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: &ClipTensor) -> Result<ForwardVars> {
    let x = tape.constant(clip.to_channels_first());
    let features = encode_on(tape, cfg, bound, x)?;
    let first_fg = tape.time_slice(features.fg, 0)?;
    let first_bg = tape.time_slice(features.bg, 0)?;
    let kernels = motion_kernels_on(tape, cfg, bound, features.motion)?;
    let blocked = tape.stop_gradient(first_fg);
    let pred_fg_feats = tape.cross_conv(blocked, kernels)?;
    let fg_first = decoder_on(tape, cfg, bound, FG_DECODER, first_fg)?;
    let bg_first = decoder_on(tape, cfg, bound, BG_DECODER, first_bg)?;
    let fg_last = decoder_on(tape, cfg, bound, FG_DECODER, pred_fg_feats)?;
    Ok(ForwardVars {
        features,
        first_fg,
        first_bg,
        kernels,
        pred_fg_feats,
        fg_first,
        bg_first,
        fg_last,
    })
}

/// First foreground slice of the time-reversed clip's encoding, gradient-blocked.
pub fn reversed_target_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: &ClipTensor) -> Result<Var> {
    let x = tape.constant(clip.reversed_time().to_channels_first());
    let feats = encode_on(tape, cfg, bound, x)?;
    let first = tape.time_slice(feats.fg, 0)?;
    Ok(tape.stop_gradient(first))
}

/// Forward pass, reversed-clip target and every loss term on one tape.
pub fn objective_on<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    bound: &Bound,
    clip: &ClipTensor,
    mask: &MaskVolume,
) -> Result<(ForwardVars, Var, LossVars)> {
    let fwd = forward_on(tape, cfg, bound, clip)?;
    let target = reversed_target_on(tape, cfg, bound, clip)?;
    let losses = total_loss_var(
        tape,
        fwd.fg_first,
        fwd.bg_first,
        fwd.fg_last,
        fwd.pred_fg_feats,
        target,
        clip,
        mask,
    )?;
    Ok((fwd, target, losses))
}

/// Gathers parameter gradients by name; parameters no gradient reached get zeros.
pub fn collect_grads<F: Real>(tape: &Tape<F>, bound: &Bound, root: Var) -> Parameters<F> {
    let mut grads = tape.backward(root);
    let mut out = Parameters::new();
    for (name, &var) in bound.iter() {
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
        out.insert(name.clone(), g);
    }
    out
}

/// Per-channel true 2-D convolution of `[n, 1, H, W]` features with a kernel set.
pub fn cross_convolve<F: Real>(fg_first: &Tensor<F>, kernels: &MotionKernelSet<F>) -> Result<Tensor<F>> {
    let xs = fg_first.shape();
    let ks = kernels.kernels.shape();
    if xs.len() != 4 || xs[1] != 1 || ks.len() != 3 || xs[0] != ks[0] {
        return Err(Error::Shape(format!(
            "cross_convolve: features {xs:?} vs kernels {ks:?}"
        )));
    }
    let out = cross_conv_forward(fg_first.data(), kernels.kernels.data(), xs[0], xs[2], xs[3], ks[1]);
    Tensor::from_vec(xs, out)
}

/// Configuration plus parameters of the disentangling network.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleModel<F> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
}

impl<F: Real> DisentangleModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, Groups::DISENTANGLE, seed)?;
        Ok(DisentangleModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config, Groups::DISENTANGLE)?;
        Ok(DisentangleModel { config, params })
    }

    fn frozen(&self) -> (Tape<F>, Bound) {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        (tape, bound)
    }

    /// Raw bottleneck `[channels, T', H', W']`.
    pub fn encode_bottleneck(&self, clip: &ClipTensor) -> Result<Tensor<F>> {
        let (mut tape, bound) = self.frozen();
        let x = tape.constant(clip.to_channels_first());
        let b = encoder_on(&mut tape, &self.config, &bound, x)?;
        Ok(tape.value(b).clone())
    }

    pub fn encode(&self, clip: &ClipTensor) -> Result<DisentangledFeatures<F>> {
        let (mut tape, bound) = self.frozen();
        let x = tape.constant(clip.to_channels_first());
        let f = encode_on(&mut tape, &self.config, &bound, x)?;
        Ok(DisentangledFeatures {
            fg: tape.value(f.fg).clone(),
            bg: tape.value(f.bg).clone(),
            motion: tape.value(f.motion).clone(),
        })
    }

    pub fn select_frame_features(feats: &DisentangledFeatures<F>, which: Which) -> FrameFeatures<F> {
        let t = first_last_index(feats.fg.shape()[1], which);
        FrameFeatures {
            fg: feats.fg.time_slice(t),
            bg: (which == Which::First).then(|| feats.bg.time_slice(t)),
        }
    }

    pub fn motion_to_kernels(&self, motion: &Tensor<F>) -> Result<MotionKernelSet<F>> {
        let (mut tape, bound) = self.frozen();
        let m = tape.constant(motion.clone());
        let k = motion_kernels_on(&mut tape, &self.config, &bound, m)?;
        Ok(MotionKernelSet {
            kernels: tape.value(k).clone(),
        })
    }

    fn decode(&self, prefix: &str, feats: &Tensor<F>) -> Result<Tensor<F>> {
        let (mut tape, bound) = self.frozen();
        let f = tape.constant(feats.clone());
        let out = decoder_on(&mut tape, &self.config, &bound, prefix, f)?;
        Ok(tape.value(out).clone())
    }

    /// `[C, 1, H, W]` foreground frame from `[n_fg, 1, H', W']` features.
    pub fn decode_foreground(&self, feats: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode(FG_DECODER, feats)
    }

    pub fn decode_background(&self, feats: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode(BG_DECODER, feats)
    }

    pub fn forward(&self, clip: &ClipTensor) -> Result<Reconstructions<F>> {
        let (mut tape, bound) = self.frozen();
        let fwd = forward_on(&mut tape, &self.config, &bound, clip)?;
        Ok(Reconstructions {
            fg_first: tape.value(fwd.fg_first).clone(),
            bg_first: tape.value(fwd.bg_first).clone(),
            fg_last: tape.value(fwd.fg_last).clone(),
            pred_fg_feats: tape.value(fwd.pred_fg_feats).clone(),
        })
    }

    /// Pseudo ground truth for the feature loss.
    pub fn encode_reversed_target(&self, clip: &ClipTensor) -> Result<Tensor<F>> {
        let (mut tape, bound) = self.frozen();
        let t = reversed_target_on(&mut tape, &self.config, &bound, clip)?;
        Ok(tape.value(t).clone())
    }

    /// Loss report for one masked clip, no gradients.
    pub fn loss(&self, clip: &ClipTensor, mask: &MaskVolume) -> Result<LossReport> {
        let (mut tape, bound) = self.frozen();
        let (_, _, losses) = objective_on(&mut tape, &self.config, &bound, clip, mask)?;
        Ok(losses.report(&tape))
    }

    /// Loss report and gradient of the total loss for every parameter.
    pub fn gradients(&self, clip: &ClipTensor, mask: &MaskVolume) -> Result<(LossReport, Parameters<F>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let (_, _, losses) = objective_on(&mut tape, &self.config, &bound, clip, mask)?;
        let report = losses.report(&tape);
        Ok((report, collect_grads(&tape, &bound, losses.total)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(dims: [usize; 4], seed: u64) -> ClipTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        ClipTensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
    }

    fn tiny() -> DisentangleModel<f64> {
        DisentangleModel::new(ModelConfig::tiny(3), 5).unwrap()
    }

    #[test]
    fn tiny_shapes() {
        let m = tiny();
        let clip = random_clip([4, 16, 16, 1], 1);
        let f = m.encode(&clip).unwrap();
        assert_eq!(f.fg.shape(), &[2, 1, 4, 4]);
        assert_eq!(f.bg.shape(), &[2, 1, 4, 4]);
        assert_eq!(f.motion.shape(), &[2, 1, 4, 4]);
        assert_eq!(f.concat(), m.encode_bottleneck(&clip).unwrap());
        let first = DisentangleModel::select_frame_features(&f, Which::First);
        let last = DisentangleModel::select_frame_features(&f, Which::Last);
        assert_eq!(first.fg, last.fg);
        assert!(last.bg.is_none());
        let r = m.forward(&clip).unwrap();
        assert_eq!(r.fg_first.shape(), &[1, 1, 16, 16]);
        assert_eq!(r.bg_first.shape(), &[1, 1, 16, 16]);
        assert_eq!(r.fg_last.shape(), &[1, 1, 16, 16]);
        assert_eq!(r.pred_fg_feats.shape(), &[2, 1, 4, 4]);
    }

    #[test]
    fn wrong_clip_dims_name_expected_and_got() {
        let m = tiny();
        let err = m.encode(&random_clip([4, 8, 8, 1], 1)).unwrap_err();
        assert!(err.to_string().contains("[4, 16, 16, 1]"), "{err}");
    }

    #[test]
    fn identity_kernels_at_init_reproduce_first_foreground() {
        let m = tiny();
        let clip = random_clip([4, 16, 16, 1], 2);
        let r = m.forward(&clip).unwrap();
        assert_eq!(r.fg_last, r.fg_first);
        let motion = m.encode(&clip).unwrap().motion;
        let k = m.motion_to_kernels(&motion).unwrap();
        assert_eq!(k.kernels.shape(), &[2, 3, 3]);
        for kernel in k.kernels.data().chunks(9) {
            assert_eq!(kernel, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn kernels_have_unit_mass_after_training_moves_the_projector() {
        let mut m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, t) in m.params.iter_mut() {
            if name.starts_with(MOTION) {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        let motion = m.encode(&random_clip([4, 16, 16, 1], 4)).unwrap().motion;
        let k = m.motion_to_kernels(&motion).unwrap();
        for kernel in k.kernels.data().chunks(9) {
            let mass: f64 = kernel.iter().map(|v| v.abs()).sum();
            assert!((mass - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        let clip = random_clip([4, 16, 16, 1], 6);
        assert_eq!(m.forward(&clip).unwrap(), m.forward(&clip).unwrap());
    }

    #[test]
    fn palindrome_target_equals_forward_first_foreground() {
        let m = tiny();
        let base = random_clip([4, 16, 16, 1], 7);
        let plane = 16 * 16;
        let v = base.values();
        let mut pal = Vec::new();
        for t in [0, 1, 1, 0] {
            pal.extend_from_slice(&v[t * plane..(t + 1) * plane]);
        }
        let clip = ClipTensor::new([4, 16, 16, 1], pal).unwrap();
        let target = m.encode_reversed_target(&clip).unwrap();
        let feats = m.encode(&clip).unwrap();
        assert_eq!(target, feats.fg.time_slice(0));
    }

    #[test]
    fn cross_convolve_rejects_channel_mismatch() {
        let feats = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let k = MotionKernelSet {
            kernels: Tensor::zeros(&[3, 3, 3]),
        };
        assert!(cross_convolve(&feats, &k).is_err());
    }
}
