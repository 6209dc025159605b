//! Plain clip autoencoder used as a pretraining baseline. It shares the
//! encoder layout of the disentangling network, so its encoder transfers to
//! the classifier the same way.

use super::config::ModelConfig;
use super::network::{collect_grads, encoder_on};
use super::params::{Bound, Groups, Parameters, AE_DECODER};
use crate::autograd::{Tape, Var};
use crate::data::ClipTensor;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Encoder then its mirror: each decoder stage undoes one encoder stage's
/// pooling by nearest upsampling and applies a 3×3×3 convolution.
pub fn reconstruct_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: Var) -> Result<Var> {
    let mut x = encoder_on(tape, cfg, bound, clip)?;
    let n = cfg.conv_stages.len();
    for i in 0..n {
        let stage = cfg.conv_stages[n - 1 - i];
        let factor = [stage.temporal_pool, stage.spatial_pool, stage.spatial_pool];
        if factor != [1, 1, 1] {
            x = tape.upsample(x, factor)?;
        }
        let w = bound.var(&format!("{AE_DECODER}.{i}.weight"))?;
        let b = bound.var(&format!("{AE_DECODER}.{i}.bias"))?;
        x = tape.conv(x, w, b)?;
        x = if i == n - 1 { tape.tanh(x) } else { tape.relu(x) };
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<F> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
}

impl<F: Real> Autoencoder<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, Groups::AUTOENCODER, seed)?;
        Ok(Autoencoder { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config, Groups::AUTOENCODER)?;
        Ok(Autoencoder { config, params })
    }

    /// Channel-first reconstruction `[C, T, H, W]`.
    pub fn reconstruct(&self, clip: &ClipTensor) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(clip.to_channels_first());
        let r = reconstruct_on(&mut tape, &self.config, &bound, x)?;
        Ok(tape.value(r).clone())
    }

    /// Mean absolute reconstruction error and its parameter gradients.
    pub fn gradients(&self, clip: &ClipTensor) -> Result<(f64, Parameters<F>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let target: Tensor<F> = clip.to_channels_first();
        let x = tape.constant(target.clone());
        let r = reconstruct_on(&mut tape, &self.config, &bound, x)?;
        let loss = tape.mean_abs(r, target)?;
        let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
        Ok((value, collect_grads(&tape, &bound, loss)))
    }

    pub fn loss(&self, clip: &ClipTensor) -> Result<f64> {
        let target: Tensor<F> = clip.to_channels_first();
        let r = self.reconstruct(clip)?;
        let n = F::from_usize(r.len()).unwrap();
        let s = r.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum::<F>() / n;
        Ok(s.to_f64().unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_matches_input_shape() {
        let ae = Autoencoder::<f32>::new(ModelConfig::tiny(2), 0).unwrap();
        let clip = ClipTensor::new([4, 16, 16, 1], vec![0.1; 1024]).unwrap();
        assert_eq!(ae.reconstruct(&clip).unwrap().shape(), &[1, 4, 16, 16]);
        let (l, g) = ae.gradients(&clip).unwrap();
        assert!((l - ae.loss(&clip).unwrap()).abs() < 1e-6);
        assert_eq!(g.shapes(), ae.params.shapes());
    }
}
