//! Action classifier: the shared encoder followed by a softmax layer over the
//! flattened bottleneck.

use super::config::ModelConfig;
use super::network::encoder_on;
use super::params::{Bound, Groups, Parameters, ENCODER, HEAD};
use crate::autograd::{softmax, Tape, Var};
use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub fn logits_on<F: Real>(tape: &mut Tape<F>, cfg: &ModelConfig, bound: &Bound, clip: &ClipTensor) -> Result<Var> {
    let x = tape.constant(clip.to_channels_first());
    let b = encoder_on(tape, cfg, bound, x)?;
    let w = bound.var(&format!("{HEAD}.weight"))?;
    let bias = bound.var(&format!("{HEAD}.bias"))?;
    tape.linear(b, w, bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
}

impl<F: Real> Classifier<F> {
    /// Every weight, encoder included, freshly initialized from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, Groups::CLASSIFIER, seed)?;
        Ok(Classifier { config, params })
    }

    /// Copies the `encoder.*` tensors of a pretrained network (disentangling
    /// or autoencoder) and initializes a fresh head from `seed`.
    pub fn from_encoder(config: ModelConfig, pretrained: &Parameters<F>, seed: u64) -> Result<Self> {
        let mut params = Parameters::init(&config, Groups::CLASSIFIER, seed)?;
        let encoder = pretrained.with_prefix(ENCODER);
        if encoder.is_empty() {
            return Err(Error::Checkpoint("pretrained parameters contain no encoder".into()));
        }
        params.merge(encoder);
        params.validate_against(&config, Groups::CLASSIFIER)?;
        Ok(Classifier { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        params.validate_against(&config, Groups::CLASSIFIER)?;
        Ok(Classifier { config, params })
    }

    pub fn logits(&self, clip: &ClipTensor) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let l = logits_on(&mut tape, &self.config, &bound, clip)?;
        Ok(tape.value(l).data().to_vec())
    }

    /// Class probabilities.
    pub fn classify(&self, clip: &ClipTensor) -> Result<Vec<F>> {
        Ok(softmax(&self.logits(clip)?))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, clip: &ClipTensor) -> Result<usize> {
        Ok(argmax(&self.logits(clip)?))
    }

    /// Cross-entropy and its gradient for every parameter.
    pub fn gradients(&self, clip: &ClipTensor, label: usize) -> Result<(f64, Parameters<F>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let l = logits_on(&mut tape, &self.config, &bound, clip)?;
        let loss = tape.softmax_xent(l, label)?;
        let value = tape.value(loss).item().to_f64().unwrap_or(f64::NAN);
        Ok((value, super::network::collect_grads(&tape, &bound, loss)))
    }
}

/// Index of the largest value, lowest index on ties. NaN never wins.
pub fn argmax<F: Real>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}
