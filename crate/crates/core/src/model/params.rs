use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ENCODER: &str = "encoder";
pub const FG_DECODER: &str = "fg_decoder";
pub const BG_DECODER: &str = "bg_decoder";
pub const MOTION: &str = "motion";
pub const HEAD: &str = "head";
pub const AE_DECODER: &str = "ae_decoder";

/// Named weight arrays, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

/// Parameters bound to a tape for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<F: Real> Parameters<F> {
    pub fn new() -> Self {
        Parameters {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Parameters whose name starts with `prefix.`.
    pub fn with_prefix(&self, prefix: &str) -> Parameters<F> {
        let dotted = format!("{prefix}.");
        Parameters {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites (or adds) every tensor of `other`.
    pub fn merge(&mut self, other: Parameters<F>) {
        self.tensors.extend(other.tensors);
    }

    /// Puts every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Name → shape map, for structural comparisons.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}

/// Which parameter groups a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Groups {
    pub encoder: bool,
    pub frame_decoders: bool,
    pub head: bool,
    pub autoencoder_decoder: bool,
}

impl Groups {
    pub const DISENTANGLE: Groups = Groups {
        encoder: true,
        frame_decoders: true,
        head: false,
        autoencoder_decoder: false,
    };
    pub const CLASSIFIER: Groups = Groups {
        encoder: true,
        frame_decoders: false,
        head: true,
        autoencoder_decoder: false,
    };
    pub const AUTOENCODER: Groups = Groups {
        encoder: true,
        frame_decoders: false,
        head: false,
        autoencoder_decoder: true,
    };
}

enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Delta(usize, usize),
}

/// Expected `(name, shape, init)` of every parameter of the chosen groups.
fn layout(cfg: &ModelConfig, groups: Groups) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, prefix: &str, i: usize, co: usize, ci: usize, k: [usize; 3]| {
        let fan_in = ci * k.iter().product::<usize>();
        out.push((
            format!("{prefix}.{i}.weight"),
            vec![co, ci, k[0], k[1], k[2]],
            Init::FanIn(fan_in),
        ));
        out.push((format!("{prefix}.{i}.bias"), vec![co], Init::Zeros));
    };
    let c_in = cfg.channels();
    if groups.encoder {
        let mut ci = c_in;
        for (i, s) in cfg.conv_stages.iter().enumerate() {
            conv(&mut out, ENCODER, i, s.out_channels, ci, [3, 3, 3]);
            ci = s.out_channels;
        }
    }
    if groups.frame_decoders {
        for (prefix, first) in [(FG_DECODER, cfg.split_sizes[0]), (BG_DECODER, cfg.split_sizes[1])] {
            let mut ci = first;
            for (i, &co) in cfg.decoder_channels.iter().enumerate() {
                conv(&mut out, prefix, i, co, ci, [1, 3, 3]);
                ci = co;
            }
        }
        let [n_fg, _, n_motion] = cfg.split_sizes;
        let k = cfg.kernel_size;
        out.push((format!("{MOTION}.weight"), vec![n_fg * k * k, n_motion], Init::Zeros));
        out.push((format!("{MOTION}.bias"), vec![n_fg * k * k], Init::Delta(n_fg, k)));
    }
    if groups.head {
        let [t, h, w] = cfg.bottleneck_dims();
        let n_in = cfg.bottleneck_channels() * t * h * w;
        out.push((
            format!("{HEAD}.weight"),
            vec![cfg.num_classes, n_in],
            Init::Uniform(1.0 / (n_in as f64).sqrt()),
        ));
        out.push((format!("{HEAD}.bias"), vec![cfg.num_classes], Init::Zeros));
    }
    if groups.autoencoder_decoder {
        // Mirror of the encoder: stage i undoes encoder stage (n-1-i).
        let n = cfg.conv_stages.len();
        for i in 0..n {
            let src = n - 1 - i;
            let ci = cfg.conv_stages[src].out_channels;
            let co = if src == 0 {
                c_in
            } else {
                cfg.conv_stages[src - 1].out_channels
            };
            conv(&mut out, AE_DECODER, i, co, ci, [3, 3, 3]);
        }
    }
    out
}

impl<F: Real> Parameters<F> {
    /// Freshly initialized parameters: fan-in-scaled uniform convolution
    /// weights, zero biases, and a motion-kernel projector whose zero weight
    /// and centred-delta bias make every kernel the identity at start.
    pub fn init(cfg: &ModelConfig, groups: Groups, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameters::new();
        for (name, shape, init) in layout(cfg, groups) {
            let n: usize = shape.iter().product();
            let data: Vec<F> = match init {
                Init::FanIn(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| F::from_f64_lossy(rng.random_range(-bound..bound))).collect()
                }
                Init::Uniform(bound) => (0..n)
                    .map(|_| F::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect(),
                Init::Zeros => vec![F::zero(); n],
                Init::Delta(kernels, k) => {
                    let mut d = vec![F::zero(); n];
                    let centre = (k / 2) * k + k / 2;
                    for c in 0..kernels {
                        d[c * k * k + centre] = F::one();
                    }
                    d
                }
            };
            p.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(p)
    }

    /// Checks that exactly the expected names and shapes are present.
    pub fn validate_against(&self, cfg: &ModelConfig, groups: Groups) -> Result<()> {
        let expected: BTreeMap<String, Vec<usize>> =
            layout(cfg, groups).into_iter().map(|(n, s, _)| (n, s)).collect();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_is_small_enough_for_gradient_checks() {
        let p = Parameters::<f64>::init(&ModelConfig::tiny(3), Groups::DISENTANGLE, 0).unwrap();
        assert!(p.num_scalars() <= 5000, "{}", p.num_scalars());
        p.validate_against(&ModelConfig::tiny(3), Groups::DISENTANGLE).unwrap();
    }

    #[test]
    fn decoders_are_disjoint_and_encoder_names_shared() {
        let cfg = ModelConfig::tiny(3);
        let d = Parameters::<f32>::init(&cfg, Groups::DISENTANGLE, 1).unwrap();
        let a = Parameters::<f32>::init(&cfg, Groups::AUTOENCODER, 1).unwrap();
        let c = Parameters::<f32>::init(&cfg, Groups::CLASSIFIER, 1).unwrap();
        let fg: Vec<_> = d.with_prefix(FG_DECODER).names().cloned().collect();
        let bg: Vec<_> = d.with_prefix(BG_DECODER).names().cloned().collect();
        assert!(!fg.is_empty() && fg.iter().all(|n| !bg.contains(n)));
        let enc = d.with_prefix(ENCODER).shapes();
        assert_eq!(enc, a.with_prefix(ENCODER).shapes());
        assert_eq!(enc, c.with_prefix(ENCODER).shapes());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::tiny(3);
        assert_eq!(
            Parameters::<f32>::init(&cfg, Groups::DISENTANGLE, 9).unwrap(),
            Parameters::<f32>::init(&cfg, Groups::DISENTANGLE, 9).unwrap()
        );
    }

    #[test]
    fn validation_catches_missing_and_misshapen() {
        let cfg = ModelConfig::tiny(3);
        let mut p = Parameters::<f32>::init(&cfg, Groups::CLASSIFIER, 0).unwrap();
        p.insert("head.bias", Tensor::zeros(&[4]));
        assert!(p.validate_against(&cfg, Groups::CLASSIFIER).is_err());
        let p = Parameters::<f32>::init(&cfg, Groups::CLASSIFIER, 0).unwrap();
        assert!(p.validate_against(&cfg, Groups::DISENTANGLE).is_err());
    }
}
