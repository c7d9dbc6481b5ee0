use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// One convolution of the layer list, with its optional normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    pub bias: bool,
    pub zero_init: bool,
}

impl ConvSpec {
    fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            batch_norm: true,
            bias: false,
            zero_init: false,
        }
    }

    /// Plain conv with bias, no normalization or activation.
    fn head(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            batch_norm: false,
            bias: true,
            ..Self::new(name, cin, cout, k)
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.weight_shape().numel();
        if self.bias {
            n += self.out_channels;
        }
        if self.batch_norm {
            n += 2 * self.out_channels;
        }
        n
    }
}

/// Feature-net convolutions in execution order.
pub fn feature_convs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let f = cfg.feature_channels;
    let mut v = vec![ConvSpec::new("feature.conv0", cfg.in_channels, f, 3)];
    for i in 0..cfg.dilations.len() {
        v.push(ConvSpec::new(format!("feature.dil{i}"), f, f, 3));
    }
    for (i, b) in cfg.spp.iter().enumerate() {
        v.push(ConvSpec::new(format!("feature.spp{i}"), f, b.channels, 1));
    }
    let fused = f + cfg.spp.iter().map(|b| b.channels).sum::<usize>();
    v.push(ConvSpec::new("feature.fuse", fused, cfg.fusion_channels, 3));
    v.push(ConvSpec::head("feature.out", cfg.fusion_channels, f, 1));
    v
}

/// Decoder output widths, mirroring the encoder (e.g. 128 -> 96 -> 64 -> 48 -> 48).
pub fn decoder_channels(cfg: &ModelConfig) -> [usize; 4] {
    let c = cfg.matching_channels;
    [c[2], c[1], c[0], c[0]]
}

/// Matching-net convolutions in execution order.
pub fn matching_convs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let c = cfg.matching_channels;
    let input = 2 * cfg.feature_channels;
    let mut v = Vec::new();
    let mut cin = input;
    for (i, &ch) in c.iter().enumerate() {
        v.push(ConvSpec::new(format!("matching.enc{i}.down"), cin, ch, 3));
        v.push(ConvSpec::new(format!("matching.enc{i}.conv"), ch, ch, 3));
        cin = ch;
    }
    let skips = [c[2], c[1], c[0], input];
    for (j, (&out, &skip)) in decoder_channels(cfg).iter().zip(&skips).enumerate() {
        v.push(ConvSpec::new(format!("matching.dec{j}"), cin + skip, out, 3));
        cin = out;
    }
    v.push(ConvSpec::head("matching.out", cin, 1, 3));
    v
}

/// Refine-net convolutions in execution order.
pub fn refine_convs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let r = cfg.refine_channels;
    let mut v = vec![ConvSpec::new("refine.in", cfg.in_channels + 2, r, 3)];
    for i in 0..cfg.refine_dilations.len() {
        v.push(ConvSpec::new(format!("refine.block{i}.conv1"), r, r, 3));
        v.push(ConvSpec::new(format!("refine.block{i}.conv2"), r, r, 3));
    }
    v.push(ConvSpec {
        zero_init: true,
        ..ConvSpec::head("refine.out", r, 1, 3)
    });
    v
}

pub fn all_convs(cfg: &ModelConfig) -> Vec<ConvSpec> {
    let mut v = feature_convs(cfg);
    v.extend(matching_convs(cfg));
    v.extend(refine_convs(cfg));
    v
}

/// Trainable parameters plus batch-norm running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<S> {
    pub params: BTreeMap<String, Tensor<S>>,
    pub buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelWeights<S> {
    /// Fan-in-scaled uniform conv weights, zero biases, unit/zero batch-norm
    /// affine terms, and a zero-initialized refine head.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in all_convs(cfg) {
            let shape = spec.weight_shape();
            let weight = if spec.zero_init {
                Tensor::zeros(shape)
            } else {
                let fan_in = spec.in_channels * spec.kernel * spec.kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
            };
            params.insert(format!("{}.weight", spec.name), weight);
            let vec_shape = Shape::new(spec.out_channels, 1, 1, 1);
            if spec.bias {
                params.insert(format!("{}.bias", spec.name), Tensor::zeros(vec_shape));
            }
            if spec.batch_norm {
                params.insert(format!("{}.bn.gamma", spec.name), Tensor::full(vec_shape, S::ONE));
                params.insert(format!("{}.bn.beta", spec.name), Tensor::zeros(vec_shape));
                buffers.insert(format!("{}.bn.running_mean", spec.name), Tensor::zeros(vec_shape));
                buffers.insert(format!("{}.bn.running_var", spec.name), Tensor::full(vec_shape, S::ONE));
            }
        }
        Ok(ModelWeights { params, buffers })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing buffer `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        ModelWeights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that names and shapes are exactly those implied by `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelWeights::<S>::init(cfg, 0)?;
        for (kind, have, want) in [
            ("parameter", &self.params, &expected.params),
            ("buffer", &self.buffers, &expected.buffers),
        ] {
            for (name, t) in want {
                match have.get(name) {
                    None => {
                        return Err(Error::ParameterMismatch {
                            name: name.clone(),
                            reason: format!("{kind} missing"),
                        })
                    }
                    Some(h) if h.shape() != t.shape() => {
                        return Err(Error::ParameterMismatch {
                            name: name.clone(),
                            reason: format!("shape {} but config expects {}", h.shape(), t.shape()),
                        })
                    }
                    _ => {}
                }
            }
            if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::ParameterMismatch {
                    name: extra.clone(),
                    reason: format!("unexpected {kind} for this config"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_net_has_eight_convolutions() {
        assert_eq!(feature_convs(&ModelConfig::full(3, 192)).len(), 8);
        assert_eq!(feature_convs(&ModelConfig::tiny(1, 24)).len(), 8);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny(1, 24);
        let a = ModelWeights::<f32>::init(&cfg, 3).unwrap();
        let b = ModelWeights::<f32>::init(&cfg, 3).unwrap();
        let c = ModelWeights::<f32>::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params["refine.out.weight"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_independent_of_disparity() {
        let a = ModelWeights::<f32>::init(&ModelConfig::tiny(1, 24), 0).unwrap();
        let b = ModelWeights::<f32>::init(&ModelConfig::tiny(1, 192), 0).unwrap();
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn mismatch_names_parameter() {
        let w = ModelWeights::<f32>::init(&ModelConfig::tiny(1, 24), 0).unwrap();
        let err = w.check_against(&ModelConfig::tiny(3, 24)).unwrap_err();
        match err {
            Error::ParameterMismatch { name, .. } => assert_eq!(name, "feature.conv0.weight"),
            other => panic!("unexpected {other}"),
        }
    }
}
