use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Projection weights are stored `input × output` and applied as `xᵀW + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub attn_ln_gamma: Tensor<T>,
    pub attn_ln_beta: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
    pub mlp_ln_gamma: Tensor<T>,
    pub mlp_ln_beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub word: Tensor<T>,
    pub position: Tensor<T>,
    pub token_type: Tensor<T>,
    pub emb_ln_gamma: Tensor<T>,
    pub emb_ln_beta: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
}

/// Every tensor name the config implies, with its expected shape, in
/// archive naming order.
pub fn tensor_specs(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![
        ("embeddings.word".to_string(), vec![c.vocab_size, c.d_e]),
        (
            "embeddings.position".to_string(),
            vec![c.max_position, c.d_e],
        ),
        (
            "embeddings.type".to_string(),
            vec![c.type_vocab_size, c.d_e],
        ),
        ("embeddings.ln.gamma".to_string(), vec![c.d_e]),
        ("embeddings.ln.beta".to_string(), vec![c.d_e]),
    ];
    for l in 0..c.n_layers {
        let p = format!("layer.{l}");
        v.extend([
            (format!("{p}.attn.q.weight"), vec![c.d_e, c.qk_width()]),
            (format!("{p}.attn.q.bias"), vec![c.qk_width()]),
            (format!("{p}.attn.k.weight"), vec![c.d_e, c.qk_width()]),
            (format!("{p}.attn.k.bias"), vec![c.qk_width()]),
            (format!("{p}.attn.v.weight"), vec![c.d_e, c.v_width()]),
            (format!("{p}.attn.v.bias"), vec![c.v_width()]),
            (format!("{p}.attn.out.weight"), vec![c.v_width(), c.d_e]),
            (format!("{p}.attn.out.bias"), vec![c.d_e]),
            (format!("{p}.attn.ln.gamma"), vec![c.d_e]),
            (format!("{p}.attn.ln.beta"), vec![c.d_e]),
            (format!("{p}.mlp.fc1.weight"), vec![c.d_e, c.d_ff]),
            (format!("{p}.mlp.fc1.bias"), vec![c.d_ff]),
            (format!("{p}.mlp.fc2.weight"), vec![c.d_ff, c.d_e]),
            (format!("{p}.mlp.fc2.bias"), vec![c.d_e]),
            (format!("{p}.mlp.ln.gamma"), vec![c.d_e]),
            (format!("{p}.mlp.ln.beta"), vec![c.d_e]),
        ]);
    }
    v
}

impl<T: Scalar> ModelWeights<T> {
    /// Builds weights from an archive, widening to `T`. Missing tensors and
    /// shape mismatches are errors; unexpected extra tensors are logged.
    pub fn from_archive(archive: &Archive, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(config);
        let missing: Vec<&str> = specs
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !archive.contains(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Load(format!(
                "archive is missing tensors: {}",
                missing.join(", ")
            )));
        }
        for extra in Self::unexpected_tensors(archive, config) {
            log::warn!("ignoring unexpected tensor {extra:?} in weight archive");
        }
        let mut tensors = specs
            .iter()
            .map(|(n, s)| archive.get_shaped::<T>(n, s))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || tensors.next().expect("one tensor per expected name");
        let (word, position, token_type, emb_ln_gamma, emb_ln_beta) =
            (next(), next(), next(), next(), next());
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                q_weight: next(),
                q_bias: next(),
                k_weight: next(),
                k_bias: next(),
                v_weight: next(),
                v_bias: next(),
                out_weight: next(),
                out_bias: next(),
                attn_ln_gamma: next(),
                attn_ln_beta: next(),
                fc1_weight: next(),
                fc1_bias: next(),
                fc2_weight: next(),
                fc2_bias: next(),
                mlp_ln_gamma: next(),
                mlp_ln_beta: next(),
            })
            .collect();
        Ok(Self {
            word,
            position,
            token_type,
            emb_ln_gamma,
            emb_ln_beta,
            layers,
        })
    }

    pub fn unexpected_tensors(archive: &Archive, config: &EncoderConfig) -> Vec<String> {
        let specs = tensor_specs(config);
        archive
            .names()
            .filter(|n| !specs.iter().any(|(s, _)| s == n))
            .map(str::to_string)
            .collect()
    }

    /// Tensors in archive naming order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![
            &self.word,
            &self.position,
            &self.token_type,
            &self.emb_ln_gamma,
            &self.emb_ln_beta,
        ];
        for l in &self.layers {
            v.extend([
                &l.q_weight,
                &l.q_bias,
                &l.k_weight,
                &l.k_bias,
                &l.v_weight,
                &l.v_bias,
                &l.out_weight,
                &l.out_bias,
                &l.attn_ln_gamma,
                &l.attn_ln_beta,
                &l.fc1_weight,
                &l.fc1_bias,
                &l.fc2_weight,
                &l.fc2_bias,
                &l.mlp_ln_gamma,
                &l.mlp_ln_beta,
            ]);
        }
        v
    }

    pub fn to_archive(&self, config: &EncoderConfig) -> Archive {
        let mut a = Archive::new();
        for ((name, _), t) in tensor_specs(config).iter().zip(self.tensors()) {
            a.insert(name.clone(), t);
        }
        a
    }

    /// Random weights: matrices and embedding tables drawn from `N(0, std²)`,
    /// biases and layer-norm betas zero, layer-norm gammas one.
    pub fn random(config: &EncoderConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Input(format!("bad standard deviation {std}: {e}")))?;
        let mut tensors = Vec::new();
        for (name, shape) in tensor_specs(config) {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("gamma") {
                vec![T::one(); numel]
            } else if name.ends_with("bias") || name.ends_with("beta") {
                vec![T::zero(); numel]
            } else {
                (0..numel).map(|_| T::lit(normal.sample(rng))).collect()
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut a = Archive::new();
        for (n, t) in &tensors {
            a.insert(n.clone(), t);
        }
        Self::from_archive(&a, config)
    }

    /// Like [`ModelWeights::random`] but every tensor, including biases and
    /// layer-norm parameters, is perturbed so no parameter is trivial.
    pub fn random_dense(config: &EncoderConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::Input(format!("bad standard deviation {std}: {e}")))?;
        let base = Self::random(config, std, rng)?;
        let mut a = Archive::new();
        for ((name, shape), t) in tensor_specs(config).iter().zip(base.tensors()) {
            if name.ends_with("bias") || name.ends_with("gamma") || name.ends_with("beta") {
                let data: Vec<T> = t
                    .data()
                    .iter()
                    .map(|&v| v + T::lit(normal.sample(rng)))
                    .collect();
                a.insert(name.clone(), &Tensor::new(shape.clone(), data)?);
            } else {
                a.insert(name.clone(), t);
            }
        }
        Self::from_archive(&a, config)
    }
}

/// Loads an archive from disk and builds weights for `config`.
pub fn load_weights<T: Scalar>(
    path: impl AsRef<Path>,
    config: &EncoderConfig,
) -> Result<ModelWeights<T>> {
    let archive = Archive::read(path)?;
    ModelWeights::from_archive(&archive, config)
}
