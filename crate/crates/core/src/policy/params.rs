use std::collections::BTreeMap;

use super::config::PolicyConfig;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Which of the two per-layer parameter sets a token is routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expert {
    /// Vision-language tokens.
    Prefix,
    /// State and noisy action tokens.
    Suffix,
}

impl Expert {
    pub fn as_str(self) -> &'static str {
        match self {
            Expert::Prefix => "prefix",
            Expert::Suffix => "suffix",
        }
    }
}

/// Per-layer, per-expert tensor suffixes.
pub const LAYER_TENSORS: [&str; 10] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "b1", "w2", "b2",
];

pub fn layer_param_name(layer: usize, expert: Expert, tensor: &str) -> String {
    format!("layers.{layer}.{}.{tensor}", expert.as_str())
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Every parameter name with its shape and initialiser, in a fixed order.
fn layout(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let proj = Init::Normal(1.0 / (d as f64).sqrt());
    let mut out = vec![
        ("embed.prefix_pos".to_string(), vec![cfg.prefix_len(), d], proj),
        ("embed.suffix_pos".to_string(), vec![cfg.suffix_len(), d], proj),
        (
            "state_in.weight".to_string(),
            vec![cfg.state_dim, cfg.n_state_tokens * d],
            Init::Normal(1.0 / (cfg.state_dim.max(1) as f64).sqrt()),
        ),
        ("state_in.bias".to_string(), vec![cfg.n_state_tokens * d], Init::Zeros),
        (
            "action_in.weight".to_string(),
            vec![cfg.action_dim, d],
            Init::Normal(1.0 / (cfg.action_dim as f64).sqrt()),
        ),
        ("action_in.bias".to_string(), vec![d], Init::Zeros),
        (
            "tau_in.weight".to_string(),
            vec![cfg.tau_embed, d],
            Init::Normal(1.0 / (cfg.tau_embed as f64).sqrt()),
        ),
        ("tau_in.bias".to_string(), vec![d], Init::Zeros),
    ];
    for layer in 0..cfg.n_layers {
        for expert in [Expert::Prefix, Expert::Suffix] {
            let name = |t: &str| layer_param_name(layer, expert, t);
            out.push((name("attn_norm"), vec![d], Init::Ones));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((name(w), vec![d, d], proj));
            }
            out.push((name("mlp_norm"), vec![d], Init::Ones));
            out.push((name("w1"), vec![d, cfg.d_ff], proj));
            out.push((name("b1"), vec![cfg.d_ff], Init::Zeros));
            out.push((
                name("w2"),
                vec![cfg.d_ff, d],
                Init::Normal(1.0 / (cfg.d_ff as f64).sqrt()),
            ));
            out.push((name("b2"), vec![d], Init::Zeros));
        }
    }
    out.push(("final_norm".to_string(), vec![d], Init::Ones));
    out.push(("action_out.weight".to_string(), vec![d, cfg.action_dim], proj));
    out.push(("action_out.bias".to_string(), vec![cfg.action_dim], Init::Zeros));
    out
}

/// Names and shapes of all parameters implied by `cfg`.
pub fn param_shapes(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Full named parameter set of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<F> {
    config: PolicyConfig,
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> PolicyParams<F> {
    /// Gaussian projections scaled by `1/sqrt(fan_in)`, unit norm gains and
    /// zero biases. Deterministic in `rng`.
    pub fn init(config: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Normal(std) => Tensor::randn(&shape, std, rng),
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Every tensor zero, norm gains included.
    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Builds a parameter set from named tensors, checking the name set and
    /// every shape against `config`.
    pub fn from_tensors(config: PolicyConfig, tensors: BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Format(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape("PolicyParams::from_tensors", shape, t.shape()))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("PolicyParams::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> PolicyParams<G> {
        PolicyParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}
