//! Forward passes of the joint prefix/suffix transformer.
//!
//! Every layer runs one attention over `[prefix ‖ suffix]` tokens. Prefix
//! tokens only see prefix keys, suffix tokens see both, so the prefix
//! stream never depends on state or action inputs and its per-layer keys
//! and values can be cached across diffusion steps. The two token groups
//! are processed by separate parameter sets ("experts") at every layer.

use std::collections::{BTreeMap, BTreeSet};

use super::config::PolicyConfig;
use super::params::{layer_param_name, Expert, PolicyParams};
use crate::error::{Error, Result};
use crate::tensor::{concat, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// Observation in token space, as consumed by the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedObservation<F> {
    /// `[n_vis_tokens, d_model]`
    pub vis_tokens: Tensor<F>,
    /// `[n_lang_tokens, d_model]`
    pub lang_tokens: Tensor<F>,
    /// `[state_dim]`
    pub state: Tensor<F>,
}

impl<F: Scalar> TokenizedObservation<F> {
    pub fn check(&self, cfg: &PolicyConfig) -> Result<()> {
        let want_vis = [cfg.n_vis_tokens, cfg.d_model];
        if self.vis_tokens.shape() != want_vis {
            return Err(Error::shape("observation vis_tokens", &want_vis, self.vis_tokens.shape()));
        }
        let want_lang = [cfg.n_lang_tokens, cfg.d_model];
        if self.lang_tokens.shape() != want_lang {
            return Err(Error::shape("observation lang_tokens", &want_lang, self.lang_tokens.shape()));
        }
        if self.state.shape() != [cfg.state_dim] {
            return Err(Error::shape("observation state", &[cfg.state_dim], self.state.shape()));
        }
        Ok(())
    }
}

/// A batch of observations stacked along a leading axis.
#[derive(Debug, Clone)]
pub struct ObsBatch<F> {
    /// `[B, prefix_len, d_model]`
    pub prefix: Tensor<F>,
    /// `[B, state_dim]`
    pub state: Tensor<F>,
}

impl<F: Scalar> ObsBatch<F> {
    pub fn stack(obs: &[&TokenizedObservation<F>], cfg: &PolicyConfig) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::config("empty observation batch"));
        }
        let p = cfg.prefix_len();
        let d = cfg.d_model;
        let mut prefix = Vec::with_capacity(obs.len() * p * d);
        let mut state = Vec::with_capacity(obs.len() * cfg.state_dim);
        for o in obs {
            o.check(cfg)?;
            prefix.extend_from_slice(o.vis_tokens.data());
            prefix.extend_from_slice(o.lang_tokens.data());
            state.extend_from_slice(o.state.data());
        }
        Ok(Self {
            prefix: Tensor::new(&[obs.len(), p, d], prefix)?,
            state: Tensor::new(&[obs.len(), cfg.state_dim], state)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.prefix.shape()[0]
    }
}

/// Set of layers replaced by the identity at inference time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerSkip {
    layers: BTreeSet<usize>,
}

impl LayerSkip {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Validates a skip set against a model depth. At least one layer must
/// remain.
pub fn skip_layers(cfg: &PolicyConfig, layers: impl IntoIterator<Item = usize>) -> Result<LayerSkip> {
    let layers: BTreeSet<usize> = layers.into_iter().collect();
    if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Index {
            what: "skipped layer",
            index: bad,
            len: cfg.n_layers,
        });
    }
    if layers.len() == cfg.n_layers {
        return Err(Error::config("cannot skip every layer"));
    }
    Ok(LayerSkip { layers })
}

/// Options for a tape-level forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture_layer: Option<usize>,
    pub skip: LayerSkip,
    /// Record prefix and suffix hidden states at every layer boundary.
    pub collect_hidden: bool,
}

impl ForwardOptions {
    pub fn capture(layer: usize) -> Self {
        Self {
            capture_layer: Some(layer),
            ..Self::default()
        }
    }
}

/// Parameters registered on a tape.
pub struct BoundParams<'t, F> {
    tape: &'t Tape<F>,
    vars: BTreeMap<String, Var<'t, F>>,
    config: PolicyConfig,
}

impl<'t, F: Scalar> BoundParams<'t, F> {
    /// Registers every parameter; `trainable` ones receive gradients.
    pub fn bind(tape: &'t Tape<F>, params: &PolicyParams<F>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self {
            tape,
            vars,
            config: params.config().clone(),
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    fn layer(&self, layer: usize, expert: Expert, tensor: &str) -> Result<Var<'t, F>> {
        self.get(&layer_param_name(layer, expert, tensor))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, F>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Attention probabilities captured at one layer of a tape-level pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCapture<'t, F> {
    pub layer: usize,
    /// Prefix-query rows over prefix keys, `[B*h, P, P]`. Absent in cached
    /// passes.
    pub prefix_probs: Option<Var<'t, F>>,
    /// Suffix-query rows over all keys, `[B*h, S, P+S]`.
    pub suffix_probs: Var<'t, F>,
    /// Suffix-query rows renormalised over prefix keys only, `[B*h, S, P]`.
    pub suffix_to_prefix: Var<'t, F>,
}

impl<'t, F: Scalar> AttentionCapture<'t, F> {
    /// Action-token rows of [`Self::suffix_to_prefix`], `[B*h, H, P]`.
    pub fn action_to_prefix(&self, cfg: &PolicyConfig) -> Result<Var<'t, F>> {
        self.suffix_to_prefix
            .narrow(1, cfg.n_state_tokens, cfg.chunk_len)
    }
}

/// Result of a tape-level forward pass.
pub struct ForwardTrace<'t, F> {
    /// `[B, H, D]`
    pub velocity: Var<'t, F>,
    pub attention: Option<AttentionCapture<'t, F>>,
    /// Per-layer prefix keys/values, `None` for skipped layers.
    pub kv: Vec<Option<(Var<'t, F>, Var<'t, F>)>>,
    /// Prefix states `[B, P, d]` at each of the `n_layers + 1` boundaries.
    pub hidden_prefix: Vec<Tensor<F>>,
    /// Suffix states `[B, S, d]` at each of the `n_layers + 1` boundaries.
    pub hidden_suffix: Vec<Tensor<F>>,
}

/// Sinusoidal features of `1000 * tau`, `[B, width]`.
pub fn tau_features<F: Scalar>(tau: &[f64], width: usize) -> Tensor<F> {
    let half = width / 2;
    let mut out = Vec::with_capacity(tau.len() * width);
    for &t in tau {
        let x = 1000.0 * t;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).sin(), (x * f).cos())).unzip();
        out.extend(sin.into_iter().chain(cos).map(F::of));
    }
    Tensor::from_parts(vec![tau.len(), width], out)
}

fn check_tau(tau: &[f64]) -> Result<()> {
    if let Some(bad) = tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain {
            op: "forward",
            msg: format!("tau {bad} outside [0, 1]"),
        });
    }
    Ok(())
}

struct Dims {
    batch: usize,
    heads: usize,
    d_head: usize,
    d_model: usize,
}

impl Dims {
    fn new(cfg: &PolicyConfig, batch: usize) -> Self {
        Self {
            batch,
            heads: cfg.n_heads,
            d_head: cfg.d_head,
            d_model: cfg.d_model,
        }
    }

    /// `[B, T, d] · w -> [B*h, T, dh]`
    fn heads<'t, F: Scalar>(&self, x: Var<'t, F>, w: Var<'t, F>, tokens: usize) -> Result<Var<'t, F>> {
        x.matmul(w)?
            .reshape(&[self.batch, tokens, self.heads, self.d_head])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[self.batch * self.heads, tokens, self.d_head])
    }

    /// `[B*h, T, dh] -> [B, T, d]`
    fn merge<'t, F: Scalar>(&self, x: Var<'t, F>, tokens: usize) -> Result<Var<'t, F>> {
        x.reshape(&[self.batch, self.heads, tokens, self.d_head])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[self.batch, tokens, self.d_model])
    }

    fn scale<F: Scalar>(&self) -> F {
        F::of(1.0 / (self.d_head as f64).sqrt())
    }
}

struct Stack<'b, 't, F> {
    params: &'b BoundParams<'t, F>,
    dims: Dims,
}

struct SuffixAttention<'t, F> {
    probs: Var<'t, F>,
    to_prefix: Option<Var<'t, F>>,
}

impl<'b, 't, F: Scalar> Stack<'b, 't, F> {
    fn mlp(&self, x: Var<'t, F>, layer: usize, expert: Expert) -> Result<Var<'t, F>> {
        let p = |t| self.params.layer(layer, expert, t);
        let h = x.rms_norm(p("mlp_norm")?, F::of(NORM_EPS))?;
        let h = h.matmul(p("w1")?)?.add_bias(p("b1")?)?.gelu();
        let h = h.matmul(p("w2")?)?.add_bias(p("b2")?)?;
        x.add(h)
    }

    /// Queries, keys and values of the prefix stream at `layer`.
    fn prefix_qkv(
        &self,
        x: Var<'t, F>,
        layer: usize,
    ) -> Result<(Var<'t, F>, Var<'t, F>, Var<'t, F>)> {
        let p = |t| self.params.layer(layer, Expert::Prefix, t);
        let tokens = x.shape()[1];
        let h = x.rms_norm(p("attn_norm")?, F::of(NORM_EPS))?;
        Ok((
            self.dims.heads(h, p("wq")?, tokens)?,
            self.dims.heads(h, p("wk")?, tokens)?,
            self.dims.heads(h, p("wv")?, tokens)?,
        ))
    }

    /// Attention and MLP update of the prefix stream (prefix keys only).
    fn prefix_update(
        &self,
        x: Var<'t, F>,
        qkv: (Var<'t, F>, Var<'t, F>, Var<'t, F>),
        layer: usize,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let (q, k, v) = qkv;
        let tokens = x.shape()[1];
        let probs = q.bmm(k, false, true)?.scale(self.dims.scale()).softmax()?;
        let out = self.dims.merge(probs.bmm(v, false, false)?, tokens)?;
        let out = out.matmul(self.params.layer(layer, Expert::Prefix, "wo")?)?;
        let x = self.mlp(x.add(out)?, layer, Expert::Prefix)?;
        Ok((x, probs))
    }

    /// Attention (over cached prefix and own keys) and MLP update of the
    /// suffix stream.
    fn suffix_update(
        &self,
        x: Var<'t, F>,
        prefix_kv: (Var<'t, F>, Var<'t, F>),
        layer: usize,
        capture: bool,
    ) -> Result<(Var<'t, F>, SuffixAttention<'t, F>)> {
        let p = |t| self.params.layer(layer, Expert::Suffix, t);
        let tokens = x.shape()[1];
        let prefix_len = prefix_kv.0.shape()[1];
        let h = x.rms_norm(p("attn_norm")?, F::of(NORM_EPS))?;
        let q = self.dims.heads(h, p("wq")?, tokens)?;
        let k = self.dims.heads(h, p("wk")?, tokens)?;
        let v = self.dims.heads(h, p("wv")?, tokens)?;
        let keys = Var::concat(&[prefix_kv.0, k], 1)?;
        let values = Var::concat(&[prefix_kv.1, v], 1)?;
        let logits = q.bmm(keys, false, true)?.scale(self.dims.scale());
        let probs = logits.softmax()?;
        let to_prefix = if capture {
            Some(logits.narrow(2, 0, prefix_len)?.softmax()?)
        } else {
            None
        };
        let out = self.dims.merge(probs.bmm(values, false, false)?, tokens)?;
        let x = self.mlp(x.add(out.matmul(p("wo")?)?)?, layer, Expert::Suffix)?;
        Ok((x, SuffixAttention { probs, to_prefix }))
    }

    fn embed_prefix(&self, obs: &ObsBatch<F>) -> Result<Var<'t, F>> {
        let cfg = self.params.config();
        let tape = self.params.get("embed.prefix_pos")?.tape;
        let pos = self
            .params
            .get("embed.prefix_pos")?
            .embedding(&(0..cfg.prefix_len()).collect::<Vec<_>>())?;
        tape.constant(obs.prefix.clone()).add_bias(pos)
    }

    fn embed_suffix(&self, state: &Tensor<F>, actions: Var<'t, F>, tau: &[f64]) -> Result<Var<'t, F>> {
        let cfg = self.params.config();
        let batch = self.dims.batch;
        let d = cfg.d_model;
        let tape = actions.tape;
        let want = [batch, cfg.chunk_len, cfg.action_dim];
        if actions.shape() != want {
            return Err(Error::shape("noisy actions", &want, &actions.shape()));
        }
        if state.shape() != [batch, cfg.state_dim] {
            return Err(Error::shape("state", &[batch, cfg.state_dim], state.shape()));
        }
        let act = actions
            .matmul(self.params.get("action_in.weight")?)?
            .add_bias(self.params.get("action_in.bias")?)?;
        let tokens = if cfg.n_state_tokens > 0 {
            let st = tape
                .constant(state.clone())
                .matmul(self.params.get("state_in.weight")?)?
                .add_bias(self.params.get("state_in.bias")?)?
                .reshape(&[batch, cfg.n_state_tokens, d])?;
            Var::concat(&[st, act], 1)?
        } else {
            act
        };
        let pos = self
            .params
            .get("embed.suffix_pos")?
            .embedding(&(0..cfg.suffix_len()).collect::<Vec<_>>())?;
        let temb = tape
            .constant(tau_features(tau, cfg.tau_embed))
            .matmul(self.params.get("tau_in.weight")?)?
            .add_bias(self.params.get("tau_in.bias")?)?
            .reshape(&[batch, 1, d])?
            .repeat_axis(1, cfg.suffix_len())?;
        tokens.add_bias(pos)?.add(temb)
    }

    fn head(&self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let cfg = self.params.config();
        x.rms_norm(self.params.get("final_norm")?, F::of(NORM_EPS))?
            .narrow(1, cfg.n_state_tokens, cfg.chunk_len)?
            .matmul(self.params.get("action_out.weight")?)?
            .add_bias(self.params.get("action_out.bias")?)
    }
}

fn check_capture(cfg: &PolicyConfig, capture: Option<usize>, skip: &LayerSkip) -> Result<()> {
    if let Some(layer) = capture {
        if layer >= cfg.n_layers {
            return Err(Error::Index {
                what: "capture layer",
                index: layer,
                len: cfg.n_layers,
            });
        }
        if skip.contains(layer) {
            return Err(Error::config(format!("capture layer {layer} is skipped")));
        }
    }
    Ok(())
}

/// Full forward pass on a tape. `actions` is `[B, H, D]`, `tau` has one
/// entry per batch element.
pub fn forward_on_tape<'t, F: Scalar>(
    params: &BoundParams<'t, F>,
    obs: &ObsBatch<F>,
    actions: Var<'t, F>,
    tau: &[f64],
    opts: &ForwardOptions,
) -> Result<ForwardTrace<'t, F>> {
    let cfg = params.config().clone();
    let batch = obs.batch();
    if tau.len() != batch {
        return Err(Error::shape("tau", &[batch], &[tau.len()]));
    }
    check_tau(tau)?;
    check_capture(&cfg, opts.capture_layer, &opts.skip)?;
    if let Some(&bad) = opts.skip.layers.iter().find(|&&l| l >= cfg.n_layers) {
        return Err(Error::Index {
            what: "skipped layer",
            index: bad,
            len: cfg.n_layers,
        });
    }
    let stack = Stack {
        params,
        dims: Dims::new(&cfg, batch),
    };
    let mut xp = stack.embed_prefix(obs)?;
    let mut xs = stack.embed_suffix(&obs.state, actions, tau)?;
    let last_active = (0..cfg.n_layers).rev().find(|l| !opts.skip.contains(*l));

    let mut trace = ForwardTrace {
        velocity: xs,
        attention: None,
        kv: Vec::with_capacity(cfg.n_layers),
        hidden_prefix: Vec::new(),
        hidden_suffix: Vec::new(),
    };
    if opts.collect_hidden {
        trace.hidden_prefix.push(xp.value());
        trace.hidden_suffix.push(xs.value());
    }
    for layer in 0..cfg.n_layers {
        if opts.skip.contains(layer) {
            trace.kv.push(None);
        } else {
            let capture = opts.capture_layer == Some(layer);
            let (q, k, v) = stack.prefix_qkv(xp, layer)?;
            let mut prefix_probs = None;
            if opts.collect_hidden || capture || Some(layer) != last_active {
                let (next, probs) = stack.prefix_update(xp, (q, k, v), layer)?;
                xp = next;
                prefix_probs = Some(probs);
            }
            let (next, attn) = stack.suffix_update(xs, (k, v), layer, capture)?;
            xs = next;
            if capture {
                trace.attention = Some(AttentionCapture {
                    layer,
                    prefix_probs,
                    suffix_probs: attn.probs,
                    suffix_to_prefix: attn.to_prefix.expect("captured"),
                });
            }
            trace.kv.push(Some((k, v)));
        }
        if opts.collect_hidden {
            trace.hidden_prefix.push(xp.value());
            trace.hidden_suffix.push(xs.value());
        }
    }
    trace.velocity = stack.head(xs)?;
    Ok(trace)
}

/// Cached prefix keys and values for one layer, `[B*h, P, dh]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<F> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
}

/// Per-layer prefix keys/values for a batch of observations. Immutable
/// once built; skipped layers hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<F> {
    layers: Vec<Option<LayerKv<F>>>,
    batch: usize,
}

impl<F: Scalar> KVCache<F> {
    pub fn layers(&self) -> &[Option<LayerKv<F>>] {
        &self.layers
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn skip(&self) -> LayerSkip {
        LayerSkip {
            layers: (0..self.layers.len()).filter(|&l| self.layers[l].is_none()).collect(),
        }
    }

    fn check(&self, cfg: &PolicyConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Cache(format!(
                "cache has {} layers, model has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let want = [self.batch * cfg.n_heads, cfg.prefix_len(), cfg.d_head];
        for kv in self.layers.iter().flatten() {
            if kv.keys.shape() != want || kv.values.shape() != want {
                return Err(Error::Cache(format!(
                    "expected [B*h, P, dh] = {want:?}, found {:?}",
                    kv.keys.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tensor-level attention record for action distillation and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<F> {
    pub layer_index: usize,
    /// Suffix-query rows over prefix keys: `[n_heads, S, P]` for a single
    /// observation, `[B, n_heads, S, P]` for a batch.
    pub suffix_to_prefix: Tensor<F>,
    n_state_tokens: usize,
    chunk_len: usize,
}

impl<F: Scalar> AttentionRecord<F> {
    /// Rows belonging to action-token queries, `[.., n_heads, H, P]`.
    pub fn action_rows(&self) -> Tensor<F> {
        let axis = self.suffix_to_prefix.rank() - 2;
        self.suffix_to_prefix
            .narrow(axis, self.n_state_tokens, self.chunk_len)
            .expect("record shape is consistent")
    }
}

fn attention_record<F: Scalar>(
    cfg: &PolicyConfig,
    capture: &AttentionCapture<'_, F>,
    batch: usize,
) -> Result<AttentionRecord<F>> {
    let s = cfg.suffix_len();
    let p = cfg.prefix_len();
    let value = capture.suffix_to_prefix.value();
    let shaped = if batch == 1 {
        value.reshape(&[cfg.n_heads, s, p])?
    } else {
        value.reshape(&[batch, cfg.n_heads, s, p])?
    };
    Ok(AttentionRecord {
        layer_index: capture.layer,
        suffix_to_prefix: shaped,
        n_state_tokens: cfg.n_state_tokens,
        chunk_len: cfg.chunk_len,
    })
}

/// Output of a single-observation forward pass.
#[derive(Debug, Clone)]
pub struct PolicyOutput<F> {
    /// `[H, D]`
    pub velocity: Tensor<F>,
    pub attention: Option<AttentionRecord<F>>,
    pub cache: KVCache<F>,
}

fn stacked_actions<F: Scalar>(cfg: &PolicyConfig, a_tau: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
    let want = [batch, cfg.chunk_len, cfg.action_dim];
    if a_tau.shape() == want {
        return Ok(a_tau.clone());
    }
    if batch == 1 && a_tau.shape() == [cfg.chunk_len, cfg.action_dim] {
        return a_tau.reshape(&want);
    }
    Err(Error::shape("noisy actions", &want, a_tau.shape()))
}

impl<F: Scalar> PolicyParams<F> {
    /// Velocity prediction `v(a_tau, o, tau)` for one observation.
    pub fn forward(
        &self,
        obs: &TokenizedObservation<F>,
        a_tau: &Tensor<F>,
        tau: f64,
        capture_layer: Option<usize>,
    ) -> Result<PolicyOutput<F>> {
        let cfg = self.config();
        let batch = ObsBatch::stack(&[obs], cfg)?;
        let tape = Tape::inference();
        let bound = BoundParams::bind(&tape, self, false);
        let actions = tape.constant(stacked_actions(cfg, a_tau, 1)?);
        let opts = ForwardOptions {
            capture_layer,
            ..ForwardOptions::default()
        };
        let trace = forward_on_tape(&bound, &batch, actions, &[tau], &opts)?;
        let attention = trace
            .attention
            .as_ref()
            .map(|c| attention_record(cfg, c, 1))
            .transpose()?;
        let cache = KVCache {
            layers: trace
                .kv
                .iter()
                .map(|kv| {
                    kv.map(|(k, v)| LayerKv {
                        keys: k.value(),
                        values: v.value(),
                    })
                })
                .collect(),
            batch: 1,
        };
        Ok(PolicyOutput {
            velocity: trace.velocity.value().reshape(&[cfg.chunk_len, cfg.action_dim])?,
            attention,
            cache,
        })
    }

    pub fn build_cache(&self, obs: &TokenizedObservation<F>) -> Result<KVCache<F>> {
        let batch = ObsBatch::stack(&[obs], self.config())?;
        self.build_cache_batch(&batch, &LayerSkip::none())
    }

    /// Runs the prefix stack once and stores per-layer keys and values.
    pub fn build_cache_batch(&self, obs: &ObsBatch<F>, skip: &LayerSkip) -> Result<KVCache<F>> {
        let cfg = self.config();
        if let Some(bad) = skip.layers().find(|&l| l >= cfg.n_layers) {
            return Err(Error::Index {
                what: "skipped layer",
                index: bad,
                len: cfg.n_layers,
            });
        }
        let tape = Tape::inference();
        let bound = BoundParams::bind(&tape, self, false);
        let stack = Stack {
            params: &bound,
            dims: Dims::new(cfg, obs.batch()),
        };
        let mut xp = stack.embed_prefix(obs)?;
        let last_active = (0..cfg.n_layers).rev().find(|l| !skip.contains(*l));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            if skip.contains(layer) {
                layers.push(None);
                continue;
            }
            let (q, k, v) = stack.prefix_qkv(xp, layer)?;
            if Some(layer) != last_active {
                xp = stack.prefix_update(xp, (q, k, v), layer)?.0;
            }
            layers.push(Some(LayerKv {
                keys: k.value(),
                values: v.value(),
            }));
        }
        Ok(KVCache {
            layers,
            batch: obs.batch(),
        })
    }

    /// Suffix-only pass reusing cached prefix keys/values.
    pub fn forward_cached(
        &self,
        cache: &KVCache<F>,
        state: &Tensor<F>,
        a_tau: &Tensor<F>,
        tau: f64,
        capture_layer: Option<usize>,
    ) -> Result<(Tensor<F>, Option<AttentionRecord<F>>)> {
        let cfg = self.config();
        let state = state.reshape(&[1, state.len()])?;
        let a = stacked_actions(cfg, a_tau, 1)?;
        let (v, rec) = self.forward_cached_batch(cache, &state, &a, &[tau], capture_layer)?;
        Ok((v.reshape(&[cfg.chunk_len, cfg.action_dim])?, rec))
    }

    /// Batched suffix-only pass; `state` is `[B, state_dim]`, `a_tau` is
    /// `[B, H, D]`.
    pub fn forward_cached_batch(
        &self,
        cache: &KVCache<F>,
        state: &Tensor<F>,
        a_tau: &Tensor<F>,
        tau: &[f64],
        capture_layer: Option<usize>,
    ) -> Result<(Tensor<F>, Option<AttentionRecord<F>>)> {
        let cfg = self.config();
        cache.check(cfg)?;
        let batch = cache.batch;
        if tau.len() != batch {
            return Err(Error::Cache(format!(
                "cache built for batch {batch}, called with {}",
                tau.len()
            )));
        }
        check_tau(tau)?;
        check_capture(cfg, capture_layer, &cache.skip())?;
        let tape = Tape::inference();
        let bound = BoundParams::bind(&tape, self, false);
        let stack = Stack {
            params: &bound,
            dims: Dims::new(cfg, batch),
        };
        let actions = tape.constant(stacked_actions(cfg, a_tau, batch)?);
        let mut xs = stack.embed_suffix(state, actions, tau)?;
        let mut record = None;
        for (layer, kv) in cache.layers.iter().enumerate() {
            let Some(kv) = kv else { continue };
            let capture = capture_layer == Some(layer);
            let prefix_kv = (tape.constant(kv.keys.clone()), tape.constant(kv.values.clone()));
            let (next, attn) = stack.suffix_update(xs, prefix_kv, layer, capture)?;
            xs = next;
            if capture {
                let cap = AttentionCapture {
                    layer,
                    prefix_probs: None,
                    suffix_probs: attn.probs,
                    suffix_to_prefix: attn.to_prefix.expect("captured"),
                };
                record = Some(attention_record(cfg, &cap, batch)?);
            }
        }
        let velocity = stack.head(xs)?.value();
        Ok((velocity, record))
    }
}

/// Concatenates per-observation prefix tensors `[B_i, P, d]` into one batch.
pub fn concat_batches<F: Scalar>(batches: &[&ObsBatch<F>]) -> Result<ObsBatch<F>> {
    let prefixes: Vec<&Tensor<F>> = batches.iter().map(|b| &b.prefix).collect();
    let states: Vec<&Tensor<F>> = batches.iter().map(|b| &b.state).collect();
    Ok(ObsBatch {
        prefix: concat(&prefixes, 0)?,
        state: concat(&states, 0)?,
    })
}
