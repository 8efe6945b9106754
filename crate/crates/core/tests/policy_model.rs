use shallowpi_core::policy::{
    forward_on_tape, layer_param_name, skip_layers, BoundParams, Expert, ForwardOptions,
    LayerSkip, ObsBatch, PolicyConfig, PolicyParams, TokenizedObservation,
};
use shallowpi_core::{Error, Rng, Scalar, Tape, Tensor};

fn small_config(n_layers: usize) -> PolicyConfig {
    PolicyConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_ff: 32,
        n_vis_tokens: 5,
        n_lang_tokens: 1,
        n_state_tokens: 1,
        state_dim: 2,
        chunk_len: 4,
        action_dim: 2,
        tau_embed: 8,
        codebook_seed: 0,
    }
}

fn random_obs<F: Scalar>(cfg: &PolicyConfig, rng: &mut Rng) -> TokenizedObservation<F> {
    TokenizedObservation {
        vis_tokens: Tensor::randn(&[cfg.n_vis_tokens, cfg.d_model], 1.0, rng),
        lang_tokens: Tensor::randn(&[cfg.n_lang_tokens, cfg.d_model], 1.0, rng),
        state: Tensor::randn(&[cfg.state_dim], 1.0, rng),
    }
}

fn random_actions<F: Scalar>(cfg: &PolicyConfig, rng: &mut Rng) -> Tensor<F> {
    Tensor::randn(&[cfg.chunk_len, cfg.action_dim], 1.0, rng)
}

#[test]
fn zero_weights_give_zero_velocity() {
    let cfg = small_config(2);
    let params = PolicyParams::<f32>::zeros(&cfg).unwrap();
    let mut rng = Rng::new(1, 0);
    let obs = random_obs(&cfg, &mut rng);
    let out = params
        .forward(&obs, &random_actions(&cfg, &mut rng), 0.3, None)
        .unwrap();
    assert_eq!(out.velocity.shape(), &[4, 2]);
    assert!(out.velocity.data().iter().all(|&v| v == 0.0));
}

#[test]
fn prefix_states_ignore_suffix_inputs() {
    let cfg = small_config(3);
    let mut rng = Rng::new(2, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let hidden = |obs: &TokenizedObservation<f32>, a: Tensor<f32>, tau: f64| {
        let tape = Tape::inference();
        let bound = BoundParams::bind(&tape, &params, false);
        let batch = ObsBatch::stack(&[obs], &cfg).unwrap();
        let a = tape.constant(a.reshape(&[1, 4, 2]).unwrap());
        let opts = ForwardOptions {
            collect_hidden: true,
            ..Default::default()
        };
        let trace = forward_on_tape(&bound, &batch, a, &[tau], &opts).unwrap();
        (trace.hidden_prefix, trace.hidden_suffix)
    };
    let base = hidden(&obs, random_actions(&cfg, &mut rng), 0.1);
    let mut other_obs = obs.clone();
    other_obs.state = Tensor::randn(&[2], 5.0, &mut rng);
    let other = hidden(&other_obs, random_actions(&cfg, &mut rng), 0.9);
    assert_eq!(base.0.len(), cfg.n_layers + 1);
    for (a, b) in base.0.iter().zip(&other.0) {
        assert!(a.bitwise_eq(b));
    }
    assert!(!base.1[1].bitwise_eq(&other.1[1]));
}

#[test]
fn cached_forward_matches_full_forward() {
    let cfg = small_config(3);
    let mut rng = Rng::new(3, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let cache = params.build_cache(&obs).unwrap();
    for step in 0..10 {
        let tau = step as f64 / 10.0;
        let a = random_actions(&cfg, &mut rng);
        let full = params.forward(&obs, &a, tau, None).unwrap();
        let (cached, _) = params.forward_cached(&cache, &obs.state, &a, tau, None).unwrap();
        assert!(full.velocity.max_abs_diff(&cached).unwrap() < 1e-5);
    }
}

#[test]
fn single_step_is_exact_at_f64() {
    let cfg = small_config(2);
    let mut rng = Rng::new(4, 0);
    let params = PolicyParams::<f64>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f64>(&cfg, &mut rng);
    let a = random_actions(&cfg, &mut rng);
    let full = params.forward(&obs, &a, 0.5, Some(1)).unwrap();
    let cache = params.build_cache(&obs).unwrap();
    assert_eq!(cache, full.cache);
    let (cached, rec) = params.forward_cached(&cache, &obs.state, &a, 0.5, Some(1)).unwrap();
    assert!(cached.bitwise_eq(&full.velocity));
    assert_eq!(rec.unwrap(), full.attention.unwrap());
}

#[test]
fn tau_reaches_the_suffix() {
    let cfg = small_config(2);
    let mut rng = Rng::new(5, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let cache = params.build_cache(&obs).unwrap();
    let a = random_actions(&cfg, &mut rng);
    let (v0, _) = params.forward_cached(&cache, &obs.state, &a, 0.0, None).unwrap();
    let (v1, _) = params.forward_cached(&cache, &obs.state, &a, 1.0, None).unwrap();
    assert!(v0.max_abs_diff(&v1).unwrap() > 1e-4);
}

#[test]
fn cache_shapes_and_sensitivity() {
    let cfg = small_config(2);
    let mut rng = Rng::new(6, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let cache = params.build_cache(&obs).unwrap();
    for kv in cache.layers() {
        let kv = kv.as_ref().unwrap();
        assert_eq!(kv.keys.shape(), &[2, 6, 8]);
        assert_eq!(kv.values.shape(), &[2, 6, 8]);
    }
    let mut changed = obs.clone();
    changed.vis_tokens.data_mut()[3] += 0.5;
    assert_ne!(params.build_cache(&changed).unwrap(), cache);
}

#[test]
fn cache_does_not_depend_on_chunk_len() {
    let long = small_config(2);
    let short = PolicyConfig {
        chunk_len: 2,
        ..long.clone()
    };
    let mut rng = Rng::new(7, 0);
    let p_long = PolicyParams::<f32>::init(&long, &mut rng).unwrap();
    let mut p_short = PolicyParams::<f32>::zeros(&short).unwrap();
    let names: Vec<String> = p_short.names().map(str::to_string).collect();
    for name in names {
        let src = p_long.get(&name).unwrap();
        let value = if name == "embed.suffix_pos" {
            src.narrow(0, 0, short.suffix_len()).unwrap()
        } else {
            src.clone()
        };
        p_short.set(&name, value).unwrap();
    }
    let obs = random_obs::<f32>(&long, &mut rng);
    assert_eq!(p_long.build_cache(&obs).unwrap(), p_short.build_cache(&obs).unwrap());
}

#[test]
fn cache_mismatch_is_reported() {
    let cfg = small_config(2);
    let mut rng = Rng::new(8, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let deeper = PolicyParams::<f32>::init(&small_config(3), &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let cache = params.build_cache(&obs).unwrap();
    let err = deeper
        .forward_cached(&cache, &obs.state, &random_actions(&cfg, &mut rng), 0.2, None)
        .unwrap_err();
    assert!(matches!(err, Error::Cache(_)));
}

#[test]
fn attention_record_shape_and_normalisation() {
    let cfg = small_config(3);
    let mut rng = Rng::new(9, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let out = params
        .forward(&obs, &random_actions(&cfg, &mut rng), 0.4, Some(2))
        .unwrap();
    let rec = out.attention.unwrap();
    assert_eq!(rec.layer_index, 2);
    assert_eq!(rec.suffix_to_prefix.shape(), &[2, 5, 6]);
    let rows = rec.action_rows();
    assert_eq!(rows.shape(), &[2, 4, 6]);
    for row in rows.data().chunks(6) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn capture_layer_out_of_range() {
    let cfg = small_config(2);
    let mut rng = Rng::new(10, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    let err = params
        .forward(&obs, &random_actions(&cfg, &mut rng), 0.4, Some(2))
        .unwrap_err();
    assert!(matches!(err, Error::Index { .. }));
}

#[test]
fn tau_outside_unit_interval_is_rejected() {
    let cfg = small_config(1);
    let mut rng = Rng::new(11, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f32>(&cfg, &mut rng);
    assert!(params
        .forward(&obs, &random_actions(&cfg, &mut rng), 1.5, None)
        .is_err());
}

fn skipped_velocity(
    params: &PolicyParams<f64>,
    obs: &TokenizedObservation<f64>,
    a: &Tensor<f64>,
    skip: LayerSkip,
) -> Tensor<f64> {
    let cfg = params.config();
    let batch = ObsBatch::stack(&[obs], cfg).unwrap();
    let cache = params.build_cache_batch(&batch, &skip).unwrap();
    let state = obs.state.reshape(&[1, cfg.state_dim]).unwrap();
    let a = a.reshape(&[1, cfg.chunk_len, cfg.action_dim]).unwrap();
    params
        .forward_cached_batch(&cache, &state, &a, &[0.3], None)
        .unwrap()
        .0
}

#[test]
fn skipping_layers() {
    let cfg = small_config(4);
    let mut rng = Rng::new(12, 0);
    let params = PolicyParams::<f64>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f64>(&cfg, &mut rng);
    let a = random_actions(&cfg, &mut rng);
    let base = params.forward(&obs, &a, 0.3, None).unwrap().velocity;
    let none = skipped_velocity(&params, &obs, &a, skip_layers(&cfg, []).unwrap());
    assert!(none.reshape(&[4, 2]).unwrap().bitwise_eq(&base));

    let most = skipped_velocity(&params, &obs, &a, skip_layers(&cfg, [0, 1, 3]).unwrap());
    assert!(most.reshape(&[4, 2]).unwrap().max_abs_diff(&base).unwrap() > 1e-6);

    assert!(skip_layers(&cfg, [0, 1, 2, 3]).is_err());
    assert!(matches!(skip_layers(&cfg, [4]), Err(Error::Index { .. })));
}

#[test]
fn skipping_equals_zeroed_residual_branches() {
    let cfg = small_config(4);
    let mut rng = Rng::new(13, 0);
    let params = PolicyParams::<f64>::init(&cfg, &mut rng).unwrap();
    let obs = random_obs::<f64>(&cfg, &mut rng);
    let a = random_actions(&cfg, &mut rng);
    for layer in 0..cfg.n_layers {
        let skipped = skipped_velocity(&params, &obs, &a, skip_layers(&cfg, [layer]).unwrap());
        // A residual block whose output projections are zero is the identity.
        let mut identity = params.clone();
        for expert in [Expert::Prefix, Expert::Suffix] {
            for t in ["wo", "w2", "b2"] {
                let name = layer_param_name(layer, expert, t);
                let shape = identity.get(&name).unwrap().shape().to_vec();
                identity.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let reference = identity.forward(&obs, &a, 0.3, None).unwrap().velocity;
        let diff = skipped.reshape(&[4, 2]).unwrap().max_abs_diff(&reference).unwrap();
        assert!(diff < 1e-12, "layer {layer}: {diff}");
    }
}

#[test]
fn batched_rows_match_single_observations() {
    let cfg = small_config(2);
    let mut rng = Rng::new(14, 0);
    let params = PolicyParams::<f32>::init(&cfg, &mut rng).unwrap();
    let obs: Vec<TokenizedObservation<f32>> = (0..5).map(|_| random_obs(&cfg, &mut rng)).collect();
    let acts: Vec<Tensor<f32>> = (0..5).map(|_| random_actions(&cfg, &mut rng)).collect();
    let refs: Vec<&TokenizedObservation<f32>> = obs.iter().collect();
    let batch = ObsBatch::stack(&refs, &cfg).unwrap();
    let cache = params.build_cache_batch(&batch, &LayerSkip::none()).unwrap();
    let a_refs: Vec<&Tensor<f32>> = acts.iter().collect();
    let a = shallowpi_core::tensor::concat(&a_refs, 0)
        .unwrap()
        .reshape(&[5, 4, 2])
        .unwrap();
    let taus = [0.0, 0.2, 0.4, 0.6, 0.8];
    let (v, _) = params
        .forward_cached_batch(&cache, &batch.state, &a, &taus, None)
        .unwrap();
    for i in 0..5 {
        let single = params.forward(&obs[i], &acts[i], taus[i], None).unwrap().velocity;
        let row = v.narrow(0, i, 1).unwrap().reshape(&[4, 2]).unwrap();
        assert!(row.bitwise_eq(&single), "row {i}");
    }
}
