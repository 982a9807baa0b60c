use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny(vocab: usize, d: usize, heads: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: vocab, context_len: 10, d_model: d, n_heads: heads, n_layers: layers, init_seed: seed }
}

/// Parameters away from the near-linear regime of the 0.02 init.
fn randomized(config: &ModelConfig, std: f64, seed: u64) -> Parameters {
    let mut p = init_params(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in p.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += std * z;
    }
    p
}

fn zero_output(p: &mut Parameters) {
    let lay = p.layout();
    for name in ["out.w", "out.b"] {
        let t = lay.tensor(name).unwrap().clone();
        p.data_mut()[t.offset..t.offset + t.len()].fill(0.0);
    }
}

#[test]
fn init_is_deterministic() {
    let c = ModelConfig::default();
    assert_eq!(init_params(&c).unwrap(), init_params(&c).unwrap());
    let other = ModelConfig { init_seed: 1, ..c.clone() };
    assert_ne!(init_params(&c).unwrap(), init_params(&other).unwrap());
}

#[test]
fn init_rejects_indivisible_heads() {
    let c = ModelConfig { d_model: 63, n_heads: 4, ..ModelConfig::default() };
    assert!(matches!(init_params(&c), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn parameter_count_matches_shape_arithmetic() {
    let c = ModelConfig::default();
    let (v, ctx, d, l) = (c.vocab_size, c.context_len, c.d_model, c.n_layers);
    let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let expected = v * d + ctx * d + l * per_layer + 2 * d + d * v + v;
    assert_eq!(init_params(&c).unwrap().count(), expected);
    assert_eq!(expected, 25 * 64 + 64 * 64 + 2 * (12 * 64 * 64 + 13 * 64) + 2 * 64 + 64 * 25 + 25);
}

#[test]
fn init_statistics() {
    let p = init_params(&ModelConfig::default()).unwrap();
    let lay = p.layout();
    let w = lay.tensor("layers.0.ff.w1").unwrap();
    let xs = &p.data()[w.offset..w.offset + w.len()];
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3 && (sd - 0.02).abs() < 1e-3, "{mean} {sd}");
    let g = lay.tensor("layers.1.ln2.gain").unwrap();
    assert!(p.data()[g.offset..g.offset + g.len()].iter().all(|&x| x == 1.0));
    let b = lay.tensor("out.b").unwrap();
    assert!(p.data()[b.offset..b.offset + b.len()].iter().all(|&x| x == 0.0));
}

#[test]
fn rows_are_normalized() {
    let c = tiny(13, 8, 2, 2, 4);
    let p = randomized(&c, 0.5, 9);
    let lp = p.forward(&[1, 5, 7, 2, 12, 0, 3]).unwrap();
    assert_eq!(lp.len(), 7);
    for t in 0..lp.len() {
        let s: f64 = lp.row(t).iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn constant_logits_give_uniform_rows() {
    let c = tiny(11, 8, 2, 1, 4);
    let mut p = randomized(&c, 0.3, 1);
    zero_output(&mut p);
    let lp = p.forward(&[0, 4, 9]).unwrap();
    for x in &lp.data {
        assert!((x + (11f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn forward_is_causal() {
    let c = tiny(13, 8, 2, 2, 4);
    let p = randomized(&c, 0.5, 2);
    let a = p.forward(&[1, 5, 7, 2, 12]).unwrap();
    let b = p.forward(&[1, 5, 7, 9, 3]).unwrap();
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn forward_rejects_long_and_invalid_sequences() {
    let c = tiny(13, 8, 2, 1, 4);
    let p = init_params(&c).unwrap();
    assert!(matches!(p.forward(&[0; 11]), Err(ModelError::SequenceTooLong { .. })));
    assert!(matches!(p.forward(&[13]), Err(ModelError::InvalidToken { .. })));
}

#[test]
fn sequence_logprob_examples() {
    let c = tiny(12, 8, 2, 1, 5);
    let mut uniform = randomized(&c, 0.3, 3);
    zero_output(&mut uniform);
    let lv = (12f64).ln();
    let got = uniform.sequence_logprob(&[1, 2], &[3, 4, 5]).unwrap();
    assert!((got + 3.0 * lv).abs() < 1e-12);
    assert_eq!(uniform.sequence_logprob(&[1, 2], &[]).unwrap(), 0.0);

    let p = randomized(&c, 0.5, 4);
    let whole = p.sequence_logprob(&[1, 2], &[3, 4, 5, 6]).unwrap();
    let first = p.sequence_logprob(&[1, 2], &[3, 4]).unwrap();
    let second = p.sequence_logprob(&[1, 2, 3, 4], &[5, 6]).unwrap();
    assert!((whole - first - second).abs() < 1e-9);
    assert!(matches!(p.sequence_logprob(&[1; 8], &[1; 3]), Err(ModelError::SequenceTooLong { .. })));
}

#[test]
fn zero_masks_give_zero_gradients() {
    let c = tiny(12, 8, 2, 1, 5);
    let p = randomized(&c, 0.5, 4);
    let g = gradients(&p, &[(vec![1, 2, 3], vec![0.0; 3]), (vec![4, 5], vec![0.0; 2])]).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.grad.iter().all(|&x| x == 0.0));
}

#[test]
fn gradients_match_finite_differences() {
    let c = ModelConfig { vocab_size: 12, context_len: 8, d_model: 8, n_heads: 2, n_layers: 1, init_seed: 3 };
    let p = randomized(&c, 0.3, 8);
    let batch = vec![
        (vec![0, 3, 5, 7, 2, 11], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]),
        (vec![1, 4, 4, 9], vec![0.0, 0.0, 1.0, 1.0]),
    ];
    let analytic = gradients(&p, &batch).unwrap().grad;
    let numeric = gradcheck::finite_difference(&p, &batch, 1e-3).unwrap();
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| gradcheck::relative_error(*a, *n))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn duplicated_example_with_halved_weights_keeps_gradient() {
    let c = tiny(12, 8, 2, 1, 5);
    let p = randomized(&c, 0.4, 6);
    let a = (vec![0u32, 3, 5, 7, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0]);
    let b = (vec![1u32, 4, 4, 9], vec![0.0, 0.0, 1.0, 1.0]);
    let base = gradients(&p, &[a.clone(), b.clone()]).unwrap();
    let half: Vec<f64> = a.1.iter().map(|w| w * 0.5).collect();
    let dup = gradients(&p, &[(a.0.clone(), half.clone()), (a.0.clone(), half), b]).unwrap();
    assert!((base.loss - dup.loss).abs() < 1e-12);
    for (x, y) in base.grad.iter().zip(&dup.grad) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn greedy_follows_forced_token() {
    let c = tiny(12, 8, 2, 1, 5);
    let mut p = init_params(&c).unwrap();
    zero_output(&mut p);
    let b = p.layout().tensor("out.b").unwrap().offset;
    p.data_mut()[b + 7] = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = p.generate(&[1], DecodePolicy::Greedy, &mut rng, 5, &[2]).unwrap();
    assert_eq!(out, vec![7; 5]);
    // Stops at the context boundary.
    let out = p.generate(&[1; 8], DecodePolicy::Greedy, &mut rng, 5, &[]).unwrap();
    assert_eq!(out.len(), 2);
    // Stops after a stop token.
    let out = p.generate(&[1], DecodePolicy::Greedy, &mut rng, 5, &[7]).unwrap();
    assert_eq!(out, vec![7]);
}

#[test]
fn small_temperature_equals_greedy() {
    let c = tiny(12, 8, 2, 1, 5);
    let p = randomized(&c, 0.8, 2);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let g = p.generate(&[1, 2], DecodePolicy::Greedy, &mut r1, 6, &[]).unwrap();
    let t = p.generate(&[1, 2], DecodePolicy::Temperature(1e-4), &mut r2, 6, &[]).unwrap();
    assert_eq!(g, t);
}

#[test]
fn temperature_sampling_is_seeded() {
    let c = tiny(12, 8, 2, 1, 5);
    let p = randomized(&c, 0.8, 2);
    let run = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        p.generate(&[1, 2], DecodePolicy::Temperature(1.0), &mut r, 6, &[]).unwrap()
    };
    assert_eq!(run(9), run(9));
}

#[test]
fn unit_temperature_sampling_matches_softmax() {
    let logits = [0.3f64, -1.0, 1.2, 0.0];
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let logp: Vec<f64> = logits.iter().map(|l| l - m - z.ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_tempered(&logp, 1.0, &mut rng)] += 1;
    }
    for k in 0..4 {
        let f = counts[k] as f64 / n as f64;
        assert!((f - logp[k].exp()).abs() < 0.02, "{k}: {f}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let c = tiny(25, 8, 2, 2, 5);
    let p = randomized(&c, 0.3, 2);
    let vocab = crate::corpus::build_vocab(&crate::corpus::CorpusSpec::default());
    let meta = TrainingMeta {
        regime: "student".into(),
        steps: 12,
        final_loss: 0.5,
        seed: 3,
        tool_version: crate::TOOL_VERSION.into(),
        config_hash: "abc".into(),
    };
    let ck = Checkpoint::from_params(&p, &vocab, meta);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"SDPX");
    let back = Checkpoint::read_from(&bytes[..]).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let before = ck.parameters().unwrap().forward(&[0, 7, 9]).unwrap();
    let after = back.parameters().unwrap().forward(&[0, 7, 9]).unwrap();
    assert_eq!(before, after);
    // Single-precision storage stays close to the f64 original.
    let orig = p.forward(&[0, 7, 9]).unwrap();
    for (x, y) in orig.data.iter().zip(&after.data) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let c = tiny(25, 8, 2, 1, 5);
    let p = init_params(&c).unwrap();
    let vocab = crate::corpus::build_vocab(&crate::corpus::CorpusSpec::default());
    let meta = TrainingMeta {
        regime: "pretrain".into(),
        steps: 0,
        final_loss: 0.0,
        seed: 0,
        tool_version: String::new(),
        config_hash: String::new(),
    };
    let bytes = Checkpoint::from_params(&p, &vocab, meta).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(&bad[..]).is_err());
    assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::read_from(&long[..]).is_err());
}
