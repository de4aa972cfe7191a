use super::*;
use proptest::prelude::*;
use rand::Rng;

fn toy_meta() -> PolicyMeta {
    PolicyMeta {
        input_dim: 4,
        hidden_dim: 6,
        hidden_layers: 2,
        chunk_size: 2,
        vocab_size: 3,
    }
}

/// Fills every tensor (head included) with uniform noise.
fn randomized(meta: PolicyMeta, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(meta, seed).unwrap();
    let mut rng = stream(&[99, seed]);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    p
}

fn random_obs(dim: usize, rng: &mut Stream) -> Observation {
    Observation::new((0..dim).map(|_| rng.gen_range(0.0..1.0)).collect())
}

/// Naive dense forward over f64 copies of the tensors (order: w0 b0 w1 b1 ...).
fn oracle_logits(tensors: &[Vec<f64>], meta: PolicyMeta, x: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = x.to_vec();
    let n_layers = tensors.len() / 2;
    for l in 0..n_layers {
        let w = &tensors[2 * l];
        let b = &tensors[2 * l + 1];
        let out = b.len();
        let inp = a.len();
        let mut z = vec![0.0; out];
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += w[o * inp + i] * a[i];
            }
            z[o] = if l + 1 < n_layers { s.max(0.0) } else { s };
        }
        a = z;
    }
    assert_eq!(a.len(), meta.chunk_size * meta.vocab_size);
    a
}

fn oracle_logprob(row: &[f64], t: f64, tok: usize) -> f64 {
    let denom: f64 = row.iter().map(|z| (z / t).exp()).sum();
    ((row[tok] / t).exp() / denom).ln()
}

fn f64_tensors(p: &PolicyParams) -> Vec<Vec<f64>> {
    p.tensors()
        .iter()
        .map(|(_, _, d)| d.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

#[test]
fn zero_head_gives_uniform_rows() {
    let meta = PolicyMeta {
        input_dim: 13,
        hidden_dim: 128,
        hidden_layers: 2,
        chunk_size: 8,
        vocab_size: 11,
    };
    let p = PolicyParams::init(meta, 1).unwrap();
    let mut rng = stream(&[5]);
    let dist = p.forward(&random_obs(13, &mut rng)).unwrap();
    assert!(dist.logits.iter().all(|&z| z == 0.0));
    for j in 0..8 {
        for l in dist.log_probs(j) {
            assert!((l.exp() - 1.0 / 11.0).abs() < 1e-12);
        }
    }
    let lp = p
        .logprob_of(&random_obs(13, &mut rng), &[0, 3, 10], 1.6)
        .unwrap();
    for l in lp {
        assert!((l + (11f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let p = randomized(toy_meta(), 3);
    let obs = Observation::new(vec![0.1, 0.2, 0.7, 1.0]);
    let a = p.forward(&obs).unwrap();
    let b = p.forward(&obs).unwrap();
    assert_eq!(
        a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn forward_matches_dense_oracle() {
    let meta = PolicyMeta {
        input_dim: 13,
        hidden_dim: 32,
        hidden_layers: 2,
        chunk_size: 8,
        vocab_size: 11,
    };
    let mut rng = stream(&[17]);
    for seed in 0..5 {
        let p = randomized(meta, seed);
        let obs = random_obs(13, &mut rng);
        let x: Vec<f64> = obs.features().iter().map(|&v| f64::from(v)).collect();
        let want = oracle_logits(&f64_tensors(&p), meta, &x);
        let got = p.forward(&obs).unwrap().logits;
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }
}

#[test]
fn dimension_mismatch_is_config_error() {
    let p = PolicyParams::init(toy_meta(), 0).unwrap();
    let err = p.forward(&Observation::new(vec![0.0; 5])).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn two_token_dist(logits: [f64; 2], temperature: f64) -> ChunkDistribution {
    ChunkDistribution {
        logits: logits.to_vec(),
        chunk_size: 1,
        vocab_size: 2,
        temperature,
    }
}

fn frequency_of_zero(dist: &ChunkDistribution, draws: usize, seed: u64) -> f64 {
    let mut rng = stream(&[seed]);
    let zeros = (0..draws)
        .filter(|_| dist.sample_chunk(&mut rng).0[0] == 0)
        .count();
    zeros as f64 / draws as f64
}

#[test]
fn sampling_matches_softmax_at_unit_temperature() {
    // softmax([ln 2, 0]) = [2/3, 1/3]
    let f = frequency_of_zero(&two_token_dist([2f64.ln(), 0.0], 1.0), 100_000, 1);
    assert!((f - 2.0 / 3.0).abs() < 0.01, "{f}");
}

#[test]
fn sampling_flattens_at_high_temperature() {
    let p0 = 1.0 / (1.0 + (-5.0f64 / 1000.0).exp());
    assert!((p0 - 0.50125).abs() < 1e-5);
    let n = 100_000;
    let f = frequency_of_zero(&two_token_dist([5.0, 0.0], 1000.0), n, 2);
    let sigma = (p0 * (1.0 - p0) / n as f64).sqrt();
    assert!((f - p0).abs() < 3.0 * sigma, "{f}");
}

#[test]
fn uniform_logits_sample_uniformly() {
    let dist = ChunkDistribution {
        logits: vec![0.3; 11],
        chunk_size: 1,
        vocab_size: 11,
        temperature: 1.6,
    };
    let n = 110_000;
    let mut counts = [0usize; 11];
    let mut rng = stream(&[3]);
    for _ in 0..n {
        counts[dist.sample_chunk(&mut rng).0[0] as usize] += 1;
    }
    let p = 1.0 / 11.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn sampled_logprobs_are_distribution_logprobs() {
    let p = randomized(toy_meta(), 8);
    let obs = Observation::new(vec![0.5, 0.1, 0.9, 0.3]);
    let dist = p.forward(&obs).unwrap().with_temperature(1.6);
    let mut rng = stream(&[4]);
    let (tokens, lps) = dist.sample_chunk(&mut rng);
    let again = p.logprob_of(&obs, &tokens, 1.6).unwrap();
    assert_eq!(lps, again);
}

#[test]
fn greedy_rules() {
    let d = ChunkDistribution {
        logits: vec![0.1, 0.9, 0.3, 0.0, 0.0, 0.0],
        chunk_size: 2,
        vocab_size: 3,
        temperature: 1.0,
    };
    assert_eq!(d.greedy_chunk(), vec![1, 0]);
}

#[test]
fn greedy_is_low_temperature_mode() {
    let p = randomized(toy_meta(), 11);
    let obs = Observation::new(vec![0.4, 0.6, 0.2, 0.8]);
    let dist = p.forward(&obs).unwrap();
    let greedy = dist.greedy_chunk();
    let cold = dist.clone().with_temperature(0.1);
    let mut rng = stream(&[6]);
    let mut counts = vec![[0usize; 3]; 2];
    for _ in 0..100_000 {
        let (t, _) = cold.sample_chunk(&mut rng);
        for j in 0..2 {
            counts[j][t[j] as usize] += 1;
        }
    }
    for j in 0..2 {
        let mode = (0..3).max_by_key(|&v| counts[j][v]).unwrap();
        assert_eq!(mode as Token, greedy[j]);
    }
}

#[test]
fn logprob_matches_naive_oracle() {
    let p = randomized(toy_meta(), 21);
    let mut rng = stream(&[22]);
    for _ in 0..20 {
        let obs = random_obs(4, &mut rng);
        let toks: Vec<Token> = (0..2).map(|_| rng.gen_range(0..3)).collect();
        let t = rng.gen_range(0.5..2.0);
        let x: Vec<f64> = obs.features().iter().map(|&v| f64::from(v)).collect();
        let logits = oracle_logits(&f64_tensors(&p), toy_meta(), &x);
        let got = p.logprob_of(&obs, &toks, t).unwrap();
        for j in 0..2 {
            let want = oracle_logprob(&logits[j * 3..j * 3 + 3], t, toks[j] as usize);
            assert!((got[j] - want).abs() < 1e-8);
        }
    }
}

struct Sample {
    obs: Observation,
    tokens: Vec<Token>,
    coeffs: Vec<f64>,
}

fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream(&[seed]);
    (0..n)
        .map(|_| Sample {
            obs: random_obs(4, &mut rng),
            tokens: (0..2).map(|_| rng.gen_range(0..3)).collect(),
            coeffs: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn weighted(samples: &[Sample]) -> Vec<WeightedTokens<'_>> {
    samples
        .iter()
        .map(|s| WeightedTokens {
            obs: &s.obs,
            tokens: &s.tokens,
            coeffs: &s.coeffs,
        })
        .collect()
}

fn oracle_objective(tensors: &[Vec<f64>], samples: &[Sample], t: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let x: Vec<f64> = s.obs.features().iter().map(|&v| f64::from(v)).collect();
            let logits = oracle_logits(tensors, toy_meta(), &x);
            s.tokens
                .iter()
                .zip(&s.coeffs)
                .enumerate()
                .map(|(j, (&tok, &c))| c * oracle_logprob(&logits[j * 3..j * 3 + 3], t, tok as usize))
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn backward_matches_central_differences() {
    let p = randomized(toy_meta(), 31);
    assert!(p.num_parameters() <= 200);
    let samples = random_samples(5, 32);
    let t = 1.6;
    let grad = p.backward(&weighted(&samples), t).unwrap();
    let base = f64_tensors(&p);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (ti, tensor) in base.iter().enumerate() {
        for i in 0..tensor.len() {
            let mut plus = base.clone();
            plus[ti][i] += h;
            let mut minus = base.clone();
            minus[ti][i] -= h;
            let fd = (oracle_objective(&plus, &samples, t) - oracle_objective(&minus, &samples, t))
                / (2.0 * h);
            let an = grad.tensors[ti][i];
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_coefficients_give_zero_gradient() {
    let p = randomized(toy_meta(), 41);
    let mut samples = random_samples(4, 42);
    samples.iter_mut().for_each(|s| s.coeffs.fill(0.0));
    let g = p.backward(&weighted(&samples), 1.0).unwrap();
    assert!(g.flat().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let p = randomized(toy_meta(), 51);
    let samples = random_samples(20, 52);
    let whole = p.backward(&weighted(&samples), 1.3).unwrap();
    let mut summed = Gradient::zeros_like(&p);
    for s in samples.chunks(1) {
        summed.add_assign(&p.backward(&weighted(s), 1.3).unwrap());
    }
    for (a, b) in whole.flat().iter().zip(summed.flat()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn non_finite_coefficient_is_numeric_error() {
    let p = randomized(toy_meta(), 61);
    let mut samples = random_samples(1, 62);
    samples[0].coeffs[1] = f64::NAN;
    assert!(matches!(
        p.backward(&weighted(&samples), 1.0),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut policy = Policy::new(randomized(toy_meta(), 71));
    let before = policy.params.clone();
    let g = Gradient::zeros_like(&policy.params);
    policy.apply_gradient(&g, 1e-3).unwrap();
    assert_eq!(policy.params, before);
    assert_eq!(policy.optimizer.step, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // m̂ = g, v̂ = g² after bias correction, so |Δ| = lr·g/(|g| + eps) ≈ lr.
    let mut policy = Policy::new(randomized(toy_meta(), 72));
    let mut g = Gradient::zeros_like(&policy.params);
    g.tensors[0][0] = 1.0;
    let before = policy.params.hidden[0].weight[0];
    let lr = 1e-2;
    policy.apply_gradient(&g, lr).unwrap();
    let moved = f64::from(before) - f64::from(policy.params.hidden[0].weight[0]);
    let expected = lr * 1.0 / (1.0 + ADAM_EPS);
    assert!((moved - expected).abs() < 1e-7, "{moved}");
}

#[test]
fn adam_constant_gradient_moves_monotonically_against_sign() {
    let mut policy = Policy::new(randomized(toy_meta(), 73));
    let mut g = Gradient::zeros_like(&policy.params);
    g.tensors[1][2] = -0.5;
    let mut last = policy.params.hidden[0].bias[2];
    for _ in 0..20 {
        policy.apply_gradient(&g, 1e-3).unwrap();
        let now = policy.params.hidden[0].bias[2];
        assert!(now > last);
        last = now;
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut policy = Policy::new(randomized(toy_meta(), 81));
    let samples = random_samples(3, 82);
    let g = policy.params.backward(&weighted(&samples), 1.0).unwrap();
    policy.apply_gradient(&g, 1e-3).unwrap();
    let mut a = Vec::new();
    write_checkpoint(&mut a, &policy).unwrap();
    assert_eq!(&a[..4], b"SVRL");
    let back = read_checkpoint(a.as_slice()).unwrap();
    assert_eq!(back, policy);
    let mut b = Vec::new();
    write_checkpoint(&mut b, &back).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(matches!(read_checkpoint(&b"SVRD\0\0\0\0"[..]), Err(Error::Format(_))));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &Policy::new(randomized(toy_meta(), 1))).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
}

proptest! {
    #[test]
    fn softmax_rows_normalize(
        row in prop::collection::vec(-50.0f64..50.0, 1..16),
        t in 0.05f64..20.0,
    ) {
        let total: f64 = log_softmax(&row, t).iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_is_linear_in_coefficients(scale in -3.0f64..3.0, seed in 0u64..50) {
        let p = randomized(toy_meta(), seed);
        let samples = random_samples(3, seed + 1000);
        let scaled: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                obs: s.obs.clone(),
                tokens: s.tokens.clone(),
                coeffs: s.coeffs.iter().map(|c| c * scale).collect(),
            })
            .collect();
        let g = p.backward(&weighted(&samples), 1.0).unwrap();
        let gs = p.backward(&weighted(&scaled), 1.0).unwrap();
        for (a, b) in g.flat().iter().zip(gs.flat()) {
            prop_assert!((a * scale - b).abs() < 1e-9);
        }
    }
}
