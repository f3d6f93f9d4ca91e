use qrec_core::graph::{Attribute, CatalogRecord};
use qrec_core::objective::{clip_active, surrogate, LogProbModel, Tempered, TokenTerm};
use qrec_core::policy::{Legal, StepInput};
use qrec_core::synth::Constraint;
use qrec_core::{
    Catalog, Category, Decoding, LogLinearPolicy, PolicySpec, QueryContext, QueryInstance,
    RelationVocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense softmax over `V` tokens with logits `Σ_{f active} W[f]`.
struct Dense {
    f: usize,
    v: usize,
    w: Vec<f64>,
}

impl Dense {
    fn log_probs(&self, features: &[u32]) -> Vec<f64> {
        let mut z = vec![0.0; self.v];
        for &f in features {
            for (t, zt) in z.iter_mut().enumerate() {
                *zt += self.w[f as usize * self.v + t];
            }
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }
}

impl LogProbModel for Dense {
    fn param_count(&self) -> usize {
        self.f * self.v
    }

    fn log_prob(&self, step: &StepInput) -> f64 {
        self.log_probs(&step.features)[step.action as usize]
    }

    fn add_log_prob_grad(&self, step: &StepInput, coeff: f64, grad: &mut [f64]) {
        let lp = self.log_probs(&step.features);
        for &f in &step.features {
            for (t, l) in lp.iter().enumerate() {
                let ind = if t == step.action as usize { 1.0 } else { 0.0 };
                grad[f as usize * self.v + t] += coeff * (ind - l.exp());
            }
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Old/ref log-probs jittered around the current ones, redrawn until no
/// ratio sits within 1e-3 of a clip boundary.
fn jittered_terms<'a, M: LogProbModel>(
    model: &M,
    steps: &'a [StepInput],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenTerm<'a>> {
    steps
        .iter()
        .map(|step| {
            let lp = model.log_prob(step);
            loop {
                let old = lp + rng.random_range(-0.4..0.4);
                let h = (lp - old).exp();
                if (h - (1.0 - epsilon)).abs() < 1e-3 || (h - (1.0 + epsilon)).abs() < 1e-3 {
                    continue;
                }
                break TokenTerm {
                    step,
                    old_log_prob: old,
                    ref_log_prob: lp + rng.random_range(-0.5..0.5),
                    advantage: rng.random_range(-2.0..2.0),
                };
            }
        })
        .collect()
}

#[test]
fn dense_policy_gradient_matches_finite_differences() {
    let (f, v, eps, beta, h) = (10, 4, 0.2, 0.01, 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut clipped = 0usize;
    for point in 0..20 {
        let mut model = Dense {
            f,
            v,
            w: (0..f * v).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        assert!(model.param_count() <= 50);
        let steps: Vec<StepInput> = (0..12)
            .map(|_| {
                let mut feats: Vec<u32> = (0..f as u32).filter(|_| rng.random_bool(0.4)).collect();
                feats.push(rng.random_range(0..f as u32));
                feats.sort_unstable();
                feats.dedup();
                StepInput {
                    features: feats,
                    legal: Legal::Slots,
                    action: rng.random_range(0..v as u32),
                }
            })
            .collect();
        let terms = jittered_terms(&model, &steps, eps, &mut rng);
        let value = surrogate(&model, &terms, eps, beta);
        clipped += (value.clip_fraction * value.tokens as f64).round() as usize;
        let mut numeric = vec![0.0; model.param_count()];
        for k in 0..model.param_count() {
            let w0 = model.w[k];
            model.w[k] = w0 + h;
            let up = surrogate(&model, &terms, eps, beta).loss;
            model.w[k] = w0 - h;
            let down = surrogate(&model, &terms, eps, beta).loss;
            model.w[k] = w0;
            numeric[k] = (up - down) / (2.0 * h);
        }
        let e = rel_err(&value.loss_grad, &numeric);
        assert!(e < 1e-4, "point {point}: relative error {e}");
    }
    assert!(clipped > 0, "no point exercised the clipped branch");
}

fn toy_context(spec: &PolicySpec) -> QueryContext {
    let records = (0..spec.num_slots)
        .map(|i| CatalogRecord {
            id: format!("m{i}"),
            title: format!("Film {i}"),
            attributes: vec![
                Attribute::new("genre", if i % 2 == 0 { "drama" } else { "comedy" }),
                Attribute::new("director", &format!("d{}", i % 3)),
            ],
        })
        .collect();
    let cat = Catalog::from_records(records, &RelationVocab::default()).unwrap();
    let q = QueryInstance {
        query_id: "q".into(),
        category: Category::Explicit,
        constraints: vec![
            Constraint {
                relation: "genre".into(),
                value: Some("drama".into()),
                evidence: false,
            },
            Constraint {
                relation: "director".into(),
                value: Some("d0".into()),
                evidence: false,
            },
        ],
        evidence: vec![],
        ground_truth: "m0".into(),
        candidates: (0..spec.num_slots)
            .map(|i| format!("m{i}").as_str().into())
            .collect(),
    };
    QueryContext::build(&q, &cat, spec).unwrap()
}

#[test]
fn log_linear_gradient_matches_finite_differences() {
    let spec = PolicySpec::new(3, 5).unwrap();
    let ctx = toy_context(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (eps, beta, h, temp) = (0.2, 0.3, 1e-5, 0.7);
    for point in 0..5 {
        let weights: Vec<f64> = (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut policy = LogLinearPolicy::from_weights(spec, weights).unwrap();
        let steps: Vec<StepInput> = policy
            .sample_responses(&ctx, 6, Decoding::Sample { temperature: temp }, point)
            .into_iter()
            .flat_map(|r| r.steps)
            .collect();
        let model = Tempered {
            policy: &policy,
            temperature: temp,
        };
        let terms: Vec<TokenTerm<'_>> = jittered_terms(&model, &steps, eps, &mut rng);
        let analytic = surrogate(&model, &terms, eps, beta).loss_grad;
        let terms: Vec<(f64, f64, f64)> = terms
            .iter()
            .map(|t| (t.old_log_prob, t.ref_log_prob, t.advantage))
            .collect();
        let loss = |p: &LogLinearPolicy| {
            let m = Tempered {
                policy: p,
                temperature: temp,
            };
            let t: Vec<TokenTerm<'_>> = steps
                .iter()
                .zip(&terms)
                .map(|(step, &(o, r, a))| TokenTerm {
                    step,
                    old_log_prob: o,
                    ref_log_prob: r,
                    advantage: a,
                })
                .collect();
            surrogate(&m, &t, eps, beta).loss
        };
        let mut numeric = vec![0.0; spec.param_count()];
        for k in 0..spec.param_count() {
            let w0 = policy.weights()[k];
            policy.weights_mut()[k] = w0 + h;
            let up = loss(&policy);
            policy.weights_mut()[k] = w0 - h;
            let down = loss(&policy);
            policy.weights_mut()[k] = w0;
            numeric[k] = (up - down) / (2.0 * h);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "point {point}: relative error {e}");
    }
}

#[test]
fn hand_set_weights_give_closed_form_softmax() {
    let spec = PolicySpec::new(2, 5).unwrap();
    let mut policy = LogLinearPolicy::zeros(spec);
    let w = [[0.5, -1.0], [2.0, 0.25]];
    for (f, row) in w.iter().enumerate() {
        for (t, &x) in row.iter().enumerate() {
            let k = spec.weight_index(f, t).unwrap();
            policy.weights_mut()[k] = x;
        }
    }
    for temp in [1.0, 0.5, 2.0] {
        let lp = policy.step_log_probs(&[0, 1], Legal::Slots, temp);
        let z0: f64 = (0.5 + 2.0) / temp;
        let z1: f64 = (-1.0 + 0.25) / temp;
        let lse = (z0.exp() + z1.exp()).ln();
        assert!((lp[0] - (z0 - lse)).abs() < 1e-12);
        assert!((lp[1] - (z1 - lse)).abs() < 1e-12);
    }
}

#[test]
fn forced_tokens_have_zero_log_prob_and_gradient() {
    let spec = PolicySpec::new(4, 5).unwrap();
    let ctx = toy_context(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights = (0..spec.param_count())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let policy = LogLinearPolicy::from_weights(spec, weights).unwrap();
    let mut forced = 0;
    for r in policy.sample_responses(&ctx, 50, Decoding::Sample { temperature: 1.0 }, 9) {
        for (step, &lp) in r.steps.iter().zip(&r.log_probs) {
            if let Legal::Only(t) = step.legal {
                forced += 1;
                assert_eq!(step.action, t);
                assert_eq!(lp, 0.0);
                let mut g = vec![0.0; spec.param_count()];
                policy.add_log_prob_grad(step, 1.0, 3.0, &mut g);
                assert!(g.iter().all(|&x| x == 0.0));
            }
        }
        assert_eq!(r.tokens.last(), Some(&spec.end_token()));
    }
    assert!(forced >= 50);
}

#[test]
fn uniform_policy_samples_uniformly() {
    let spec = PolicySpec::new(3, 5).unwrap();
    let ctx = toy_context(&spec);
    let n = 10_000;
    let rs = LogLinearPolicy::zeros(spec).sample_responses(
        &ctx,
        n,
        Decoding::Sample { temperature: 1.0 },
        17,
    );
    let legal = spec.num_slots + 1;
    let mut counts = vec![0usize; legal];
    for r in &rs {
        counts[r.tokens[0] as usize] += 1;
    }
    let p = 1.0 / legal as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (t, &c) in counts.iter().enumerate() {
        let z = (c as f64 - n as f64 * p).abs() / sigma;
        assert!(z < 4.0, "token {t}: {c} draws, {z:.2} sigma");
    }
}

#[test]
fn resampled_log_probs_are_bit_identical() {
    let spec = PolicySpec::new(5, 6).unwrap();
    let ctx = toy_context(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let weights = (0..spec.param_count())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let policy = LogLinearPolicy::from_weights(spec, weights).unwrap();
        let a = policy.sample_responses(&ctx, 5, Decoding::Sample { temperature: 0.8 }, seed);
        let b = policy.sample_responses(&ctx, 5, Decoding::Sample { temperature: 0.8 }, seed);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.log_probs, policy.log_prob(&ctx, &x.tokens, 0.8).unwrap());
        }
        let g = policy.sample_responses(&ctx, 4, Decoding::Greedy, seed);
        assert!(g.windows(2).all(|w| w[0].tokens == w[1].tokens));
    }
    assert!(LogLinearPolicy::zeros(spec)
        .log_prob(&ctx, &[spec.vocab_size() as u32], 1.0)
        .is_err());
}

#[test]
fn clip_decisions_match_the_two_branches() {
    for a in [-2.0, -0.5, 0.5, 2.0] {
        assert!(clip_active(1.5, a, 0.2) == (a > 0.0));
        assert!(clip_active(0.5, a, 0.2) == (a < 0.0));
        assert!(!clip_active(1.0, a, 0.2));
    }
}
