use proptest::prelude::*;
use qrec_core::advantage::{
    analyze_response, group_advantages, map_token_rewards, raae_group, response_level_advantages,
    segment_response, segment_rewards, tokenize, Segment,
};
use qrec_core::graph::{Attribute, CatalogRecord};
use qrec_core::{
    CandidateSet, Catalog, EmbeddingTable, ItemId, PenaltyWeight, Provenance, RelationVocab,
    RewardWeights,
};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn group() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        (1..9usize, prop_oneof![Just(0.0), Just(1.02), 0.0..1.02f64])
            .prop_flat_map(|(n, r)| prop::collection::vec(prop_oneof![Just(r), Just(r * 0.7)], n)),
        5,
    )
}

/// Four films sharing a genre, so a wrong answer still earns a positive
/// alignment reward.
fn world() -> (Catalog, EmbeddingTable, CandidateSet) {
    let records = (0..4)
        .map(|i| CatalogRecord {
            id: format!("m{i}"),
            title: format!("Film {i}"),
            attributes: vec![
                Attribute::new("genre", "drama"),
                Attribute::new("director", &format!("d{i}")),
            ],
        })
        .collect();
    let cat = Catalog::from_records(records, &RelationVocab::default()).unwrap();
    let emb = EmbeddingTable::from_vectors(
        vec![
            vec![1.0, 0.2],
            vec![0.8, 0.6],
            vec![0.3, 1.0],
            vec![1.0, 1.0],
        ],
        Provenance::Trained,
    )
    .unwrap();
    let ids: Vec<ItemId> = (0..4).map(|i| ItemId(format!("m{i}"))).collect();
    let cands = CandidateSet::new(&cat, &ids).unwrap();
    (cat, emb, cands)
}

fn response_text(considered: &[usize], answer: usize) -> String {
    let mut t = String::new();
    for c in considered {
        t.push_str(&format!("I weigh Film {c} against the request.\n\n"));
    }
    t.push_str(&format!("So the answer is \\boxed{{Film {answer}}}"));
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn advantages_are_normalized(rewards in group()) {
        let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
        let constant = flat.iter().all(|&x| x == flat[0]);
        let g = group_advantages(rewards.clone()).unwrap();
        let adv: Vec<f64> = g.advantages.iter().flatten().copied().collect();
        for (a, r) in g.advantages.iter().zip(&rewards) {
            prop_assert_eq!(a.len(), r.len());
        }
        if constant {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
            prop_assert_eq!(g.group_std, 0.0);
        } else {
            let (m, s) = mean_std(&adv);
            prop_assert!(m.abs() < 1e-9, "mean {m}");
            prop_assert!((s - 1.0).abs() < 1e-6, "std {s}");
        }
    }

    #[test]
    fn advantages_are_scale_free(rewards in group(), c in 0.01..100.0f64) {
        let a = group_advantages(rewards.clone()).unwrap();
        let scaled = rewards.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let b = group_advantages(scaled).unwrap();
        for (x, y) in a.advantages.iter().flatten().zip(b.advantages.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn paragraphs_are_recovered(
        paras in prop::collection::vec("[a-z][a-z ]{0,5}(\n[a-z][a-z ]{0,4})?", 1..6),
        seps in prop::collection::vec(2..5usize, 6),
        trailing in any::<bool>(),
    ) {
        let mut text = String::new();
        let mut want = Vec::new();
        for (i, p) in paras.iter().enumerate() {
            let start = text.len();
            text.push_str(p);
            if i + 1 < paras.len() || trailing {
                text.push_str(&"\n".repeat(seps[i]));
            }
            want.push(start..text.len());
        }
        let got = segment_response(&text).spans;
        prop_assert_eq!(got.iter().map(|s| s.len()).sum::<usize>(), text.len());
        prop_assert_eq!(got, want);
    }

    #[test]
    fn tokens_match_whitespace_split(text in "[ab\\\\{} \n\t]{0,20}") {
        let spans = tokenize(&text);
        let got: Vec<&str> = spans.iter().map(|s| &text[s.clone()]).collect();
        let want: Vec<&str> = text.split_whitespace().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn penalized_tokens_rank_below_the_rest(
        responses in prop::collection::vec(
            (prop::collection::vec(0..4usize, 0..3), 0..4usize),
            5,
        ),
        gt in 0..4usize,
        w in 0.05..0.95f64,
    ) {
        let (cat, emb, cands) = world();
        let gt_id = ItemId(format!("m{gt}"));
        let analyzed: Vec<_> = responses
            .iter()
            .map(|(c, a)| {
                analyze_response(&response_text(c, *a), None, &cands, &gt_id, &cat, &emb, &RewardWeights::default()).unwrap()
            })
            .collect();
        let (seg_rewards, adv) = raae_group(&analyzed, &gt_id, PenaltyWeight::new(w).unwrap()).unwrap();
        for (i, r) in analyzed.iter().enumerate() {
            let Some(p) = &r.predicted else { continue };
            if *p == gt_id || r.shaped.total <= 0.0 {
                continue;
            }
            prop_assert!(r.segments.iter().any(|s| s.mentioned_items.contains(p)));
            let mut penalized = Vec::new();
            let mut kept = Vec::new();
            for (s, &sr) in r.segments.iter().zip(&seg_rewards[i]) {
                let bucket = if s.mentioned_items.contains(p) { &mut penalized } else { &mut kept };
                prop_assert!(sr <= r.shaped.total);
                bucket.extend(adv.advantages[i][s.token_span.clone()].iter().copied());
            }
            for a in &penalized {
                for b in &kept {
                    prop_assert!(a < b, "penalized {a} not below {b}");
                }
            }
        }
    }

    #[test]
    fn disabled_penalty_is_response_level(
        responses in prop::collection::vec(
            (prop::collection::vec(0..4usize, 0..3), 0..4usize),
            2..7,
        ),
        gt in 0..4usize,
    ) {
        let (cat, emb, cands) = world();
        let gt_id = ItemId(format!("m{gt}"));
        let analyzed: Vec<_> = responses
            .iter()
            .map(|(c, a)| {
                analyze_response(&response_text(c, *a), None, &cands, &gt_id, &cat, &emb, &RewardWeights::default()).unwrap()
            })
            .collect();
        let (_, adv) = raae_group(&analyzed, &gt_id, PenaltyWeight::disabled()).unwrap();
        let rewards: Vec<f64> = analyzed.iter().map(|r| r.shaped.total).collect();
        let counts: Vec<usize> = analyzed.iter().map(|r| r.token_count).collect();
        let plain = response_level_advantages(&rewards, &counts).unwrap();
        prop_assert_eq!(&adv.advantages, &plain.advantages);
        for a in &adv.advantages {
            prop_assert!(a.windows(2).all(|w| w[0] == w[1]));
        }
    }
}

#[test]
fn hand_computed_groups() {
    let g = group_advantages(vec![vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(g.group_mean, 0.5);
    assert_eq!(g.group_std, 0.5);
    assert_eq!(g.advantages, vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);

    let g = group_advantages(vec![vec![1.0], vec![0.0], vec![0.5]]).unwrap();
    let sigma = (1.0f64 / 6.0).sqrt();
    assert!((g.advantages[0][0] - 0.5 / sigma).abs() < 1e-12);
    assert!((g.advantages[1][0] + 0.5 / sigma).abs() < 1e-12);
    assert_eq!(g.advantages[2][0], 0.0);

    assert!(group_advantages(vec![vec![1.0]]).is_err());
    let flat = group_advantages(vec![vec![0.3; 4], vec![0.3; 2]]).unwrap();
    assert!(flat.advantages.iter().flatten().all(|&a| a == 0.0));
}

#[test]
fn segment_reward_and_broadcast_examples() {
    let (p, gt) = (ItemId("m1".into()), ItemId("m0".into()));
    let mentions = vec![
        Default::default(),
        [p.clone()].into_iter().collect(),
        Default::default(),
    ];
    let w = PenaltyWeight::new(0.3).unwrap();
    let r = segment_rewards(&mentions, Some(&p), &gt, 0.02, w);
    assert_eq!(r.len(), 3);
    assert_eq!(r[0], 0.02);
    assert!((r[1] - 0.014).abs() < 1e-15);
    assert_eq!(r[2], 0.02);
    assert_eq!(
        segment_rewards(&mentions, Some(&gt), &gt, 1.0, w),
        vec![1.0; 3]
    );
    assert_eq!(segment_rewards(&mentions, None, &gt, 0.0, w), vec![0.0; 3]);

    let seg = |t: std::ops::Range<usize>| Segment {
        text_span: 0..0,
        token_span: t,
        mentioned_items: Default::default(),
    };
    let tokens = map_token_rewards(&[seg(0..3), seg(3..5)], &[1.0, 0.7], 5).unwrap();
    assert_eq!(tokens, vec![1.0, 1.0, 1.0, 0.7, 0.7]);
    assert!(map_token_rewards(&[seg(0..3), seg(4..5)], &[1.0, 0.7], 5).is_err());
    assert!(map_token_rewards(&[], &[], 0).unwrap().is_empty());
    assert!(PenaltyWeight::new(1.0).is_err());
    assert!(PenaltyWeight::new(0.0).is_err());
}
