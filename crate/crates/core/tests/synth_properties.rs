use std::collections::{BTreeSet, HashSet};

use qrec_core::graph::Attribute;
use qrec_core::synth::{
    generate_queries, generate_query, generate_world, oracle_answer, render_query_tokens,
};
use qrec_core::{Catalog, Category, CategoryMix, ItemId, QueryInstance, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> SynthConfig {
    SynthConfig {
        num_queries: 1000,
        seed,
        ..SynthConfig::default()
    }
}

fn attrs(cat: &Catalog, id: &ItemId) -> BTreeSet<Attribute> {
    cat.graph().attributes(cat.index_of(id).unwrap()).clone()
}

/// Independent resolution: stated values as given, evidence-linked values
/// from the intersection of the evidence items' values.
fn resolve(q: &QueryInstance, cat: &Catalog) -> Vec<Attribute> {
    q.constraints
        .iter()
        .map(|c| {
            if !c.evidence {
                return Attribute::new(&c.relation, c.value.as_ref().unwrap());
            }
            let mut common: Option<BTreeSet<String>> = None;
            for e in &q.evidence {
                let vals: BTreeSet<String> = attrs(cat, e)
                    .into_iter()
                    .filter(|a| a.relation == c.relation)
                    .map(|a| a.value)
                    .collect();
                common = Some(match common {
                    None => vals,
                    Some(s) => s.intersection(&vals).cloned().collect(),
                });
            }
            let common = common.unwrap();
            assert_eq!(
                common.len(),
                1,
                "{}: evidence must pin one value",
                q.query_id
            );
            Attribute::new(&c.relation, common.iter().next().unwrap())
        })
        .collect()
}

fn satisfying(q: &QueryInstance, cat: &Catalog, constraints: &[Attribute]) -> Vec<ItemId> {
    q.candidates
        .iter()
        .filter(|c| {
            let a = attrs(cat, c);
            constraints.iter().all(|x| a.contains(x))
        })
        .cloned()
        .collect()
}

#[test]
fn every_instance_has_a_unique_oracle_answer() {
    let cfg = config(4);
    let world = generate_world(&cfg).unwrap();
    let queries = generate_queries(&cfg, &world.catalog).unwrap();
    assert_eq!(queries.len(), 1000);
    let mut per_cat = [0usize; 3];
    for q in &queries {
        per_cat[q.category.index()] += 1;
        assert_eq!(q.candidates.len(), 20);
        assert!(q.candidates.contains(&q.ground_truth));
        let unique: HashSet<_> = q.candidates.iter().collect();
        assert_eq!(unique.len(), 20);
        assert_eq!(oracle_answer(q, &world.catalog).unwrap(), q.ground_truth);

        let resolved = resolve(q, &world.catalog);
        assert_eq!(
            satisfying(q, &world.catalog, &resolved),
            vec![q.ground_truth.clone()]
        );
        match q.category {
            Category::Explicit => {
                assert!(q.evidence.is_empty());
                assert!(q
                    .constraints
                    .iter()
                    .all(|c| c.value.is_some() && !c.evidence));
            }
            Category::Implicit => {
                assert_eq!(q.evidence.len(), 2);
                let linked: Vec<_> = q.constraints.iter().filter(|c| c.evidence).collect();
                assert_eq!(linked.len(), 1);
                assert!(linked[0].value.is_none());
            }
            Category::Misinformed => {
                let linked = q.constraints.iter().find(|c| c.evidence).unwrap();
                let stated = Attribute::new(&linked.relation, linked.value.as_ref().unwrap());
                assert!(!attrs(&world.catalog, &q.ground_truth).contains(&stated));
                assert!(!resolved.contains(&stated));
            }
        }
    }
    assert_eq!(per_cat, [500, 300, 200]);
}

#[test]
fn random_guessing_hits_one_in_twenty() {
    let cfg = config(9);
    let world = generate_world(&cfg).unwrap();
    let queries = generate_queries(&cfg, &world.catalog).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hits = queries
        .iter()
        .filter(|q| q.candidates[rng.random_range(0..q.candidates.len())] == q.ground_truth)
        .count();
    let n = queries.len() as f64;
    let p = 1.0 / 20.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((hits as f64 - n * p).abs() <= 3.0 * sigma, "{hits} hits");
}

#[test]
fn generation_is_deterministic_and_sized() {
    let cfg = SynthConfig {
        num_items: 100,
        num_queries: 50,
        ..config(2)
    };
    let a = generate_world(&cfg).unwrap();
    assert_eq!(a, generate_world(&cfg).unwrap());
    assert_eq!(a.catalog.graph().edge_count(), 300);
    let qa = generate_queries(&cfg, &a.catalog).unwrap();
    assert_eq!(qa, generate_queries(&cfg, &a.catalog).unwrap());
    let b = generate_world(&SynthConfig {
        seed: 3,
        ..cfg.clone()
    })
    .unwrap();
    assert_ne!(a.catalog, b.catalog);
}

#[test]
fn rendered_queries_are_distinct_and_fixed_length() {
    let cfg = config(5);
    let world = generate_world(&cfg).unwrap();
    let queries = generate_queries(&cfg, &world.catalog).unwrap();
    let mut seen = HashSet::new();
    for q in &queries {
        let t = render_query_tokens(q);
        assert_eq!(t, render_query_tokens(q));
        let evidence_block = if q.evidence.is_empty() {
            0
        } else {
            1 + q.evidence.len()
        };
        assert_eq!(
            t.len(),
            1 + q.constraints.len() + evidence_block + 1 + 20 + 1
        );
        if q.category == Category::Explicit {
            assert_eq!(t.len(), 25);
        }
        assert!(seen.insert(t), "duplicate rendering for {}", q.query_id);
    }
}

#[test]
fn a_corrupted_negative_makes_the_instance_ambiguous() {
    let cfg = config(6);
    let world = generate_world(&cfg).unwrap();
    let q = generate_query("x", Category::Explicit, &world.catalog, 20, 100, 42).unwrap();
    let resolved = resolve(&q, &world.catalog);
    // A catalog item outside the candidates that also satisfies everything.
    let rival = world
        .catalog
        .items()
        .iter()
        .map(|it| it.id.clone())
        .find(|id| {
            *id != q.ground_truth && {
                let a = attrs(&world.catalog, id);
                resolved.iter().all(|x| a.contains(x))
            }
        });
    let mut bad = q.clone();
    match rival {
        Some(r) => {
            let slot = bad
                .candidates
                .iter()
                .position(|c| *c != bad.ground_truth)
                .unwrap();
            bad.candidates[slot] = r;
        }
        None => bad.candidates.push(bad.ground_truth.clone()),
    }
    let err = oracle_answer(&bad, &world.catalog).unwrap_err();
    assert!(err.to_string().contains("candidates satisfy"), "{err}");
}

/// Mean Jaccard overlap of item sets between users who share a profile.
fn same_profile_overlap(world: &qrec_core::World) -> f64 {
    let g = &world.interactions;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..g.user_count() {
        for b in a + 1..g.user_count() {
            if world.profiles[a] != world.profiles[b] {
                continue;
            }
            let (x, y) = (g.items_of(a), g.items_of(b));
            let inter = x.intersection(y).count() as f64;
            let union = x.union(y).count() as f64;
            total += inter / union;
            pairs += 1;
        }
    }
    total / pairs.max(1) as f64
}

#[test]
fn shared_profiles_share_items_beyond_chance() {
    let base = config(8);
    let biased = generate_world(&base).unwrap();
    let null = generate_world(&SynthConfig {
        preference_strength: 0.0,
        ..base.clone()
    })
    .unwrap();
    let (b, n) = (same_profile_overlap(&biased), same_profile_overlap(&null));
    assert!(b > 1.5 * n, "profile overlap {b} vs null {n}");
}

#[test]
fn mix_counts_and_validation() {
    let mix = CategoryMix::default();
    assert_eq!(mix.counts(1000), [500, 300, 200]);
    assert_eq!(mix.counts(7).iter().sum::<usize>(), 7);
    let bad = SynthConfig {
        candidate_count: 1,
        ..SynthConfig::default()
    };
    assert!(generate_world(&bad).is_err());
    let skew = SynthConfig {
        mix: CategoryMix {
            explicit: 0.5,
            implicit: 0.5,
            misinformed: 0.5,
        },
        ..SynthConfig::default()
    };
    assert!(skew.validate().is_err());
}
